/** Scripted end-to-end flow against a live `mtcolor serve` instance: paint a
 * two-instance scene, submit, poll to completion, and byte-compare results.
 *
 * Needs MTCOLOR_SERVER (e.g. http://127.0.0.1:8321); skipped otherwise.
 */

import { describe, expect, it } from "vitest";
import { StudioApi } from "../src/api.js";
import { MaskProject } from "../src/maskModel.js";
import { rleDecode } from "../src/rle.js";
import { encodeGrayPng, pngDimensions } from "./pngGray.js";

const SERVER = process.env.MTCOLOR_SERVER ?? "";
const maybe = SERVER ? describe : describe.skip;

function scenePayload(seed: number) {
  const size = 16;
  const gray = new Uint8Array(size * size);
  for (let i = 0; i < gray.length; i++) gray[i] = 120;
  const png = encodeGrayPng(gray, size, size);
  const project = new MaskProject(size, size);
  const circle = project.addInstance("a red circle");
  project.brush(circle.index, 4, 4, 3, 1);
  const square = project.addInstance("a blue square");
  project.brush(square.index, 11, 11, 3, 1);
  const instances = project.toWire();
  // the painted bitmap must survive its own wire encoding exactly
  for (const [i, inst] of project.instances.entries()) {
    expect(rleDecode(instances[i].mask)).toEqual(inst.bits);
  }
  return {
    payload: {
      gray_png_base64: Buffer.from(png).toString("base64"),
      global_text: "a gray background with a red circle and a blue square",
      instances,
      alpha: 0.25,
      beta: 0.2,
      steps: 4,
      guidance: 2.0,
      seed,
    },
    size,
  };
}

maybe("studio e2e against live server", () => {
  const api = new StudioApi(SERVER);

  it("reports health and palette", async () => {
    const health = await api.health();
    expect(health.status).toBe("ok");
    const palette = await api.palette();
    expect(Object.keys(palette.colors)).toContain("red");
  });

  it("paints, submits, polls, and gets byte-stable results", async () => {
    const { payload, size } = scenePayload(77);
    const jobId = await api.submit(payload);
    const job = await api.waitForJob(jobId, 250);
    expect(job.state).toBe("done");
    const png = Buffer.from(job.result_png_base64!, "base64");
    const dims = pngDimensions(new Uint8Array(png));
    expect(dims).toEqual({ width: size, height: size });

    // rendered artifact equals the server artifact byte-for-byte on refetch
    const again = await api.job(jobId);
    expect(again.result_png_base64).toBe(job.result_png_base64);

    // resubmitting the identical request reproduces the bytes exactly
    const jobId2 = await api.submit(scenePayload(77).payload);
    const job2 = await api.waitForJob(jobId2, 250);
    expect(job2.result_png_base64).toBe(job.result_png_base64);

    // a different seed must not
    const jobId3 = await api.submit(scenePayload(78).payload);
    const job3 = await api.waitForJob(jobId3, 250);
    expect(job3.result_png_base64).not.toBe(job.result_png_base64);
  });

  it("surfaces schema violations with field paths", async () => {
    const { payload } = scenePayload(1);
    (payload.instances[0].mask.runs as number[]) = [1, 2, 3];
    await expect(api.submit(payload)).rejects.toMatchObject({
      status: 400,
      field: "instances[0].mask.runs",
    });
  });

  it("accepts an empty unconditional project", async () => {
    const { payload } = scenePayload(3);
    const jobId = await api.submit({
      gray_png_base64: payload.gray_png_base64,
      global_text: "",
      instances: [],
      steps: 2,
      seed: 3,
    });
    const job = await api.waitForJob(jobId, 250);
    expect(job.state).toBe("done");
  });
});
