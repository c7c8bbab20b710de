import { describe, expect, it } from "vitest";
import { diffImages, maskOutline } from "../src/diff.js";
import { RunHistory } from "../src/history.js";

describe("image diff", () => {
  it("splits changed pixels by the focus mask", () => {
    const w = 4, h = 2;
    const a = new Uint8Array(w * h * 4).fill(10);
    const b = new Uint8Array(a);
    b[0] = 200;            // pixel 0 changes
    b[(5 * 4) + 2] = 99;   // pixel 5 changes (blue channel)
    const focus = new Uint8Array(w * h);
    focus[0] = 1;
    const summary = diffImages(a, b, w, h, focus);
    expect(summary.changedCount).toBe(2);
    expect(summary.changedInside).toBe(1);
    expect(summary.changedOutside).toBe(1);
  });

  it("ignores alpha-only changes and tolerated noise", () => {
    const a = new Uint8Array(16).fill(100);
    const b = new Uint8Array(a);
    b[3] = 0;   // alpha of pixel 0
    b[4] = 101; // red of pixel 1, within tolerance 2
    const summary = diffImages(a, b, 2, 2, undefined, 2);
    expect(summary.changedCount).toBe(0);
  });

  it("outlines mask boundaries", () => {
    const bits = new Uint8Array(25);
    for (let y = 1; y <= 3; y++) for (let x = 1; x <= 3; x++) bits[y * 5 + x] = 1;
    const outline = maskOutline(bits, 5, 5);
    expect(outline[2 * 5 + 2]).toBe(0);  // interior
    expect(outline[1 * 5 + 1]).toBe(1);  // corner
    expect(outline.reduce((s, v) => s + v, 0)).toBe(8);
  });
});

describe("run history", () => {
  it("never mutates completed entries", () => {
    const history = new RunHistory();
    const entry = history.add({
      id: "job1", submittedAt: 1, params: { seed: 5 },
      instanceTexts: ["a red circle"], resultPngBase64: "abc",
      provenance: { seed: 5 },
    });
    expect(() => {
      (entry.params as Record<string, unknown>).seed = 9;
    }).toThrow();
    expect(history.get("job1")!.params.seed).toBe(5);
    history.add({ id: "job2", submittedAt: 2, params: {}, instanceTexts: [],
      resultPngBase64: "def", provenance: {} });
    expect(history.all()).toHaveLength(2);
    expect(history.latest()!.id).toBe("job2");
  });
});
