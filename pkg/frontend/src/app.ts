/** Studio wiring: paint instance masks over a grayscale image, attach texts,
 * tune sampler parameters, submit, poll, compare runs. */

import { StudioApi, ApiError, ColorizePayload } from "./api.js";
import { MaskProject, CanvasInstance } from "./maskModel.js";
import { RunHistory, HistoryEntry } from "./history.js";
import { diffImages, maskOutline } from "./diff.js";

const SCALE = 12; // screen pixels per image pixel

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

interface LoadedImage {
  width: number;
  height: number;
  grayBase64: string;     // original file bytes, base64
  pixels: Uint8ClampedArray; // RGBA of the grayscale image
}

class StudioApp {
  private api = new StudioApi("");
  private history = new RunHistory();
  private image: LoadedImage | null = null;
  private project: MaskProject | null = null;
  private active: CanvasInstance | null = null;
  private erasing = false;
  private brushRadius = 2;
  private inflight = false;
  private overlayOn = true;
  private lastResultPixels: Uint8ClampedArray | null = null;

  private canvas = el<HTMLCanvasElement>("paint-canvas");
  private resultCanvas = el<HTMLCanvasElement>("result-canvas");
  private status = el<HTMLDivElement>("status");
  private fieldError = el<HTMLDivElement>("field-error");

  async start(): Promise<void> {
    try {
      const health = await this.api.health();
      el<HTMLSpanElement>("ckpt-hash").textContent = health.checkpoint_hash;
      const palette = await this.api.palette();
      const datalist = el<HTMLDataListElement>("palette-words");
      for (const color of Object.keys(palette.colors)) {
        for (const shape of palette.shapes) {
          const option = document.createElement("option");
          option.value = `a ${color} ${shape}`;
          datalist.appendChild(option);
        }
      }
    } catch (err) {
      this.setStatus(`server unreachable: ${err}`);
    }
    this.bindControls();
  }

  private setStatus(text: string): void {
    this.status.textContent = text;
  }

  private bindControls(): void {
    el<HTMLInputElement>("gray-file").addEventListener("change", (e) => {
      const input = e.target as HTMLInputElement;
      if (input.files && input.files[0]) void this.loadImage(input.files[0]);
    });
    el<HTMLButtonElement>("add-instance").addEventListener("click", () => {
      if (!this.project) return;
      this.active = this.project.addInstance("");
      this.renderInstanceList();
    });
    const brush = el<HTMLInputElement>("brush-size");
    brush.addEventListener("input", () => {
      this.brushRadius = Number(brush.value);
    });
    el<HTMLInputElement>("erase-toggle").addEventListener("change", (e) => {
      this.erasing = (e.target as HTMLInputElement).checked;
    });
    el<HTMLInputElement>("overlay-toggle").addEventListener("change", (e) => {
      this.overlayOn = (e.target as HTMLInputElement).checked;
      this.renderResult();
    });
    el<HTMLButtonElement>("submit").addEventListener("click", () => void this.submit());

    let painting = false;
    const paintAt = (ev: MouseEvent) => {
      if (!this.project || !this.active) return;
      const rect = this.canvas.getBoundingClientRect();
      const x = (ev.clientX - rect.left) / SCALE;
      const y = (ev.clientY - rect.top) / SCALE;
      this.project.brush(this.active.index, x, y, this.brushRadius,
        this.erasing ? 0 : 1);
      this.renderPaint();
    };
    this.canvas.addEventListener("mousedown", (ev) => {
      painting = true;
      paintAt(ev);
    });
    this.canvas.addEventListener("mousemove", (ev) => {
      if (painting) paintAt(ev);
    });
    window.addEventListener("mouseup", () => {
      painting = false;
    });
  }

  private async loadImage(file: File): Promise<void> {
    const bytes = new Uint8Array(await file.arrayBuffer());
    let b64 = "";
    for (let i = 0; i < bytes.length; i += 0x8000) {
      b64 += String.fromCharCode(...bytes.subarray(i, i + 0x8000));
    }
    const grayBase64 = btoa(b64);
    const url = URL.createObjectURL(file);
    const img = new Image();
    await new Promise<void>((resolve, reject) => {
      img.onload = () => resolve();
      img.onerror = () => reject(new Error("not a decodable image"));
      img.src = url;
    });
    const probe = document.createElement("canvas");
    probe.width = img.width;
    probe.height = img.height;
    const ctx = probe.getContext("2d")!;
    ctx.drawImage(img, 0, 0);
    const pixels = ctx.getImageData(0, 0, img.width, img.height).data;
    this.image = { width: img.width, height: img.height, grayBase64, pixels };
    this.project = new MaskProject(img.width, img.height);
    this.active = this.project.addInstance("");
    this.canvas.width = img.width * SCALE;
    this.canvas.height = img.height * SCALE;
    this.renderInstanceList();
    this.renderPaint();
    this.setStatus(`loaded ${img.width}x${img.height}`);
  }

  private renderInstanceList(): void {
    if (!this.project) return;
    const list = el<HTMLDivElement>("instance-list");
    list.replaceChildren();
    for (const inst of this.project.instances) {
      const row = document.createElement("div");
      row.className = "instance-row" + (inst === this.active ? " active" : "");
      const chip = document.createElement("span");
      chip.className = "chip";
      chip.style.background = inst.chip;
      chip.addEventListener("click", () => {
        this.active = inst;
        this.renderInstanceList();
      });
      const text = document.createElement("input");
      text.value = inst.text;
      text.placeholder = "object + color, e.g. a red circle";
      text.setAttribute("list", "palette-words");
      text.addEventListener("input", () => {
        inst.text = text.value;
      });
      const remove = document.createElement("button");
      remove.textContent = "x";
      remove.addEventListener("click", () => {
        this.project!.removeInstance(inst.index);
        if (this.active === inst) this.active = this.project!.instances[0] ?? null;
        this.renderInstanceList();
        this.renderPaint();
      });
      row.append(chip, text, remove);
      list.appendChild(row);
    }
  }

  private renderPaint(): void {
    if (!this.image || !this.project) return;
    const ctx = this.canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    const probe = document.createElement("canvas");
    probe.width = this.image.width;
    probe.height = this.image.height;
    probe.getContext("2d")!.putImageData(
      new ImageData(this.image.pixels.slice(), this.image.width, this.image.height), 0, 0);
    ctx.drawImage(probe, 0, 0, this.canvas.width, this.canvas.height);
    for (const inst of this.project.instances) {
      ctx.fillStyle = inst.chip + "66";
      for (let y = 0; y < this.image.height; y++) {
        for (let x = 0; x < this.image.width; x++) {
          if (inst.bits[y * this.image.width + x] === 1) {
            ctx.fillRect(x * SCALE, y * SCALE, SCALE, SCALE);
          }
        }
      }
    }
  }

  private paramsPayload(): ColorizePayload {
    if (!this.image || !this.project) throw new Error("load an image first");
    const num = (id: string) => Number(el<HTMLInputElement>(id).value);
    return {
      gray_png_base64: this.image.grayBase64,
      global_text: el<HTMLInputElement>("global-text").value,
      instances: this.project.paintedInstances().map((inst) => ({
        text: inst.text,
        mask: this.project!.toWire()[this.project!.instances.indexOf(inst)].mask,
      })),
      alpha: num("param-alpha"),
      beta: num("param-beta"),
      steps: num("param-steps"),
      guidance: num("param-guidance"),
      seed: num("param-seed"),
      luma_lock: el<HTMLInputElement>("param-luma-lock").checked,
    };
  }

  private async submit(): Promise<void> {
    if (this.inflight) {
      this.setStatus("a job is already running");
      return;
    }
    this.fieldError.textContent = "";
    let payload: ColorizePayload;
    try {
      payload = this.paramsPayload();
    } catch (err) {
      this.setStatus(String(err));
      return;
    }
    this.inflight = true;
    try {
      this.setStatus("submitting...");
      const jobId = await this.api.submit(payload);
      this.setStatus(`job ${jobId} running...`);
      const job = await this.api.waitForJob(jobId);
      if (job.state === "failed") {
        this.setStatus(`job failed: ${job.error}`);
        return;
      }
      const entry = this.history.add({
        id: jobId,
        submittedAt: Date.now(),
        params: { alpha: payload.alpha, beta: payload.beta, steps: payload.steps,
                  guidance: payload.guidance, seed: payload.seed },
        instanceTexts: (payload.instances ?? []).map((i) => i.text),
        resultPngBase64: job.result_png_base64!,
        provenance: job.provenance ?? {},
      });
      await this.renderEntry(entry);
      this.renderHistoryStrip();
      this.setStatus(`job ${jobId} done`);
    } catch (err) {
      if (err instanceof ApiError && err.field) {
        this.fieldError.textContent = `${err.field}: ${err.message}`;
      }
      this.setStatus(`request failed: ${err}`);
    } finally {
      this.inflight = false;
    }
  }

  private async decodeResult(base64: string): Promise<{ pixels: Uint8ClampedArray; w: number; h: number }> {
    const img = new Image();
    await new Promise<void>((resolve, reject) => {
      img.onload = () => resolve();
      img.onerror = () => reject(new Error("bad result PNG"));
      img.src = `data:image/png;base64,${base64}`;
    });
    const probe = document.createElement("canvas");
    probe.width = img.width;
    probe.height = img.height;
    const ctx = probe.getContext("2d")!;
    ctx.drawImage(img, 0, 0);
    return { pixels: ctx.getImageData(0, 0, img.width, img.height).data,
             w: img.width, h: img.height };
  }

  private async renderEntry(entry: HistoryEntry): Promise<void> {
    const { pixels, w, h } = await this.decodeResult(entry.resultPngBase64);
    if (this.lastResultPixels && this.project) {
      const summary = diffImages(this.lastResultPixels, pixels, w, h, undefined, 2);
      el<HTMLSpanElement>("diff-note").textContent =
        `${summary.changedCount} px changed vs previous run`;
    }
    this.lastResultPixels = pixels;
    this.renderResult();
  }

  private renderResult(): void {
    if (!this.lastResultPixels || !this.image) return;
    const { width, height } = this.image;
    this.resultCanvas.width = width * SCALE;
    this.resultCanvas.height = height * SCALE;
    const ctx = this.resultCanvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    const probe = document.createElement("canvas");
    probe.width = width;
    probe.height = height;
    probe.getContext("2d")!.putImageData(
      new ImageData(this.lastResultPixels.slice(), width, height), 0, 0);
    ctx.drawImage(probe, 0, 0, this.resultCanvas.width, this.resultCanvas.height);
    if (this.overlayOn && this.project) {
      for (const inst of this.project.instances) {
        const outline = maskOutline(inst.bits, width, height);
        ctx.fillStyle = inst.chip;
        for (let p = 0; p < outline.length; p++) {
          if (outline[p] === 1) {
            ctx.fillRect((p % width) * SCALE, Math.floor(p / width) * SCALE,
              SCALE, SCALE / 4);
          }
        }
      }
    }
  }

  private renderHistoryStrip(): void {
    const strip = el<HTMLDivElement>("history-strip");
    strip.replaceChildren();
    for (const entry of this.history.all()) {
      const cell = document.createElement("div");
      cell.className = "history-cell";
      const img = document.createElement("img");
      img.src = `data:image/png;base64,${entry.resultPngBase64}`;
      img.title = JSON.stringify(entry.params);
      img.addEventListener("click", () => void this.renderEntry(entry));
      const label = document.createElement("div");
      label.textContent = `seed ${entry.params.seed} | ${entry.instanceTexts.join("; ")}`;
      cell.append(img, label);
      strip.appendChild(cell);
    }
  }
}

window.addEventListener("DOMContentLoaded", () => {
  void new StudioApp().start();
});
