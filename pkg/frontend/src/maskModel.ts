/** Client-side instance masks: raster brush painting over a fixed grid. */

import { RleMask, rleEncode } from "./rle.js";

export interface CanvasInstance {
  index: number;
  text: string;
  chip: string;          // display color for outlines and list chips
  bits: Uint8Array;      // h*w binary, row-major
}

const CHIPS = ["#e81e1e", "#1ec83c", "#2850e8", "#ebdc28", "#963cc8",
  "#f08c1e", "#28c8d2", "#8c5a28"];

export class MaskProject {
  readonly width: number;
  readonly height: number;
  instances: CanvasInstance[] = [];
  private nextIndex = 0;

  constructor(width: number, height: number) {
    if (width < 1 || height < 1) throw new Error("bad canvas dimensions");
    this.width = width;
    this.height = height;
  }

  addInstance(text = ""): CanvasInstance {
    const inst: CanvasInstance = {
      index: this.nextIndex,
      text,
      chip: CHIPS[this.nextIndex % CHIPS.length],
      bits: new Uint8Array(this.width * this.height),
    };
    this.nextIndex += 1;
    this.instances.push(inst);
    return inst;
  }

  removeInstance(index: number): void {
    this.instances = this.instances.filter((i) => i.index !== index);
  }

  get(index: number): CanvasInstance {
    const inst = this.instances.find((i) => i.index === index);
    if (!inst) throw new Error(`no instance ${index}`);
    return inst;
  }

  /** Paint (value=1) or erase (value=0) a brush disc centered at (x, y). */
  brush(index: number, x: number, y: number, radius: number, value: 0 | 1): void {
    const inst = this.get(index);
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(x - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(x + radius));
    const y0 = Math.max(0, Math.floor(y - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(y + radius));
    for (let py = y0; py <= y1; py++) {
      for (let px = x0; px <= x1; px++) {
        const dx = px - x;
        const dy = py - y;
        if (dx * dx + dy * dy <= r2) {
          inst.bits[py * this.width + px] = value;
        }
      }
    }
  }

  area(index: number): number {
    return this.get(index).bits.reduce((a, b) => a + b, 0);
  }

  /** Wire-format instances; empty masks are rejected by the server, so the
   * caller should surface paintedInstances() instead when submitting. */
  toWire(): { text: string; mask: RleMask }[] {
    return this.instances.map((inst) => ({
      text: inst.text,
      mask: rleEncode(inst.bits, this.height, this.width),
    }));
  }

  paintedInstances(): CanvasInstance[] {
    return this.instances.filter((inst) => inst.bits.some((b) => b === 1));
  }
}
