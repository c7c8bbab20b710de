/** Pixel diff between two runs, for the "what changed" overlay. */

export interface DiffSummary {
  changed: Uint8Array;        // per-pixel 0/1
  changedCount: number;
  changedInside: number;      // within the focus mask
  changedOutside: number;
}

/** Compare two RGBA buffers; a pixel counts as changed when any channel
 * moves by more than `tolerance`. `focusMask` (h*w binary) splits the count
 * into inside/outside, e.g. the edited instance's mask. */
export function diffImages(a: Uint8ClampedArray | Uint8Array,
                           b: Uint8ClampedArray | Uint8Array,
                           width: number, height: number,
                           focusMask?: Uint8Array,
                           tolerance = 0): DiffSummary {
  const pixels = width * height;
  if (a.length !== pixels * 4 || b.length !== pixels * 4) {
    throw new Error("expected RGBA buffers matching width*height");
  }
  const changed = new Uint8Array(pixels);
  let changedCount = 0;
  let inside = 0;
  let outside = 0;
  for (let p = 0; p < pixels; p++) {
    const o = p * 4;
    const moved =
      Math.abs(a[o] - b[o]) > tolerance ||
      Math.abs(a[o + 1] - b[o + 1]) > tolerance ||
      Math.abs(a[o + 2] - b[o + 2]) > tolerance;
    if (moved) {
      changed[p] = 1;
      changedCount += 1;
      if (focusMask) {
        if (focusMask[p] === 1) inside += 1;
        else outside += 1;
      }
    }
  }
  return { changed, changedCount, changedInside: inside, changedOutside: outside };
}

/** Mask boundary pixels (4-neighborhood edge) for outline overlays. */
export function maskOutline(bits: Uint8Array, width: number, height: number): Uint8Array {
  const out = new Uint8Array(bits.length);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const p = y * width + x;
      if (bits[p] !== 1) continue;
      const up = y > 0 ? bits[p - width] : 0;
      const down = y < height - 1 ? bits[p + width] : 0;
      const left = x > 0 ? bits[p - 1] : 0;
      const right = x < width - 1 ? bits[p + 1] : 0;
      if (!(up && down && left && right)) out[p] = 1;
    }
  }
  return out;
}
