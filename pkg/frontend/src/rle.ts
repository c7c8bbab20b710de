/** Run-length codec for binary masks: row-major, zero-run first.
 * Must stay bit-compatible with the server's wire format. */

export interface RleMask {
  h: number;
  w: number;
  runs: number[];
}

export function rleEncode(bits: Uint8Array, h: number, w: number): RleMask {
  if (bits.length !== h * w) {
    throw new Error(`mask has ${bits.length} entries, expected ${h * w}`);
  }
  const runs: number[] = [];
  let current = 0;
  let count = 0;
  for (const v of bits) {
    if (v !== 0 && v !== 1) throw new Error("mask entries must be 0 or 1");
    if (v === current) {
      count += 1;
    } else {
      runs.push(count);
      current = v;
      count = 1;
    }
  }
  runs.push(count);
  return { h, w, runs };
}

export function rleDecode(mask: RleMask): Uint8Array {
  const { h, w, runs } = mask;
  const total = runs.reduce((a, b) => a + b, 0);
  if (total !== h * w) {
    throw new Error(`run sum ${total} != ${h}*${w}`);
  }
  const out = new Uint8Array(h * w);
  let pos = 0;
  let value = 0;
  for (const run of runs) {
    if (run < 0) throw new Error("negative run length");
    out.fill(value, pos, pos + run);
    pos += run;
    value ^= 1;
  }
  return out;
}
