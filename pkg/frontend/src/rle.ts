// Row-major run-length masks: alternating run lengths, first run counts zeros.

export interface RleMask {
  size: [number, number]; // [height, width]
  counts: number[];
}

export function decodeRle(rle: RleMask): Uint8Array {
  const [h, w] = rle.size;
  const out = new Uint8Array(h * w);
  let pos = 0;
  let value = 0;
  for (const run of rle.counts) {
    if (run < 0 || pos + run > out.length) {
      throw new Error(`invalid RLE run ${run} at offset ${pos}`);
    }
    if (value === 1) {
      out.fill(1, pos, pos + run);
    }
    pos += run;
    value ^= 1;
  }
  if (pos !== out.length) {
    throw new Error(`RLE describes ${pos} pixels, mask has ${out.length}`);
  }
  return out;
}

export function encodeRle(mask: Uint8Array, height: number, width: number): RleMask {
  if (mask.length !== height * width) {
    throw new Error("mask length does not match size");
  }
  const counts: number[] = [];
  let value = 0;
  let run = 0;
  for (let i = 0; i < mask.length; i++) {
    const v = mask[i] ? 1 : 0;
    if (v === value) {
      run += 1;
    } else {
      counts.push(run);
      value = v;
      run = 1;
    }
  }
  counts.push(run);
  return { size: [height, width], counts };
}

export function maskArea(mask: Uint8Array): number {
  let n = 0;
  for (let i = 0; i < mask.length; i++) n += mask[i];
  return n;
}
