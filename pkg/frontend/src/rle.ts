/**
 * Run-length decoding for the mask wire format.
 *
 * Counts alternate background/foreground runs over the row-major flattened
 * mask, starting with a (possibly zero-length) background run. The server's
 * foreground_pixels field is verified as a decode checksum.
 */

export interface RleMask {
  size: [number, number]; // [height, width]
  order: string;
  counts: number[];
  foreground_pixels: number;
  label?: number;
}

export function decodeRle(obj: RleMask): Uint8Array {
  if (obj.order !== "row-major") {
    throw new Error(`unsupported RLE order: ${obj.order}`);
  }
  const [h, w] = obj.size;
  const total = h * w;
  const mask = new Uint8Array(total);
  let pos = 0;
  let value = 0;
  for (const run of obj.counts) {
    if (run < 0) throw new Error("negative run length");
    if (value === 1) mask.fill(1, pos, pos + run);
    pos += run;
    value = 1 - value;
  }
  if (pos !== total) {
    throw new Error(`run lengths sum to ${pos}, expected ${total}`);
  }
  let fg = 0;
  for (let i = 0; i < total; i++) fg += mask[i];
  if (obj.foreground_pixels !== undefined && fg !== obj.foreground_pixels) {
    throw new Error(
      `foreground checksum mismatch: decoded ${fg}, declared ${obj.foreground_pixels}`,
    );
  }
  return mask;
}

export function encodeRle(mask: Uint8Array, height: number, width: number): RleMask {
  if (mask.length !== height * width) {
    throw new Error(`mask length ${mask.length} does not match ${height}x${width}`);
  }
  const counts: number[] = [];
  let value = 0;
  let run = 0;
  let fg = 0;
  for (let i = 0; i < mask.length; i++) {
    const v = mask[i] ? 1 : 0;
    fg += v;
    if (v === value) {
      run++;
    } else {
      counts.push(run);
      value = v;
      run = 1;
    }
  }
  counts.push(run);
  if (mask.length === 0) counts.length = 0;
  if (counts.length === 0) counts.push(0);
  return {
    size: [height, width],
    order: "row-major",
    counts,
    foreground_pixels: fg,
  };
}

export function foregroundCount(mask: Uint8Array): number {
  let fg = 0;
  for (let i = 0; i < mask.length; i++) if (mask[i]) fg++;
  return fg;
}
