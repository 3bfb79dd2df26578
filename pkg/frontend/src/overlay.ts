/**
 * Raster helpers: per-class color compositing over the base image and the
 * circular brush. All functions work on plain arrays at native resolution so
 * they are testable without a DOM; the canvas layer just blits the result.
 */

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number; // 0..255 overlay alpha
}

export const CLASS_COLORS: Rgba[] = [
  { r: 251, g: 146, b: 60, a: 110 }, // orange
  { r: 59, g: 130, b: 246, a: 110 }, // blue
  { r: 34, g: 197, b: 94, a: 110 }, // green
  { r: 168, g: 85, b: 247, a: 110 }, // purple
  { r: 236, g: 72, b: 153, a: 110 }, // pink
  { r: 6, g: 182, b: 212, a: 110 }, // cyan
];

export function colorForClass(index: number): Rgba {
  return CLASS_COLORS[index % CLASS_COLORS.length];
}

/**
 * Alpha-blend visible class masks over an opaque RGBA base buffer.
 * Returns a fresh buffer; inputs are untouched.
 */
export function compositeOverlays(
  base: Uint8ClampedArray,
  width: number,
  height: number,
  masks: Array<{ mask: Uint8Array; color: Rgba }>,
): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(base) as Uint8ClampedArray<ArrayBuffer>;
  for (const { mask, color } of masks) {
    if (mask.length !== width * height) {
      throw new Error(`mask length ${mask.length} does not match ${width}x${height}`);
    }
    const alpha = color.a / 255;
    for (let i = 0; i < mask.length; i++) {
      if (!mask[i]) continue;
      const o = i * 4;
      out[o] = out[o] * (1 - alpha) + color.r * alpha;
      out[o + 1] = out[o + 1] * (1 - alpha) + color.g * alpha;
      out[o + 2] = out[o + 2] * (1 - alpha) + color.b * alpha;
      out[o + 3] = 255;
    }
  }
  return out;
}

/** Paint (value=1) or erase (value=0) a filled circle, in place. */
export function applyBrush(
  mask: Uint8Array,
  width: number,
  height: number,
  cx: number,
  cy: number,
  radius: number,
  value: 0 | 1,
): void {
  const r2 = radius * radius;
  const y0 = Math.max(0, Math.floor(cy - radius));
  const y1 = Math.min(height - 1, Math.ceil(cy + radius));
  const x0 = Math.max(0, Math.floor(cx - radius));
  const x1 = Math.min(width - 1, Math.ceil(cx + radius));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dx = x - cx;
      const dy = y - cy;
      if (dx * dx + dy * dy <= r2) mask[y * width + x] = value;
    }
  }
}
