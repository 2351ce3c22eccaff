/**
 * Run-length mask transport used by the measurement service:
 * row-major runs, alternating background/foreground, first run background
 * (a leading 0 means the mask starts with foreground).
 */

export function decodeRle(runs: number[], height: number, width: number): Uint8Array {
  const total = runs.reduce((a, b) => a + b, 0);
  if (total !== height * width) {
    throw new Error(`RLE length ${total} != ${height}x${width}`);
  }
  const mask = new Uint8Array(height * width);
  let idx = 0;
  let val = 0;
  for (const run of runs) {
    if (run < 0) throw new Error("negative run length");
    mask.fill(val, idx, idx + run);
    idx += run;
    val = 1 - val;
  }
  return mask;
}

export function encodeRle(mask: Uint8Array | number[]): number[] {
  const runs: number[] = [];
  let val = 0;
  let run = 0;
  for (const px of mask) {
    const bit = px ? 1 : 0;
    if (bit === val) {
      run++;
    } else {
      runs.push(run);
      val = bit;
      run = 1;
    }
  }
  runs.push(run);
  return runs;
}

/**
 * 4-connected boundary pixels of a row-major binary mask: foreground pixels
 * with at least one off (or out-of-bounds) 4-neighbour. Used to draw the
 * mask contour without filling the whole region.
 */
export function maskBoundary(
  mask: Uint8Array,
  height: number,
  width: number,
): Array<{ x: number; y: number }> {
  const pts: Array<{ x: number; y: number }> = [];
  const at = (x: number, y: number) =>
    x >= 0 && x < width && y >= 0 && y < height && mask[y * width + x] !== 0;
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      if (!mask[y * width + x]) continue;
      if (!at(x - 1, y) || !at(x + 1, y) || !at(x, y - 1) || !at(x, y + 1)) {
        pts.push({ x, y });
      }
    }
  }
  return pts;
}
