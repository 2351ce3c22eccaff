import { describe, expect, it } from "vitest";

import { decodeRle, encodeRle, maskBoundary } from "../src/rle";

describe("decodeRle", () => {
  it("decodes alternating runs starting with background", () => {
    // 3x3: row 0 off, row 1 on, row 2 off
    expect(Array.from(decodeRle([3, 3, 3], 3, 3))).toEqual([
      0, 0, 0, 1, 1, 1, 0, 0, 0,
    ]);
  });

  it("leading zero means the mask starts with foreground", () => {
    expect(Array.from(decodeRle([0, 2, 2], 2, 2))).toEqual([1, 1, 0, 0]);
  });

  it("rejects length mismatches", () => {
    expect(() => decodeRle([3, 3], 3, 3)).toThrow(/length/);
  });

  it("round-trips with encodeRle on random masks", () => {
    for (let trial = 0; trial < 20; trial++) {
      const n = 64;
      const mask = new Uint8Array(n);
      for (let i = 0; i < n; i++) mask[i] = (i * 2654435761 + trial) % 7 < 3 ? 1 : 0;
      const runs = encodeRle(mask);
      expect(runs[0] === 0 || mask[0] === 0).toBe(true); // first run is background
      expect(Array.from(decodeRle(runs, 8, 8))).toEqual(Array.from(mask));
    }
  });
});

describe("maskBoundary", () => {
  it("keeps only pixels with an off 4-neighbour", () => {
    // 4x4 solid block: the 2x2 interior of a 4x4 mask is not boundary
    const mask = new Uint8Array(16).fill(1);
    const pts = maskBoundary(mask, 4, 4);
    expect(pts).toHaveLength(12);
    expect(pts).not.toContainEqual({ x: 1, y: 1 });
    expect(pts).toContainEqual({ x: 0, y: 0 });
  });

  it("treats image edges as boundary", () => {
    const mask = new Uint8Array([1, 0, 0, 0]);
    expect(maskBoundary(mask, 2, 2)).toEqual([{ x: 0, y: 0 }]);
  });
});
