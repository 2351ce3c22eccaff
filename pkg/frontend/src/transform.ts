/**
 * Zoom/pan mapping between image pixel coordinates and display (canvas)
 * coordinates. displayToImage is the exact algebraic inverse of
 * imageToDisplay for every valid transform.
 */

export interface ViewTransform {
  scale: number; // display px per image px, > 0
  offsetX: number; // display-space translation
  offsetY: number;
}

export interface Pt {
  x: number;
  y: number;
}

export const IDENTITY: ViewTransform = { scale: 1, offsetX: 0, offsetY: 0 };

export function imageToDisplay(t: ViewTransform, p: Pt): Pt {
  return { x: p.x * t.scale + t.offsetX, y: p.y * t.scale + t.offsetY };
}

export function displayToImage(t: ViewTransform, p: Pt): Pt {
  return { x: (p.x - t.offsetX) / t.scale, y: (p.y - t.offsetY) / t.scale };
}

/** Zoom by `factor` keeping the display point `anchor` fixed on screen. */
export function zoomAt(t: ViewTransform, anchor: Pt, factor: number): ViewTransform {
  if (factor <= 0) throw new Error("zoom factor must be positive");
  const scale = t.scale * factor;
  return {
    scale,
    offsetX: anchor.x - (anchor.x - t.offsetX) * factor,
    offsetY: anchor.y - (anchor.y - t.offsetY) * factor,
  };
}

export function pan(t: ViewTransform, dx: number, dy: number): ViewTransform {
  return { scale: t.scale, offsetX: t.offsetX + dx, offsetY: t.offsetY + dy };
}

/** Initial transform that letterboxes an image into a display viewport. */
export function fitTransform(
  imgW: number,
  imgH: number,
  viewW: number,
  viewH: number,
): ViewTransform {
  const scale = Math.min(viewW / imgW, viewH / imgH);
  return {
    scale,
    offsetX: (viewW - imgW * scale) / 2,
    offsetY: (viewH - imgH * scale) / 2,
  };
}
