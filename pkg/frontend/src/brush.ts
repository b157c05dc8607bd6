/**
 * Brush strokes rasterized at native mask resolution.
 *
 * Strokes are disk stamps swept along the polyline of pointer samples;
 * coordinates are raster pixels (the caller maps from display space),
 * so edits are independent of display zoom and round-trip bit-exact.
 */

export type BrushMode = "paint" | "erase";

export interface Stroke {
  points: Array<{ x: number; y: number }>;
  radius: number;
  mode: BrushMode;
}

function stamp(mask: Uint8Array, width: number, height: number,
               cx: number, cy: number, radius: number, value: number): void {
  const r = Math.max(0, radius);
  const x0 = Math.max(0, Math.floor(cx - r));
  const x1 = Math.min(width - 1, Math.ceil(cx + r));
  const y0 = Math.max(0, Math.floor(cy - r));
  const y1 = Math.min(height - 1, Math.ceil(cy + r));
  const r2 = r * r;
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dx = x - cx;
      const dy = y - cy;
      if (dx * dx + dy * dy <= r2) mask[y * width + x] = value;
    }
  }
}

/** Applies one stroke in place; returns the number of pixels that changed. */
export function applyStroke(mask: Uint8Array, width: number, height: number,
                            stroke: Stroke): number {
  if (mask.length !== width * height) {
    throw new Error("mask buffer does not match dims");
  }
  const value = stroke.mode === "paint" ? 1 : 0;
  const before = mask.slice();
  const pts = stroke.points;
  if (pts.length === 0) return 0;
  stamp(mask, width, height, pts[0].x, pts[0].y, stroke.radius, value);
  for (let i = 1; i < pts.length; i++) {
    const a = pts[i - 1];
    const b = pts[i];
    const dist = Math.hypot(b.x - a.x, b.y - a.y);
    const steps = Math.max(1, Math.ceil(dist));         // <= 1 px spacing
    for (let s = 1; s <= steps; s++) {
      const t = s / steps;
      stamp(mask, width, height, a.x + t * (b.x - a.x), a.y + t * (b.y - a.y),
            stroke.radius, value);
    }
  }
  let changed = 0;
  for (let i = 0; i < mask.length; i++) if (mask[i] !== before[i]) changed++;
  return changed;
}

export function emptyMask(width: number, height: number): Uint8Array {
  return new Uint8Array(width * height);
}

export function maskArea(mask: Uint8Array): number {
  let n = 0;
  for (let i = 0; i < mask.length; i++) if (mask[i]) n++;
  return n;
}
