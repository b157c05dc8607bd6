/** Canvas rendering: intensity windowing plus color-coded mask overlays. */

export interface Window {
  lo: number;
  hi: number;
}

export const PROVENANCE_COLORS: Record<string, [number, number, number]> = {
  ground_truth: [46, 204, 113],   // green: human-labeled
  predicted: [241, 196, 15],      // amber: model output under review
  editing: [52, 152, 219],        // blue: local uncommitted edits
};

/** Slice floats -> grayscale RGBA at native resolution. */
export function sliceToImageData(data: Float32Array, width: number, height: number,
                                 win: Window = { lo: 0, hi: 1 }): ImageData {
  const img = new ImageData(width, height);
  const span = Math.max(win.hi - win.lo, 1e-6);
  for (let i = 0; i < width * height; i++) {
    const v = Math.min(1, Math.max(0, (data[i] - win.lo) / span));
    const g = Math.round(v * 255);
    img.data[4 * i] = g;
    img.data[4 * i + 1] = g;
    img.data[4 * i + 2] = g;
    img.data[4 * i + 3] = 255;
  }
  return img;
}

/** Blend a binary mask into an RGBA buffer without touching the base raster. */
export function overlayMask(base: ImageData, mask: Uint8Array,
                            color: [number, number, number], opacity: number): ImageData {
  const out = new ImageData(new Uint8ClampedArray(base.data), base.width, base.height);
  const a = Math.min(1, Math.max(0, opacity));
  for (let i = 0; i < mask.length; i++) {
    if (!mask[i]) continue;
    out.data[4 * i] = Math.round((1 - a) * out.data[4 * i] + a * color[0]);
    out.data[4 * i + 1] = Math.round((1 - a) * out.data[4 * i + 1] + a * color[1]);
    out.data[4 * i + 2] = Math.round((1 - a) * out.data[4 * i + 2] + a * color[2]);
  }
  return out;
}

/** Display (canvas) coordinates -> native raster coordinates. */
export function displayToRaster(x: number, y: number, scale: number): { x: number; y: number } {
  return { x: x / scale, y: y / scale };
}
