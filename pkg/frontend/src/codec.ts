/**
 * Raster wire codec: base64-encoded little-endian buffers with explicit dims.
 * Matches the service payloads bit for bit; works in the browser and in node.
 */

export interface RasterPayload {
  shape: number[];
  dtype: "u1" | "<f4";
  data_b64: string;
}

function bytesToBase64(bytes: Uint8Array): string {
  if (typeof Buffer !== "undefined") {
    return Buffer.from(bytes.buffer, bytes.byteOffset, bytes.byteLength).toString("base64");
  }
  let bin = "";
  for (let i = 0; i < bytes.length; i++) bin += String.fromCharCode(bytes[i]);
  return btoa(bin);
}

function base64ToBytes(b64: string): Uint8Array {
  if (typeof Buffer !== "undefined") {
    return new Uint8Array(Buffer.from(b64, "base64"));
  }
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

function count(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function encodeMask(mask: Uint8Array, height: number, width: number): RasterPayload {
  if (mask.length !== height * width) {
    throw new Error(`mask has ${mask.length} bytes, dims imply ${height * width}`);
  }
  return { shape: [height, width], dtype: "u1", data_b64: bytesToBase64(mask) };
}

export function decodeMask(payload: RasterPayload): { data: Uint8Array; shape: number[] } {
  if (payload.dtype !== "u1") throw new Error(`expected u1 raster, got ${payload.dtype}`);
  const data = base64ToBytes(payload.data_b64);
  if (data.length !== count(payload.shape)) {
    throw new Error(`raster carries ${data.length} bytes, dims imply ${count(payload.shape)}`);
  }
  return { data, shape: payload.shape };
}

export function decodeSlice(payload: RasterPayload): { data: Float32Array; shape: number[] } {
  if (payload.dtype !== "<f4") throw new Error(`expected <f4 raster, got ${payload.dtype}`);
  const bytes = base64ToBytes(payload.data_b64);
  const n = count(payload.shape);
  if (bytes.length !== n * 4) {
    throw new Error(`raster carries ${bytes.length} bytes, dims imply ${n * 4}`);
  }
  // explicit little-endian read, independent of platform byte order
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const out = new Float32Array(n);
  for (let i = 0; i < n; i++) out[i] = view.getFloat32(i * 4, true);
  return { data: out, shape: payload.shape };
}

export function masksEqual(a: Uint8Array, b: Uint8Array): boolean {
  if (a.length !== b.length) return false;
  for (let i = 0; i < a.length; i++) if (a[i] !== b[i]) return false;
  return true;
}
