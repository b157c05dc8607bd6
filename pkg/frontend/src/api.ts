/** Typed client for the annotation service (HTTP + JSON, base64 rasters). */

import { RasterPayload, decodeMask, decodeSlice, encodeMask } from "./codec.js";

export interface VolumeInfo {
  volume_id: string;
  depth: number;
  height: number;
  width: number;
  gt_classes: number[];
}

export interface PoolEntrySummary {
  ordinal: number;
  provenance: "ground_truth" | "predicted";
  volume_id: string;
  slice_index: number;
  fg_area: number;
  sequence_id: string | null;
}

export interface SegmentResult {
  mask: Uint8Array;
  shape: number[];
  fg_confidence: number;
  qc_passed: boolean;
  supports: number[];
  note: string | null;
  pool_version: number;
}

export interface PropagateResult {
  slices: number;
  added_to_pool: number;
  pool_version: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request(method: string, path: string, body?: unknown): Promise<any> {
    const init: RequestInit = { method, headers: { "Content-Type": "application/json" } };
    if (body !== undefined) init.body = JSON.stringify(body);
    const resp = await this.fetchFn(this.baseUrl + path, init);
    let payload: any = null;
    try {
      payload = await resp.json();
    } catch {
      payload = null;
    }
    if (!resp.ok) {
      const detail = payload?.error ?? payload?.detail ?? resp.statusText;
      throw new ApiError(resp.status, `${method} ${path}: ${JSON.stringify(detail)}`);
    }
    return payload;
  }

  async listVolumes(): Promise<VolumeInfo[]> {
    return (await this.request("GET", "/volumes")).volumes;
  }

  async fetchSlice(vid: string, z: number): Promise<{ data: Float32Array; shape: number[] }> {
    const body = await this.request("GET", `/volumes/${vid}/slices/${z}`);
    return decodeSlice(body.raster as RasterPayload);
  }

  async fetchMask(vid: string, z: number): Promise<{ data: Uint8Array; shape: number[]; source: string }> {
    const body = await this.request("GET", `/volumes/${vid}/masks/${z}`);
    return { ...decodeMask(body.raster as RasterPayload), source: body.source };
  }

  /** Stores a mask; resolves to the server's echoed raster (verify bit-exactness!). */
  async commitMask(vid: string, z: number, mask: Uint8Array, h: number, w: number): Promise<Uint8Array> {
    const body = await this.request("PUT", `/volumes/${vid}/masks/${z}`, {
      raster: encodeMask(mask, h, w),
    });
    return decodeMask(body.raster as RasterPayload).data;
  }

  async poolListing(): Promise<{ entries: PoolEntrySummary[]; pool_version: number }> {
    const body = await this.request("GET", "/pool");
    return { entries: body.entries, pool_version: body.pool_version };
  }

  async addToPool(vid: string, z: number, mask: Uint8Array, h: number, w: number): Promise<number> {
    const body = await this.request("POST", "/pool/entries", {
      volume_id: vid,
      slice_index: z,
      raster: encodeMask(mask, h, w),
    });
    return body.pool_version;
  }

  async segment(vid: string, z: number, n: number, qc: boolean): Promise<SegmentResult> {
    const body = await this.request("POST", "/segment", {
      volume_id: vid, slice_index: z, n, qc,
    });
    const { data, shape } = decodeMask(body.mask as RasterPayload);
    return {
      mask: data, shape,
      fg_confidence: body.fg_confidence,
      qc_passed: body.qc_passed,
      supports: body.supports,
      note: body.note ?? null,
      pool_version: body.pool_version,
    };
  }

  async propagate(vid: string, n: number, qc: boolean): Promise<PropagateResult> {
    const body = await this.request("POST", "/propagate", {
      volume_id: vid, n, qc,
    });
    return {
      slices: body.slices,
      added_to_pool: body.added_to_pool,
      pool_version: body.pool_version,
    };
  }
}
