/**
 * Session state machine for the human-in-the-loop workflow.
 *
 * All edits stay local until an explicit commit; pool mutations await the
 * server's acknowledgement and then re-read the authoritative listing
 * (no optimistic updates). The whole state is reconstructible from the
 * service, so a page reload loses nothing that was committed.
 */

import { ApiClient, PoolEntrySummary, VolumeInfo } from "./api.js";
import { BrushMode, Stroke, applyStroke, maskArea } from "./brush.js";
import { masksEqual } from "./codec.js";

export interface ReviewItem {
  sliceIndex: number;
  mask: Uint8Array;
  qcPassed: boolean;
  fgConfidence: number;
  status: "pending" | "accepted" | "rejected" | "correcting";
}

export class SessionState {
  volume: VolumeInfo | null = null;
  cursor = 0;
  overlayVisible = true;
  overlayOpacity = 0.5;
  brushRadius = 3;
  brushMode: BrushMode = "paint";

  /** slice index -> locally edited mask, not yet on the server */
  pendingEdits = new Map<number, Uint8Array>();
  /** slice index -> last mask acknowledged by the server */
  committedMasks = new Map<number, Uint8Array>();

  poolEntries: PoolEntrySummary[] = [];
  poolVersion = -1;

  reviewQueue: ReviewItem[] = [];
  propagationInFlight = false;

  lastNotice = "";

  constructor(private api: ApiClient) {}

  /** Rebuild everything the server knows; used at startup and after reload. */
  async bootstrap(volumeId?: string): Promise<void> {
    const volumes = await this.api.listVolumes();
    if (volumes.length === 0) throw new Error("service lists no volumes");
    this.volume = volumeId
      ? volumes.find((v) => v.volume_id === volumeId) ?? volumes[0]
      : volumes[0];
    this.cursor = 0;
    this.pendingEdits.clear();
    this.committedMasks.clear();
    this.reviewQueue = [];
    await this.refreshPool();
  }

  async refreshPool(): Promise<void> {
    const { entries, pool_version } = await this.api.poolListing();
    this.poolEntries = entries;
    this.poolVersion = pool_version;
  }

  get poolSize(): number {
    return this.poolEntries.length;
  }

  /** Clamps into the volume and reports whether clamping happened. */
  setCursor(index: number): { index: number; clamped: boolean } {
    if (!this.volume) throw new Error("no active volume");
    const max = this.volume.depth - 1;
    const clamped = index < 0 || index > max;
    this.cursor = Math.min(max, Math.max(0, index));
    if (clamped) this.lastNotice = `slice index clamped to ${this.cursor}`;
    return { index: this.cursor, clamped };
  }

  toggleOverlay(): void {
    this.overlayVisible = !this.overlayVisible;
  }

  // -- mask editing ---------------------------------------------------------

  private dims(): { w: number; h: number } {
    if (!this.volume) throw new Error("no active volume");
    return { w: this.volume.width, h: this.volume.height };
  }

  /** The mask currently shown for editing at the cursor (local copy). */
  async editableMask(): Promise<Uint8Array> {
    const { w, h } = this.dims();
    const existing = this.pendingEdits.get(this.cursor);
    if (existing) return existing;
    const server = await this.api.fetchMask(this.volume!.volume_id, this.cursor);
    this.committedMasks.set(this.cursor, server.data.slice());
    const local = server.data.slice();
    if (local.length !== w * h) throw new Error("mask dims mismatch");
    this.pendingEdits.set(this.cursor, local);
    return local;
  }

  applyBrush(stroke: Stroke): number {
    const mask = this.pendingEdits.get(this.cursor);
    if (!mask) throw new Error("no editable mask loaded; call editableMask() first");
    const { w, h } = this.dims();
    return applyStroke(mask, w, h, stroke);
  }

  canCommit(): boolean {
    const mask = this.pendingEdits.get(this.cursor);
    return !!mask && maskArea(mask) > 0;       // empty commits are disabled
  }

  /**
   * Push the pending mask; the server's echo must match what we sent
   * bit for bit. A rejected commit keeps the local edits untouched.
   */
  async commitMask(): Promise<void> {
    const mask = this.pendingEdits.get(this.cursor);
    if (!mask || !this.canCommit()) throw new Error("nothing to commit");
    const { w, h } = this.dims();
    const echo = await this.api.commitMask(
      this.volume!.volume_id, this.cursor, mask, h, w);
    if (!masksEqual(echo, mask)) {
      throw new Error("server echo differs from the committed raster");
    }
    this.committedMasks.set(this.cursor, mask.slice());
    this.pendingEdits.delete(this.cursor);
  }

  discardEdits(): void {
    this.pendingEdits.delete(this.cursor);
  }

  /** Adds the committed mask at the cursor to the pool as a labeled support. */
  async acceptFromCommitted(): Promise<void> {
    const mask = this.committedMasks.get(this.cursor);
    if (!mask || maskArea(mask) === 0) {
      throw new Error("commit a nonempty mask before adding it to the pool");
    }
    const { w, h } = this.dims();
    await this.api.addToPool(this.volume!.volume_id, this.cursor, mask, h, w);
    await this.refreshPool();
  }

  // -- segmentation / propagation review ------------------------------------

  async segmentCursorSlice(n: number, qc: boolean): Promise<ReviewItem> {
    const res = await this.api.segment(this.volume!.volume_id, this.cursor, n, qc);
    if (res.note) this.lastNotice = res.note;
    const item: ReviewItem = {
      sliceIndex: this.cursor,
      mask: res.mask,
      qcPassed: res.qc_passed,
      fgConfidence: res.fg_confidence,
      status: "pending",
    };
    this.enqueueReview(item);
    return item;
  }

  async propagateVolume(n: number, qc: boolean): Promise<void> {
    if (this.propagationInFlight) throw new Error("a propagation is already running");
    this.propagationInFlight = true;
    try {
      await this.api.propagate(this.volume!.volume_id, n, qc);
      // results are server-side stored masks; pull each slice for review
      for (let z = 0; z < this.volume!.depth; z++) {
        const got = await this.api.fetchMask(this.volume!.volume_id, z);
        this.enqueueReview({
          sliceIndex: z,
          mask: got.data,
          qcPassed: true,        // per-slice QC verdicts surface via /segment
          fgConfidence: NaN,
          status: "pending",
        });
      }
      await this.refreshPool();
    } finally {
      this.propagationInFlight = false;
    }
  }

  private enqueueReview(item: ReviewItem): void {
    this.reviewQueue = this.reviewQueue
      .filter((r) => r.sliceIndex !== item.sliceIndex)
      .concat(item)
      .sort((a, b) => a.sliceIndex - b.sliceIndex);   // QC failures stay visible
  }

  /** Accept adds the reviewed mask to the pool; resolves after server ack. */
  async acceptReview(sliceIndex: number): Promise<void> {
    const item = this.reviewQueue.find((r) => r.sliceIndex === sliceIndex);
    if (!item || item.status !== "pending") throw new Error("no pending review here");
    const { w, h } = this.dims();
    await this.api.addToPool(this.volume!.volume_id, sliceIndex, item.mask, h, w);
    item.status = "accepted";
    await this.refreshPool();                          // server is authoritative
  }

  /** Reject discards the prediction; the pool is untouched. */
  rejectReview(sliceIndex: number): void {
    const item = this.reviewQueue.find((r) => r.sliceIndex === sliceIndex);
    if (!item || item.status !== "pending") throw new Error("no pending review here");
    item.status = "rejected";
  }

  /** Correct loads the prediction into the brush layer for editing. */
  correctReview(sliceIndex: number): void {
    const item = this.reviewQueue.find((r) => r.sliceIndex === sliceIndex);
    if (!item || item.status !== "pending") throw new Error("no pending review here");
    item.status = "correcting";
    this.cursor = sliceIndex;
    this.pendingEdits.set(sliceIndex, item.mask.slice());
  }
}
