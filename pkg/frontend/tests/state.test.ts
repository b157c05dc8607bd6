import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { masksEqual } from "../src/codec.js";
import { SessionState } from "../src/state.js";
import { FakeAnnotationServer } from "./fake_server.js";

let server: FakeAnnotationServer;
let api: ApiClient;
let state: SessionState;

beforeEach(async () => {
  server = new FakeAnnotationServer();
  server.addVolume("vol-a", 4, 8, 8);
  server.addVolume("vol-b", 3, 8, 8);
  api = new ApiClient("", server.fetchFn);
  state = new SessionState(api);
  await state.bootstrap();
});

function paintSomething() {
  state.applyBrush({ points: [{ x: 4, y: 4 }], radius: 2, mode: "paint" });
}

describe("slice cursor", () => {
  it("clamps out-of-range indices with a notice", () => {
    expect(state.setCursor(2)).toEqual({ index: 2, clamped: false });
    expect(state.setCursor(99)).toEqual({ index: 3, clamped: true });
    expect(state.lastNotice).toMatch(/clamped/);
    expect(state.setCursor(-5)).toEqual({ index: 0, clamped: true });
  });
});

describe("mask editing and commit", () => {
  it("commit round trip is bit-exact and clears pending edits", async () => {
    state.setCursor(1);
    await state.editableMask();
    paintSomething();
    const local = state.pendingEdits.get(1)!.slice();
    await state.commitMask();
    expect(state.pendingEdits.has(1)).toBe(false);
    const fetched = await api.fetchMask("vol-a", 1);
    expect(fetched.source).toBe("stored");
    expect(masksEqual(fetched.data, local)).toBe(true);
  });

  it("rejected commits keep local edits", async () => {
    await state.editableMask();
    paintSomething();
    const before = state.pendingEdits.get(0)!.slice();
    server.rejectCommits = true;
    await expect(state.commitMask()).rejects.toThrow();
    expect(state.pendingEdits.has(0)).toBe(true);
    expect(masksEqual(state.pendingEdits.get(0)!, before)).toBe(true);
  });

  it("empty commits are disabled", async () => {
    await state.editableMask();
    expect(state.canCommit()).toBe(false);
    await expect(state.commitMask()).rejects.toThrow(/nothing to commit/);
    paintSomething();
    expect(state.canCommit()).toBe(true);
  });

  it("paint then erase over the same pixels restores the blank mask", async () => {
    await state.editableMask();
    const stroke = { points: [{ x: 3, y: 3 }, { x: 6, y: 5 }], radius: 2 };
    state.applyBrush({ ...stroke, mode: "paint" });
    state.applyBrush({ ...stroke, mode: "erase" });
    expect(state.canCommit()).toBe(false);   // back to empty
  });
});

describe("pool interactions", () => {
  async function reviewSlice(z: number) {
    state.setCursor(z);
    await state.editableMask();
    paintSomething();
    await state.commitMask();
    return state.segmentCursorSlice(1, true);
  }

  it("accept grows the pool by exactly one", async () => {
    await state.editableMask();
    paintSomething();
    state.pendingEdits.get(0)![0] = 1;
    await state.commitMask();                      // seed so /segment works
    await state.acceptFromCommitted();
    const before = state.poolSize;
    await reviewSlice(2);
    await state.acceptReview(2);
    expect(state.poolSize).toBe(before + 1);
  });

  it("reject leaves the pool unchanged", async () => {
    await state.editableMask();
    paintSomething();
    await state.commitMask();
    await state.acceptFromCommitted();
    const before = state.poolSize;
    await reviewSlice(2);
    state.rejectReview(2);
    expect(state.poolSize).toBe(before);
    const item = state.reviewQueue.find((r) => r.sliceIndex === 2)!;
    expect(item.status).toBe("rejected");
  });

  it("correct opens the brush on the reviewed mask", async () => {
    await state.editableMask();
    paintSomething();
    await state.commitMask();
    await state.acceptFromCommitted();
    const item = await reviewSlice(1);
    state.correctReview(1);
    expect(state.cursor).toBe(1);
    expect(masksEqual(state.pendingEdits.get(1)!, item.mask)).toBe(true);
  });

  it("pool panel after reload equals the server listing", async () => {
    await state.editableMask();
    paintSomething();
    await state.commitMask();
    await state.acceptFromCommitted();
    await reviewSlice(2);
    await state.acceptReview(2);

    const fresh = new SessionState(api);          // simulated page reload
    await fresh.bootstrap();
    const serverListing = await api.poolListing();
    expect(fresh.poolEntries).toEqual(serverListing.entries);
    expect(fresh.poolVersion).toBe(serverListing.pool_version);
    expect(fresh.poolEntries.length).toBe(state.poolEntries.length);
  });

  it("no silent pool writes: editing and committing do not touch the pool", async () => {
    const before = state.poolSize;
    await state.editableMask();
    paintSomething();
    await state.commitMask();
    await state.refreshPool();
    expect(state.poolSize).toBe(before);
  });
});

describe("propagation review", () => {
  beforeEach(async () => {
    await state.editableMask();
    paintSomething();
    await state.commitMask();
    await state.acceptFromCommitted();
  });

  it("review queue is ordered by slice and keeps QC failures visible", async () => {
    state.setCursor(3);
    await state.segmentCursorSlice(1, true);      // qc fails on odd slices
    state.setCursor(2);
    await state.segmentCursorSlice(1, true);
    expect(state.reviewQueue.map((r) => r.sliceIndex)).toEqual([2, 3]);
    const flagged = state.reviewQueue.find((r) => r.sliceIndex === 3)!;
    expect(flagged.qcPassed).toBe(false);         // flagged, not hidden
  });

  it("only one propagation may be in flight", async () => {
    const p = state.propagateVolume(1, true);
    await expect(state.propagateVolume(1, true)).rejects.toThrow(/already running/);
    await p;
  });

  it("propagation fills the review queue for every slice", async () => {
    await state.propagateVolume(1, true);
    expect(state.reviewQueue.map((r) => r.sliceIndex)).toEqual([0, 1, 2, 3]);
  });

  it("n larger than the pool surfaces the server's note", async () => {
    await state.segmentCursorSlice(9, true);
    expect(state.lastNotice).toMatch(/exceeds pool size/);
  });
});
