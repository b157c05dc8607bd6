/** Browser bootstrap: wires the session state to DOM controls and canvases. */

import { ApiClient } from "./api.js";
import { SessionState } from "./state.js";
import { PROVENANCE_COLORS, displayToRaster, overlayMask, sliceToImageData } from "./render.js";

const SCALE = 6;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function redraw(state: SessionState, ctx: CanvasRenderingContext2D,
                      api: ApiClient): Promise<void> {
  if (!state.volume) return;
  const vol = state.volume;
  const slice = await api.fetchSlice(vol.volume_id, state.cursor);
  let img = sliceToImageData(slice.data, vol.width, vol.height);
  if (state.overlayVisible) {
    const pending = state.pendingEdits.get(state.cursor);
    const review = state.reviewQueue.find(
      (r) => r.sliceIndex === state.cursor && r.status === "pending");
    if (pending) {
      img = overlayMask(img, pending, PROVENANCE_COLORS.editing, state.overlayOpacity);
    } else if (review) {
      img = overlayMask(img, review.mask, PROVENANCE_COLORS.predicted, state.overlayOpacity);
    } else {
      const mask = await api.fetchMask(vol.volume_id, state.cursor);
      if (mask.source === "stored") {
        img = overlayMask(img, mask.data, PROVENANCE_COLORS.predicted, state.overlayOpacity);
      }
    }
  }
  const off = new OffscreenCanvas(vol.width, vol.height);
  off.getContext("2d")!.putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.drawImage(off, 0, 0, vol.width * SCALE, vol.height * SCALE);
  el<HTMLSpanElement>("status").textContent =
    `${vol.volume_id} slice ${state.cursor + 1}/${vol.depth}` +
    (state.lastNotice ? ` — ${state.lastNotice}` : "");
}

function renderPoolPanel(state: SessionState): void {
  const list = el<HTMLUListElement>("pool");
  list.innerHTML = "";
  for (const e of state.poolEntries) {
    const li = document.createElement("li");
    li.textContent =
      `#${e.ordinal} ${e.volume_id}:${e.slice_index} (${e.provenance}, area ${e.fg_area})`;
    li.className = e.provenance;
    list.appendChild(li);
  }
  el<HTMLSpanElement>("pool-version").textContent = `v${state.poolVersion}`;
}

async function boot(): Promise<void> {
  const api = new ApiClient("");
  const state = new SessionState(api);
  await state.bootstrap();

  const canvas = el<HTMLCanvasElement>("viewport");
  canvas.width = state.volume!.width * SCALE;
  canvas.height = state.volume!.height * SCALE;
  const ctx = canvas.getContext("2d")!;

  const refresh = () => redraw(state, ctx, api).then(() => renderPoolPanel(state));

  el<HTMLButtonElement>("prev").onclick = () => { state.setCursor(state.cursor - 1); refresh(); };
  el<HTMLButtonElement>("next").onclick = () => { state.setCursor(state.cursor + 1); refresh(); };
  el<HTMLButtonElement>("overlay").onclick = () => { state.toggleOverlay(); refresh(); };
  el<HTMLInputElement>("brush-size").oninput = (ev) => {
    state.brushRadius = Number((ev.target as HTMLInputElement).value);
  };
  el<HTMLSelectElement>("brush-mode").onchange = (ev) => {
    state.brushMode = (ev.target as HTMLSelectElement).value as "paint" | "erase";
  };

  let stroking = false;
  let points: Array<{ x: number; y: number }> = [];
  canvas.onpointerdown = async (ev) => {
    await state.editableMask();
    stroking = true;
    points = [displayToRaster(ev.offsetX, ev.offsetY, SCALE)];
  };
  canvas.onpointermove = (ev) => {
    if (!stroking) return;
    points.push(displayToRaster(ev.offsetX, ev.offsetY, SCALE));
  };
  canvas.onpointerup = () => {
    if (!stroking) return;
    stroking = false;
    state.applyBrush({ points, radius: state.brushRadius, mode: state.brushMode });
    points = [];
    refresh();
  };

  el<HTMLButtonElement>("commit").onclick = async () => {
    if (!state.canCommit()) {
      state.lastNotice = "empty masks cannot be committed";
      return refresh();
    }
    try {
      await state.commitMask();
      state.lastNotice = "mask committed (echo verified)";
    } catch (err) {
      state.lastNotice = `commit failed, edits kept: ${err}`;
    }
    refresh();
  };
  el<HTMLButtonElement>("to-pool").onclick = async () => {
    try {
      await state.acceptFromCommitted();
      state.lastNotice = "labeled slice added to pool";
    } catch (err) {
      state.lastNotice = String(err);
    }
    refresh();
  };
  el<HTMLButtonElement>("segment").onclick = async () => {
    const n = Number(el<HTMLInputElement>("shots").value);
    await state.segmentCursorSlice(n, true);
    refresh();
  };
  el<HTMLButtonElement>("propagate").onclick = async () => {
    const n = Number(el<HTMLInputElement>("shots").value);
    await state.propagateVolume(n, true);
    refresh();
  };
  el<HTMLButtonElement>("accept").onclick = async () => {
    await state.acceptReview(state.cursor);
    refresh();
  };
  el<HTMLButtonElement>("reject").onclick = () => {
    state.rejectReview(state.cursor);
    refresh();
  };
  el<HTMLButtonElement>("correct").onclick = () => {
    state.correctReview(state.cursor);
    refresh();
  };

  await refresh();
}

boot().catch((err) => {
  const banner = document.getElementById("error-banner");
  if (banner) {
    banner.textContent = String(err);
    banner.style.display = "block";
  }
});
