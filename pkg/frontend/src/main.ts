/**
 * Workbench wiring: connects the pure state reducer to the DOM.
 *
 * The page speaks only the JSON API. One segment request is in flight at a
 * time (controls disable while pending), retrieval previews are debounced,
 * and mask edits happen on an offscreen copy at native resolution; zoom is
 * display-only.
 */

import { ApiError, WorkbenchApi } from "./api";
import { colorForClass, compositeOverlays } from "./overlay";
import { decodeRle, encodeRle, foregroundCount } from "./rle";
import type { RleMask } from "./rle";
import { activeMask, initialState, reduce } from "./state";
import type { Action, WorkbenchState } from "./state";

const api = new WorkbenchApi("");
let state: WorkbenchState = initialState(16);

const $ = <T extends HTMLElement>(id: string): T => document.getElementById(id) as T;

const fileInput = $<HTMLInputElement>("file-input");
const kSlider = $<HTMLInputElement>("k-slider");
const kValue = $<HTMLSpanElement>("k-value");
const strategySelect = $<HTMLSelectElement>("strategy-select");
const segmentButton = $<HTMLButtonElement>("segment-button");
const acceptButton = $<HTMLButtonElement>("accept-button");
const cancelButton = $<HTMLButtonElement>("cancel-button");
const proposedIdInput = $<HTMLInputElement>("proposed-id");
const brushSize = $<HTMLInputElement>("brush-size");
const brushMode = $<HTMLSelectElement>("brush-mode");
const brushClass = $<HTMLSelectElement>("brush-class");
const zoomSlider = $<HTMLInputElement>("zoom-slider");
const strip = $<HTMLDivElement>("retrieval-strip");
const provenancePanel = $<HTMLDivElement>("provenance-panel");
const timingsPanel = $<HTMLDivElement>("timings-panel");
const classToggles = $<HTMLDivElement>("class-toggles");
const statsBadge = $<HTMLSpanElement>("stats-badge");
const healthBadge = $<HTMLSpanElement>("health-badge");
const toastBox = $<HTMLDivElement>("toast");
const canvas = $<HTMLCanvasElement>("image-canvas");
const ctx = canvas.getContext("2d")!;

let baseImageData: ImageData | null = null;

function dispatch(action: Action): void {
  state = reduce(state, action);
  render();
}

function debounce<A extends unknown[]>(fn: (...args: A) => void, ms: number) {
  let handle: ReturnType<typeof setTimeout> | undefined;
  return (...args: A) => {
    clearTimeout(handle);
    handle = setTimeout(() => fn(...args), ms);
  };
}

function toast(message: string): void {
  dispatch({ type: "toast", message });
  setTimeout(() => dispatch({ type: "toast", message: null }), 4000);
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    if (err.code === "EMPTY_INDEX") {
      return "The retrieval index is empty. Build one first: restart the service with --manifest, or POST /api/index/build.";
    }
    if (err.code === "DUPLICATE_ID") {
      return "That sample id already exists; pick another proposed id.";
    }
    return `${err.code}: ${err.message}`;
  }
  return String(err);
}

async function refreshStats(): Promise<void> {
  try {
    dispatch({ type: "stats", stats: await api.stats() });
  } catch (err) {
    toast(describeError(err));
  }
}

async function refreshStrip(): Promise<void> {
  if (!state.image) return;
  try {
    const hits = await api.retrieve(state.image.b64, null, state.k);
    dispatch({ type: "hits", hits });
  } catch (err) {
    toast(describeError(err));
  }
}

const refreshStripDebounced = debounce(() => void refreshStrip(), 250);

async function loadImageFile(file: File): Promise<void> {
  const buf = new Uint8Array(await file.arrayBuffer());
  let binary = "";
  for (const byte of buf) binary += String.fromCharCode(byte);
  const b64 = btoa(binary);
  const url = URL.createObjectURL(file);
  const img = new Image();
  await new Promise<void>((resolve, reject) => {
    img.onload = () => resolve();
    img.onerror = () => reject(new Error("cannot decode raster"));
    img.src = url;
  });
  canvas.width = img.naturalWidth;
  canvas.height = img.naturalHeight;
  ctx.drawImage(img, 0, 0);
  baseImageData = ctx.getImageData(0, 0, canvas.width, canvas.height);
  URL.revokeObjectURL(url);
  dispatch({
    type: "image-loaded",
    image: { b64, width: img.naturalWidth, height: img.naturalHeight, name: file.name },
  });
  await refreshStrip();
}

async function runSegmentation(): Promise<void> {
  if (!state.image || state.pendingSegment) return;
  dispatch({ type: "segment-started" });
  try {
    const classes = state.selectedClasses.length ? state.selectedClasses : null;
    const response = await api.segment(state.image.b64, state.k, classes, state.strategy);
    const decoded: Record<string, Uint8Array> = {};
    for (const [name, rle] of Object.entries(response.masks)) {
      const mask = decodeRle(rle); // throws on checksum mismatch
      decoded[name] = mask;
    }
    dispatch({ type: "segmented", response, decoded });
  } catch (err) {
    dispatch({ type: "segment-failed" });
    toast(describeError(err));
  }
}

async function acceptCorrection(): Promise<void> {
  if (!state.image || !state.prediction) return;
  const proposedId = proposedIdInput.value.trim() || `accepted-${Date.now()}`;
  const masks: Record<string, RleMask> = {};
  for (const name of Object.keys(state.prediction.masks)) {
    const mask = activeMask(state, name);
    if (!mask) continue;
    const rle = encodeRle(mask, state.image.height, state.image.width);
    rle.label = state.prediction.masks[name].label;
    masks[name] = rle;
  }
  try {
    const out = await api.accept(state.image.b64, masks, proposedId);
    dispatch({ type: "accepted", id: out.id, indexVersion: out.index_version });
    toast(`accepted ${out.id} (index v${out.index_version})`);
    await refreshStats();
    await refreshStrip();
  } catch (err) {
    toast(describeError(err));
  }
}

// --- rendering ---------------------------------------------------------------

function renderCanvas(): void {
  if (!baseImageData || !state.image) return;
  const { width, height } = state.image;
  const layers = Object.keys(state.decoded)
    .filter((name) => state.visibleClasses[name])
    .map((name, i) => ({ mask: activeMask(state, name)!, color: colorForClass(i) }));
  const blended = compositeOverlays(baseImageData.data, width, height, layers);
  ctx.putImageData(new ImageData(blended, width, height), 0, 0);
  canvas.style.width = `${width * Number(zoomSlider.value)}px`;
}

function renderStrip(): void {
  strip.replaceChildren();
  if (!state.hits.length) {
    strip.textContent = state.image ? "no retrieval results yet" : "load an image to preview retrieval";
    return;
  }
  for (const hit of state.hits) {
    const cell = document.createElement("figure");
    cell.className = "strip-item" + (state.hoveredExemplar === hit.id ? " highlighted" : "");
    cell.dataset.id = hit.id;
    const img = document.createElement("img");
    img.src = hit.thumbnail_url;
    img.alt = hit.id;
    const mask = document.createElement("img");
    mask.src = hit.mask_url;
    mask.alt = `${hit.id} mask`;
    mask.className = "mask-thumb";
    const pair = document.createElement("div");
    pair.className = "thumb-pair";
    pair.append(img, mask);
    const cap = document.createElement("figcaption");
    cap.textContent = `#${hit.rank} ${hit.id} (d=${hit.distance.toFixed(4)})`;
    cell.append(pair, cap);
    strip.append(cell);
  }
}

function renderProvenance(): void {
  provenancePanel.replaceChildren();
  if (!state.prediction) return;
  for (const [name, ids] of Object.entries(state.prediction.exemplar_ids)) {
    const block = document.createElement("div");
    const head = document.createElement("strong");
    head.textContent = name;
    block.append(head);
    const list = document.createElement("ul");
    for (const id of ids) {
      const item = document.createElement("li");
      item.textContent = id;
      item.addEventListener("mouseenter", () => dispatch({ type: "hover-exemplar", id }));
      item.addEventListener("mouseleave", () => dispatch({ type: "hover-exemplar", id: null }));
      list.append(item);
    }
    block.append(list);
    provenancePanel.append(block);
  }
}

function renderTimings(): void {
  if (!state.prediction) {
    timingsPanel.textContent = "";
    return;
  }
  timingsPanel.textContent = Object.entries(state.prediction.timings_ms)
    .map(([stage, ms]) => `${stage.replace("_ms", "")}: ${ms.toFixed(1)} ms`)
    .join("  |  ");
}

function renderClassControls(): void {
  classToggles.replaceChildren();
  brushClass.replaceChildren();
  for (const name of Object.keys(state.decoded)) {
    const label = document.createElement("label");
    const box = document.createElement("input");
    box.type = "checkbox";
    box.checked = !!state.visibleClasses[name];
    box.addEventListener("change", () => dispatch({ type: "toggle-class-visibility", className: name }));
    label.append(box, document.createTextNode(` ${name} (${foregroundCount(activeMask(state, name)!)} px)`));
    classToggles.append(label);
    const option = document.createElement("option");
    option.value = name;
    option.textContent = name;
    brushClass.append(option);
  }
}

function render(): void {
  kValue.textContent = String(state.k);
  segmentButton.disabled = !state.image || state.pendingSegment;
  acceptButton.disabled = !state.prediction || state.pendingSegment;
  cancelButton.disabled = !state.dirty;
  kSlider.disabled = state.pendingSegment;
  strategySelect.disabled = state.pendingSegment;
  statsBadge.textContent = state.stats
    ? `index: ${state.stats.count} samples (v${state.stats.version}, ${state.stats.accepted_count} accepted)`
    : "index: ?";
  toastBox.textContent = state.toast ?? "";
  toastBox.classList.toggle("visible", state.toast !== null);
  renderStrip();
  renderProvenance();
  renderTimings();
  renderClassControls();
  renderCanvas();
}

// --- events ----------------------------------------------------------------------

fileInput.addEventListener("change", () => {
  const file = fileInput.files?.[0];
  if (file) void loadImageFile(file).catch((err) => toast(describeError(err)));
});

kSlider.addEventListener("input", () => {
  dispatch({ type: "k-changed", k: Number(kSlider.value) });
  refreshStripDebounced();
});

strategySelect.addEventListener("change", () =>
  dispatch({ type: "strategy-changed", strategy: strategySelect.value }),
);

segmentButton.addEventListener("click", () => void runSegmentation());
acceptButton.addEventListener("click", () => void acceptCorrection());
cancelButton.addEventListener("click", () => dispatch({ type: "cancel-edits" }));

let painting = false;

function canvasPos(event: MouseEvent): { x: number; y: number } {
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) / rect.width) * canvas.width,
    y: ((event.clientY - rect.top) / rect.height) * canvas.height,
  };
}

function paint(event: MouseEvent): void {
  const className = brushClass.value;
  if (!className || !state.decoded[className]) return;
  const { x, y } = canvasPos(event);
  dispatch({
    type: "stroke",
    className,
    cx: x,
    cy: y,
    radius: Number(brushSize.value),
    value: brushMode.value === "erase" ? 0 : 1,
  });
}

canvas.addEventListener("mousedown", (event) => {
  painting = true;
  paint(event);
});
canvas.addEventListener("mousemove", (event) => {
  if (painting) paint(event);
});
window.addEventListener("mouseup", () => {
  painting = false;
});
zoomSlider.addEventListener("input", () => renderCanvas());

void (async () => {
  try {
    const health = await api.health();
    healthBadge.textContent = `${health.engine}${health.checkpoint_loaded ? "" : " (no checkpoint)"}`;
  } catch {
    healthBadge.textContent = "service unreachable";
  }
  await refreshStats();
  render();
})();
