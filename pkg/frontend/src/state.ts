/**
 * Workbench state container: a pure reducer over API responses and local
 * edit actions. Predictions from the server are never mutated; brush strokes
 * copy the touched class mask into an edit buffer, and cancel simply drops
 * the buffer. Replaying the same actions always reproduces the same view.
 */

import type { IndexStats, RetrievalHit, SegmentResponse } from "./api";
import { applyBrush } from "./overlay";

export interface LoadedImage {
  b64: string;
  width: number;
  height: number;
  name: string;
}

export interface WorkbenchState {
  image: LoadedImage | null;
  k: number;
  strategy: string;
  selectedClasses: string[];
  hits: RetrievalHit[];
  prediction: SegmentResponse | null;
  decoded: Record<string, Uint8Array>;
  editBuffer: Record<string, Uint8Array>;
  dirty: boolean;
  stats: IndexStats | null;
  pendingSegment: boolean;
  hoveredExemplar: string | null;
  visibleClasses: Record<string, boolean>;
  toast: string | null;
}

export type Action =
  | { type: "image-loaded"; image: LoadedImage }
  | { type: "k-changed"; k: number }
  | { type: "strategy-changed"; strategy: string }
  | { type: "classes-changed"; classes: string[] }
  | { type: "hits"; hits: RetrievalHit[] }
  | { type: "segment-started" }
  | { type: "segmented"; response: SegmentResponse; decoded: Record<string, Uint8Array> }
  | { type: "segment-failed" }
  | {
      type: "stroke";
      className: string;
      cx: number;
      cy: number;
      radius: number;
      value: 0 | 1;
    }
  | { type: "cancel-edits" }
  | { type: "accepted"; id: string; indexVersion: number }
  | { type: "stats"; stats: IndexStats }
  | { type: "hover-exemplar"; id: string | null }
  | { type: "toggle-class-visibility"; className: string }
  | { type: "toast"; message: string | null };

export function initialState(k = 16): WorkbenchState {
  return {
    image: null,
    k,
    strategy: "embedding",
    selectedClasses: [],
    hits: [],
    prediction: null,
    decoded: {},
    editBuffer: {},
    dirty: false,
    stats: null,
    pendingSegment: false,
    hoveredExemplar: null,
    visibleClasses: {},
    toast: null,
  };
}

/** The mask the canvas should show: edited copy when present, else prediction. */
export function activeMask(state: WorkbenchState, className: string): Uint8Array | null {
  return state.editBuffer[className] ?? state.decoded[className] ?? null;
}

export function reduce(state: WorkbenchState, action: Action): WorkbenchState {
  switch (action.type) {
    case "image-loaded":
      return {
        ...state,
        image: action.image,
        hits: [],
        prediction: null,
        decoded: {},
        editBuffer: {},
        dirty: false,
        hoveredExemplar: null,
        toast: null,
      };
    case "k-changed":
      return { ...state, k: Math.max(1, Math.floor(action.k)) };
    case "strategy-changed":
      return { ...state, strategy: action.strategy };
    case "classes-changed":
      return { ...state, selectedClasses: [...action.classes] };
    case "hits":
      return { ...state, hits: [...action.hits].sort((a, b) => a.rank - b.rank) };
    case "segment-started":
      return { ...state, pendingSegment: true };
    case "segment-failed":
      return { ...state, pendingSegment: false };
    case "segmented": {
      const visibleClasses: Record<string, boolean> = {};
      for (const name of Object.keys(action.response.masks)) visibleClasses[name] = true;
      return {
        ...state,
        pendingSegment: false,
        prediction: action.response,
        decoded: action.decoded,
        editBuffer: {},
        dirty: false,
        visibleClasses,
      };
    }
    case "stroke": {
      if (!state.image) return state;
      const source = state.editBuffer[action.className] ?? state.decoded[action.className];
      if (!source) return state;
      const { width, height } = state.image;
      const editBuffer = { ...state.editBuffer };
      const copy = new Uint8Array(source); // never touch the prediction
      applyBrush(copy, width, height, action.cx, action.cy, action.radius, action.value);
      editBuffer[action.className] = copy;
      if (action.value === 1) {
        // one label per pixel: painting a class claims the pixels from the others
        for (const other of Object.keys(state.decoded)) {
          if (other === action.className) continue;
          const otherCopy = new Uint8Array(editBuffer[other] ?? state.decoded[other]);
          applyBrush(otherCopy, width, height, action.cx, action.cy, action.radius, 0);
          editBuffer[other] = otherCopy;
        }
      }
      return { ...state, editBuffer, dirty: true };
    }
    case "cancel-edits":
      return { ...state, editBuffer: {}, dirty: false };
    case "accepted":
      return { ...state, editBuffer: {}, dirty: false };
    case "stats":
      return { ...state, stats: action.stats };
    case "hover-exemplar":
      return { ...state, hoveredExemplar: action.id };
    case "toggle-class-visibility":
      return {
        ...state,
        visibleClasses: {
          ...state.visibleClasses,
          [action.className]: !state.visibleClasses[action.className],
        },
      };
    case "toast":
      return { ...state, toast: action.message };
    default:
      return state;
  }
}
