import { describe, expect, it } from "vitest";

import type { RetrievalHit, SegmentResponse } from "../src/api";
import { activeMask, initialState, reduce } from "../src/state";
import type { Action, WorkbenchState } from "../src/state";

const image = { b64: "cGl4ZWxz", width: 8, height: 8, name: "q.png" };

function hit(id: string, rank: number, distance: number): RetrievalHit {
  return {
    id,
    rank,
    distance,
    thumbnail_url: `/api/samples/${id}/image`,
    mask_url: `/api/samples/${id}/mask`,
  };
}

function segmented(): Extract<Action, { type: "segmented" }> {
  const response: SegmentResponse = {
    masks: {
      disc: { size: [8, 8], order: "row-major", counts: [0, 4, 60], foreground_pixels: 4, label: 1 },
      box: { size: [8, 8], order: "row-major", counts: [56, 8], foreground_pixels: 8, label: 2 },
    },
    exemplar_ids: { disc: ["a", "b"], box: ["a", "b"] },
    timings_ms: { total_ms: 5 },
    k: 2,
    strategy: "embedding",
    index_version: 0,
  };
  const decoded = { disc: new Uint8Array(64), box: new Uint8Array(64) };
  decoded.disc.fill(1, 0, 4);
  decoded.box.fill(1, 56, 64);
  return { type: "segmented", response, decoded };
}

function loadAndSegment(): WorkbenchState {
  let state = initialState(4);
  state = reduce(state, { type: "image-loaded", image });
  state = reduce(state, segmented());
  return state;
}

describe("workbench reducer", () => {
  it("orders the retrieval strip by rank regardless of arrival order", () => {
    let state = initialState();
    state = reduce(state, {
      type: "hits",
      hits: [hit("c", 3, 0.3), hit("a", 1, 0.0), hit("b", 2, 0.1)],
    });
    expect(state.hits.map((h) => h.id)).toEqual(["a", "b", "c"]);
  });

  it("keeps the prediction untouched while strokes edit a copy", () => {
    let state = loadAndSegment();
    const before = new Uint8Array(state.decoded.disc);
    state = reduce(state, { type: "stroke", className: "disc", cx: 6, cy: 6, radius: 1, value: 1 });
    expect(state.dirty).toBe(true);
    expect(state.decoded.disc).toEqual(before); // source prediction unchanged
    expect(activeMask(state, "disc")).not.toEqual(before);
  });

  it("restores the prediction on cancel", () => {
    let state = loadAndSegment();
    state = reduce(state, { type: "stroke", className: "disc", cx: 6, cy: 6, radius: 2, value: 1 });
    state = reduce(state, { type: "cancel-edits" });
    expect(state.dirty).toBe(false);
    expect(activeMask(state, "disc")).toEqual(state.decoded.disc);
  });

  it("erase strokes clear pixels in the buffer only", () => {
    let state = loadAndSegment();
    state = reduce(state, { type: "stroke", className: "disc", cx: 1, cy: 0, radius: 2, value: 0 });
    expect(activeMask(state, "disc")!.slice(0, 4).every((v) => v === 0)).toBe(true);
    expect(state.decoded.disc.slice(0, 4).every((v) => v === 1)).toBe(true);
  });

  it("is replayable: the same actions reproduce the same view", () => {
    const actions: Action[] = [
      { type: "image-loaded", image },
      { type: "hits", hits: [hit("b", 2, 0.2), hit("a", 1, 0.0)] },
      segmented(),
      { type: "stroke", className: "disc", cx: 4, cy: 4, radius: 2, value: 1 },
      { type: "k-changed", k: 7 },
    ];
    const run = () => actions.reduce(reduce, initialState());
    const first = run();
    const second = run();
    expect(second).toEqual(first);
  });

  it("accept clears the edit buffer; new image resets prediction state", () => {
    let state = loadAndSegment();
    state = reduce(state, { type: "stroke", className: "disc", cx: 4, cy: 4, radius: 1, value: 1 });
    state = reduce(state, { type: "accepted", id: "fix", indexVersion: 1 });
    expect(state.dirty).toBe(false);
    expect(Object.keys(state.editBuffer)).toHaveLength(0);
    state = reduce(state, { type: "image-loaded", image: { ...image, name: "next.png" } });
    expect(state.prediction).toBeNull();
    expect(state.hits).toHaveLength(0);
  });

  it("painting one class claims pixels from the others, keeping masks disjoint", () => {
    let state = loadAndSegment();
    // paint disc over the box row (y=7)
    state = reduce(state, { type: "stroke", className: "disc", cx: 4, cy: 7, radius: 1.2, value: 1 });
    const disc = activeMask(state, "disc")!;
    const box = activeMask(state, "box")!;
    expect(disc[7 * 8 + 4]).toBe(1);
    expect(box[7 * 8 + 4]).toBe(0); // claimed away from box
    for (let i = 0; i < 64; i++) expect(disc[i] && box[i]).toBeFalsy();
    expect(state.decoded.box[7 * 8 + 4]).toBe(1); // prediction still intact
  });

  it("tracks pending segmentation for single-flight control", () => {
    let state = loadAndSegment();
    state = reduce(state, { type: "segment-started" });
    expect(state.pendingSegment).toBe(true);
    state = reduce(state, { type: "segment-failed" });
    expect(state.pendingSegment).toBe(false);
  });

  it("clamps k to at least 1 and toggles class visibility", () => {
    let state = loadAndSegment();
    state = reduce(state, { type: "k-changed", k: 0 });
    expect(state.k).toBe(1);
    expect(state.visibleClasses.disc).toBe(true);
    state = reduce(state, { type: "toggle-class-visibility", className: "disc" });
    expect(state.visibleClasses.disc).toBe(false);
  });
});
