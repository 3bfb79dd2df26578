/**
 * Live-service loop, driven through the exact modules the page uses
 * (api.ts, rle.ts, state.ts, overlay.ts): load image -> retrieval strip in
 * rank order -> segmentation overlays -> accept increments accepted_count and
 * the same image re-retrieves itself at rank 1. Spawns the annotation service
 * with the transfer engine on synthetic data.
 */

import { spawn, spawnSync } from "node:child_process";
import type { ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { WorkbenchApi } from "../src/api";
import { colorForClass, compositeOverlays } from "../src/overlay";
import { decodeRle, encodeRle, foregroundCount } from "../src/rle";
import { activeMask, initialState, reduce } from "../src/state";
import type { WorkbenchState } from "../src/state";

const PORT = 8841;
const PYTHON = process.env.RAMSEG_PYTHON ?? "python3";

let server: ChildProcess | null = null;
let queryB64 = "";
const api = new WorkbenchApi(`http://127.0.0.1:${PORT}`);

function synth(out: string, n: number, seed: number): void {
  const result = spawnSync(
    PYTHON,
    ["-m", "ramseg.cli", "synth", "--out", out, "--n", String(n), "--seed", String(seed), "--size", "64"],
    { encoding: "utf-8" },
  );
  if (result.status !== 0) throw new Error(`synth failed: ${result.stderr}`);
}

async function waitForHealth(): Promise<void> {
  for (let attempt = 0; attempt < 100; attempt++) {
    try {
      await api.health();
      return;
    } catch {
      await new Promise((resolve) => setTimeout(resolve, 200));
    }
  }
  throw new Error("service did not come up");
}

beforeAll(async () => {
  const root = mkdtempSync(join(tmpdir(), "workbench-it-"));
  synth(join(root, "db"), 20, 5);
  synth(join(root, "queries"), 2, 99);
  queryB64 = readFileSync(join(root, "queries", "images", "syn00_000.png")).toString("base64");

  server = spawn(
    PYTHON,
    [
      "-m", "ramseg.cli", "serve",
      "--samples", join(root, "db"),
      "--engine", "transfer",
      "--backbone", "test:0",
      "--k", "5",
      "--port", String(PORT),
      "--embed-resolution", "112",
      "--seg-resolution", "128",
    ],
    { stdio: "ignore" },
  );
  await waitForHealth();
}, 60_000);

afterAll(() => {
  server?.kill();
});

describe("workbench loop against a live service", () => {
  let state: WorkbenchState;
  let correctedDisc: Uint8Array;

  it("loads an image and renders the strip in rank order", async () => {
    state = initialState(5);
    state = reduce(state, {
      type: "image-loaded",
      image: { b64: queryB64, width: 64, height: 64, name: "syn00_000.png" },
    });
    const hits = await api.retrieve(state.image!.b64, null, state.k);
    state = reduce(state, { type: "hits", hits });
    expect(state.hits).toHaveLength(5);
    expect(state.hits.map((h) => h.rank)).toEqual([1, 2, 3, 4, 5]);
    const distances = state.hits.map((h) => h.distance);
    expect([...distances].sort((a, b) => a - b)).toEqual(distances);
    expect(state.hits[0].thumbnail_url).toMatch(/\/api\/samples\/.+\/image/);
  }, 30_000);

  it("segments and decodes overlays whose checksums match the server", async () => {
    state = reduce(state, { type: "segment-started" });
    const response = await api.segment(state.image!.b64, state.k, null, "embedding");
    const decoded: Record<string, Uint8Array> = {};
    for (const [name, rle] of Object.entries(response.masks)) {
      decoded[name] = decodeRle(rle); // throws if the checksum field disagrees
      expect(foregroundCount(decoded[name])).toBe(rle.foreground_pixels);
    }
    state = reduce(state, { type: "segmented", response, decoded });
    expect(state.pendingSegment).toBe(false);
    expect(Object.keys(state.prediction!.masks).sort()).toEqual(["box", "disc"]);
    expect(state.prediction!.exemplar_ids.disc).toHaveLength(5);

    // overlays render: composited buffer differs from the base exactly where masks are set
    const base = new Uint8ClampedArray(64 * 64 * 4).fill(60);
    const layers = Object.keys(decoded).map((name, i) => ({
      mask: decoded[name],
      color: colorForClass(i),
    }));
    const out = compositeOverlays(base, 64, 64, layers);
    const fg = Object.values(decoded).reduce((acc, m) => acc + foregroundCount(m), 0);
    expect(fg).toBeGreaterThan(0);
    let changed = 0;
    for (let i = 0; i < 64 * 64; i++) if (out[i * 4] !== 60) changed++;
    expect(changed).toBeGreaterThan(0);
  }, 30_000);

  it("accepts a brushed correction, bumping accepted_count and index version", async () => {
    const before = await api.stats();
    state = reduce(state, { type: "stats", stats: before });
    expect(before.accepted_count).toBe(0);

    state = reduce(state, { type: "stroke", className: "disc", cx: 3, cy: 3, radius: 2, value: 1 });
    expect(state.dirty).toBe(true);
    correctedDisc = new Uint8Array(activeMask(state, "disc")!);

    const masks: Record<string, ReturnType<typeof encodeRle>> = {};
    for (const name of Object.keys(state.prediction!.masks)) {
      const rle = encodeRle(activeMask(state, name)!, 64, 64);
      rle.label = state.prediction!.masks[name].label;
      masks[name] = rle;
    }
    const accepted = await api.accept(state.image!.b64, masks, "ui-fix-1");
    state = reduce(state, { type: "accepted", id: accepted.id, indexVersion: accepted.index_version });
    expect(accepted.index_version).toBe(before.version + 1);

    const after = await api.stats();
    state = reduce(state, { type: "stats", stats: after });
    expect(after.accepted_count).toBe(before.accepted_count + 1);
    expect(after.count).toBe(before.count + 1);
  }, 30_000);

  it("re-retrieves the same image at rank 1 with distance 0", async () => {
    const hits = await api.retrieve(state.image!.b64, null, 3);
    state = reduce(state, { type: "hits", hits });
    expect(state.hits[0].id).toBe("ui-fix-1");
    expect(state.hits[0].distance).toBe(0);

    // and segmenting with k=1 returns exactly the corrected mask
    const seg = await api.segment(state.image!.b64, 1, ["disc"], "embedding");
    expect(decodeRle(seg.masks.disc)).toEqual(correctedDisc);
  }, 30_000);
});
