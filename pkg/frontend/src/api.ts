/** Typed client for the annotation service JSON API. */

import type { RleMask } from "./rle";

export interface RetrievalHit {
  id: string;
  distance: number;
  rank: number;
  thumbnail_url: string;
  mask_url: string;
}

export interface SegmentResponse {
  masks: Record<string, RleMask>;
  exemplar_ids: Record<string, string[]>;
  timings_ms: Record<string, number>;
  k: number;
  strategy: string;
  index_version: number;
}

export interface IndexStats {
  count: number;
  dim: number;
  version: number;
  accepted_count: number;
}

export interface HealthInfo {
  engine: string;
  checkpoint_loaded: boolean;
}

export class ApiError extends Error {
  constructor(
    public code: string,
    message: string,
    public status: number,
  ) {
    super(message);
  }
}

async function parseError(resp: Response): Promise<never> {
  let code = "HTTP_ERROR";
  let message = `${resp.status} ${resp.statusText}`;
  try {
    const body = await resp.json();
    if (body && typeof body === "object") {
      code = body.code ?? code;
      message = body.message ?? JSON.stringify(body);
    }
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new ApiError(code, message, resp.status);
}

export class WorkbenchApi {
  constructor(public baseUrl: string = "") {}

  private async post<T>(path: string, payload: unknown): Promise<T> {
    const resp = await fetch(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    if (!resp.ok) await parseError(resp);
    return (await resp.json()) as T;
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await fetch(this.baseUrl + path);
    if (!resp.ok) await parseError(resp);
    return (await resp.json()) as T;
  }

  retrieve(imageB64: string | null, sampleId: string | null, k: number): Promise<RetrievalHit[]> {
    return this.post("/api/retrieve", { image: imageB64, sample_id: sampleId, k });
  }

  segment(
    imageB64: string,
    k: number,
    classes: string[] | null,
    strategy: string | null,
  ): Promise<SegmentResponse> {
    return this.post("/api/segment", { image: imageB64, k, classes, strategy });
  }

  accept(
    imageB64: string,
    masks: Record<string, RleMask>,
    proposedId: string,
  ): Promise<{ id: string; index_version: number }> {
    return this.post("/api/annotations/accept", {
      image: imageB64,
      masks,
      proposed_id: proposedId,
    });
  }

  buildIndex(manifestPath: string, backbone?: string): Promise<{ count: number; dim: number; version: number }> {
    return this.post("/api/index/build", { manifest_path: manifestPath, backbone });
  }

  stats(): Promise<IndexStats> {
    return this.get("/api/index/stats");
  }

  health(): Promise<HealthInfo> {
    return this.get("/api/health");
  }
}
