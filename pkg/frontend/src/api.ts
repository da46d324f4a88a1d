/** Typed client for the rendering/editing service. Every server interaction
 * in the editor goes through this module, so tests can assert the UI never
 * touches an undocumented endpoint. */

import type { CameraSpec } from "./camera";

export interface SceneInfo {
  id: string;
  name: string;
  point_count: number;
  has_checkpoint: boolean;
}

export interface SelectResponse {
  selection_id: number;
  count: number;
}

export interface RenderResult {
  blob: Blob;
  revision: number;
}

export interface PointsResponse {
  stride: number;
  count: number;
  positions: number[][];
}

export type SelectBody =
  | { sphere: { center: number[]; radius: number } }
  | { box: { min: number[]; max: number[] } }
  | { rect: { x0: number; y0: number; x1: number; y1: number; camera: CameraSpec } };

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class Client {
  constructor(
    private base: string,
    private fetchFn: typeof fetch = fetch.bind(globalThis),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const r = await this.fetchFn(this.base + path, init);
    if (!r.ok) {
      let detail = r.statusText;
      try {
        detail = ((await r.json()) as { detail?: string }).detail ?? detail;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(r.status, detail);
    }
    return r;
  }

  private post(path: string, body: unknown): Promise<Response> {
    return this.request(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  async health(): Promise<boolean> {
    const r = await this.request("/healthz");
    return r.status === 200;
  }

  async scenes(): Promise<SceneInfo[]> {
    return (await this.request("/scenes")).json();
  }

  async render(sceneId: string, camera: CameraSpec, refine = false, revision?: number): Promise<RenderResult> {
    const r = await this.post(`/scenes/${sceneId}/render`, { camera, refine, revision });
    return { blob: await r.blob(), revision: Number(r.headers.get("X-Revision") ?? -1) };
  }

  async points(sceneId: string, stride: number): Promise<PointsResponse> {
    return (await this.request(`/scenes/${sceneId}/points?stride=${stride}`)).json();
  }

  async select(sceneId: string, body: SelectBody): Promise<SelectResponse> {
    return (await this.post(`/scenes/${sceneId}/select`, body)).json();
  }

  async edit(sceneId: string, selectionId: number, kind: string, params: Record<string, unknown>): Promise<number> {
    const r = await this.post(`/scenes/${sceneId}/edit`, {
      selection_id: selectionId,
      kind,
      params,
    });
    return ((await r.json()) as { revision: number }).revision;
  }

  async undo(sceneId: string): Promise<number> {
    const r = await this.post(`/scenes/${sceneId}/undo`, {});
    return ((await r.json()) as { revision: number }).revision;
  }

  async compose(entries: { scene_id: string; placement: number[] }[]): Promise<number> {
    const r = await this.post("/compose", { entries });
    return ((await r.json()) as { composition_id: number }).composition_id;
  }

  async renderComposition(compositionId: number, camera: CameraSpec): Promise<RenderResult> {
    const r = await this.post(`/compositions/${compositionId}/render`, { camera });
    return { blob: await r.blob(), revision: Number(r.headers.get("X-Revision") ?? -1) };
  }
}
