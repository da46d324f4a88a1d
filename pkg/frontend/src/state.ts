/** Viewer session state and the interaction flows behind every panel.
 * All mutations go through the documented endpoints via the Client; the
 * DOM layer below is a thin shell over this class, which keeps the whole
 * workflow drivable headlessly (and testable without a browser). */

import { Client, SceneInfo, SelectBody } from "./api";
import { CameraSpec, OrbitState, orbitCamera, projectPoint } from "./camera";

export interface EditRecord {
  kind: string;
  count: number;
  revision: number;
}

export class ViewerState {
  scenes: SceneInfo[] = [];
  active: string | null = null;
  orbit: OrbitState = { azimuth: 0.8, elevation: 0.7, radius: 3.0, target: [0, 0, 0] };
  viewSize = 256;
  revision = -1;
  frame: Blob | null = null;
  overlay: number[][] = [];
  overlayStride = 50;
  selectionId: number | null = null;
  selectionCount = 0;
  history: EditRecord[] = [];
  compositionId: number | null = null;
  lastError: string | null = null;

  private renderInFlight = false;
  private renderQueued = false;

  constructor(public client: Client) {}

  camera(): CameraSpec {
    return orbitCamera(this.orbit, this.viewSize, this.viewSize);
  }

  async loadScenes(): Promise<SceneInfo[]> {
    this.scenes = await this.client.scenes();
    return this.scenes;
  }

  async openScene(id: string): Promise<void> {
    this.active = id;
    this.history = [];
    this.selectionId = null;
    this.selectionCount = 0;
    await Promise.all([this.refresh(), this.fetchOverlay()]);
  }

  /** Request a frame; coalesces bursts so at most one render is in flight. */
  async refresh(): Promise<void> {
    if (!this.active) return;
    if (this.renderInFlight) {
      this.renderQueued = true;
      return;
    }
    this.renderInFlight = true;
    try {
      const res = await this.client.render(this.active, this.camera());
      // a stale frame (older revision) is discarded rather than displayed
      if (res.revision >= this.revision) {
        this.frame = res.blob;
        this.revision = res.revision;
      }
    } finally {
      this.renderInFlight = false;
      if (this.renderQueued) {
        this.renderQueued = false;
        await this.refresh();
      }
    }
  }

  async fetchOverlay(): Promise<void> {
    if (!this.active) return;
    const res = await this.client.points(this.active, this.overlayStride);
    this.overlay = res.positions;
  }

  /** Overlay points projected with the local camera math (dots to draw). */
  projectedOverlay(): { u: number; v: number }[] {
    const cam = this.camera();
    const out: { u: number; v: number }[] = [];
    for (const p of this.overlay) {
      const hit = projectPoint(cam, [p[0], p[1], p[2]]);
      if (hit && hit.u >= 0 && hit.u < cam.width && hit.v >= 0 && hit.v < cam.height) {
        out.push({ u: hit.u, v: hit.v });
      }
    }
    return out;
  }

  async selectRect(x0: number, y0: number, x1: number, y1: number): Promise<number> {
    const body: SelectBody = {
      rect: {
        x0: Math.min(x0, x1),
        y0: Math.min(y0, y1),
        x1: Math.max(x0, x1),
        y1: Math.max(y0, y1),
        camera: this.camera(),
      },
    };
    return this.applySelection(body);
  }

  async selectSphere(center: [number, number, number], radius: number): Promise<number> {
    return this.applySelection({ sphere: { center, radius } });
  }

  private async applySelection(body: SelectBody): Promise<number> {
    if (!this.active) throw new Error("no active scene");
    const res = await this.client.select(this.active, body);
    this.selectionId = res.selection_id;
    this.selectionCount = res.count;
    return res.count;
  }

  async applyEdit(kind: string, params: Record<string, unknown>): Promise<void> {
    if (!this.active) throw new Error("no active scene");
    if (this.selectionId === null) throw new Error("no selection");
    const revision = await this.client.edit(this.active, this.selectionId, kind, params);
    this.history.push({ kind, count: this.selectionCount, revision });
    this.revision = revision;
    await this.refresh();
  }

  async undo(): Promise<void> {
    if (!this.active) return;
    const revision = await this.client.undo(this.active);
    this.history.pop();
    this.revision = revision;
    await this.refresh();
  }

  async composeScenes(entries: { scene_id: string; placement: number[] }[]): Promise<void> {
    this.compositionId = await this.client.compose(entries);
  }

  async renderComposition(): Promise<Blob | null> {
    if (this.compositionId === null) return null;
    const res = await this.client.renderComposition(this.compositionId, this.camera());
    return res.blob;
  }
}
