/** DOM shell: scene browser, render panel with point overlay and rectangle
 * selection, transform/undo controls, and a composition panel. */

import { Client } from "./api";
import { ViewerState } from "./state";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

function debounce<A extends unknown[]>(fn: (...args: A) => void, ms: number) {
  let timer: ReturnType<typeof setTimeout> | null = null;
  return (...args: A) => {
    if (timer) clearTimeout(timer);
    timer = setTimeout(() => fn(...args), ms);
  };
}

export function mount(root: Document, baseUrl: string): ViewerState {
  const state = new ViewerState(new Client(baseUrl));
  const sceneList = $("scene-list");
  const frameImg = $<HTMLImageElement>("frame");
  const overlayCanvas = $<HTMLCanvasElement>("overlay");
  const status = $("status");
  const selCount = $("selection-count");
  const historyList = $("history");

  let dragStart: { x: number; y: number } | null = null;

  const setStatus = (text: string) => {
    status.textContent = text;
  };

  const showError = (err: unknown) => {
    state.lastError = err instanceof Error ? err.message : String(err);
    setStatus(`error: ${state.lastError}`);
  };

  const drawOverlay = () => {
    const ctx = overlayCanvas.getContext("2d");
    if (!ctx) return;
    ctx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height);
    if (!($<HTMLInputElement>("show-points")).checked) return;
    ctx.fillStyle = "rgba(80, 180, 255, 0.8)";
    for (const p of state.projectedOverlay()) {
      ctx.fillRect(p.u - 1, p.v - 1, 2, 2);
    }
    if (dragStart) return;
  };

  const showFrame = async () => {
    if (!state.frame) return;
    const url = URL.createObjectURL(state.frame);
    frameImg.onload = () => URL.revokeObjectURL(url);
    frameImg.src = url;
    $("revision").textContent = `revision ${state.revision}`;
    drawOverlay();
  };

  const refresh = async () => {
    try {
      await state.refresh();
      await showFrame();
    } catch (err) {
      showError(err);
    }
  };
  const refreshDebounced = debounce(refresh, 120);

  const renderHistory = () => {
    historyList.innerHTML = "";
    for (const h of state.history) {
      const li = root.createElement("li");
      li.textContent = `${h.kind} (${h.count} pts) @ r${h.revision}`;
      historyList.appendChild(li);
    }
  };

  // scene browser
  state
    .loadScenes()
    .then((scenes) => {
      sceneList.innerHTML = "";
      for (const s of scenes) {
        const item = root.createElement("button");
        item.textContent = `${s.name} (${s.point_count} pts${s.has_checkpoint ? "" : ", untrained"})`;
        item.onclick = async () => {
          setStatus(`loading ${s.id}...`);
          try {
            await state.openScene(s.id);
            await showFrame();
            setStatus(`scene ${s.id}`);
          } catch (err) {
            showError(err);
          }
        };
        sceneList.appendChild(item);
      }
    })
    .catch(showError);

  // orbit controls: drag outside selection mode orbits the camera
  const selMode = $<HTMLInputElement>("select-mode");
  overlayCanvas.onmousedown = (ev) => {
    dragStart = { x: ev.offsetX, y: ev.offsetY };
  };
  overlayCanvas.onmousemove = (ev) => {
    if (!dragStart || selMode.checked) return;
    state.orbit.azimuth -= (ev.offsetX - dragStart.x) * 0.01;
    state.orbit.elevation = Math.min(
      1.45,
      Math.max(0.05, state.orbit.elevation + (ev.offsetY - dragStart.y) * 0.01),
    );
    dragStart = { x: ev.offsetX, y: ev.offsetY };
    drawOverlay();
    refreshDebounced();
  };
  overlayCanvas.onmouseup = async (ev) => {
    if (!dragStart) return;
    const start = dragStart;
    dragStart = null;
    if (selMode.checked) {
      try {
        const n = await state.selectRect(start.x, start.y, ev.offsetX, ev.offsetY);
        selCount.textContent = `${n} points selected`;
      } catch (err) {
        showError(err);
      }
    }
  };
  $("zoom-in").onclick = () => {
    state.orbit.radius = Math.max(0.5, state.orbit.radius * 0.9);
    refreshDebounced();
  };
  $("zoom-out").onclick = () => {
    state.orbit.radius = Math.min(20, state.orbit.radius * 1.1);
    refreshDebounced();
  };

  // sphere selection
  $("select-sphere").onclick = async () => {
    try {
      const center = ($<HTMLInputElement>("sphere-center")).value.split(",").map(Number) as [
        number,
        number,
        number,
      ];
      const radius = Number(($<HTMLInputElement>("sphere-radius")).value);
      const n = await state.selectSphere(center, radius);
      selCount.textContent = `${n} points selected`;
    } catch (err) {
      showError(err);
    }
  };

  const vec = (): number[] =>
    ["dx", "dy", "dz"].map((id) => Number(($<HTMLInputElement>(id)).value) || 0);

  const runEdit = (kind: string, params: Record<string, unknown>) => async () => {
    try {
      await state.applyEdit(kind, params);
      renderHistory();
      await showFrame();
      setStatus(`${kind} applied`);
    } catch (err) {
      showError(err);
    }
  };

  $("apply-translate").onclick = () => runEdit("translate", { vector: vec() })();
  $("apply-rotate").onclick = () => {
    const angle = Number(($<HTMLInputElement>("angle")).value) || 0;
    runEdit("rotate", { axis: [0, 0, 1], angle, pivot: vec() })();
  };
  $("apply-scale").onclick = () => {
    const factor = Number(($<HTMLInputElement>("factor")).value) || 1;
    runEdit("scale", { factor, pivot: vec() })();
  };
  $("apply-duplicate").onclick = () => runEdit("duplicate", {})();
  $("apply-delete").onclick = () => runEdit("delete", {})();
  $("undo").onclick = async () => {
    try {
      await state.undo();
      renderHistory();
      await showFrame();
      setStatus("undone");
    } catch (err) {
      showError(err);
    }
  };

  // composition panel: compose every listed scene at identity placement
  $("compose-all").onclick = async () => {
    try {
      const entries = state.scenes.map((s) => ({
        scene_id: s.id,
        placement: [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1],
      }));
      await state.composeScenes(entries);
      const blob = await state.renderComposition();
      if (blob) {
        const url = URL.createObjectURL(blob);
        frameImg.onload = () => URL.revokeObjectURL(url);
        frameImg.src = url;
        setStatus("composition rendered");
      }
    } catch (err) {
      showError(err);
    }
  };

  return state;
}

declare global {
  interface Window {
    fpcrMount: typeof mount;
  }
}

if (typeof window !== "undefined") {
  window.fpcrMount = mount;
  if (document.getElementById("scene-list")) {
    const base = (window as unknown as { FPCR_BASE?: string }).FPCR_BASE ?? "http://127.0.0.1:8000";
    mount(document, base);
  }
}
