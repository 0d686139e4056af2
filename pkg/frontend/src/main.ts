/**
 * Browser entry point: webcam -> capture loop -> overlay rendering.
 *
 * Configuration via query parameters:
 *   ?service=http://127.0.0.1:8008   service base URL
 *   ?fps=10                          target capture rate (<= 30)
 */
import { ServiceClient } from "./api.js";
import { CaptureLoop } from "./capture.js";
import {
  OverlayState,
  initialState,
  update,
  withFps,
} from "./overlay.js";
import type { ClassifyResponse } from "./types.js";

const params = new URLSearchParams(location.search);
const serviceUrl = params.get("service") ?? "http://127.0.0.1:8008";
const targetFps = Number(params.get("fps") ?? "10");

const video = document.getElementById("camera") as HTMLVideoElement;
const overlayBox = document.getElementById("overlay") as HTMLDivElement;
const banner = document.getElementById("banner") as HTMLDivElement;
const detailPanel = document.getElementById("detail") as HTMLDivElement;
const statsLine = document.getElementById("stats") as HTMLDivElement;

const client = new ServiceClient(serviceUrl);
let state: OverlayState = initialState();
const scratch = document.createElement("canvas");

function dispatch(event: Parameters<typeof update>[1]): void {
  state = update(state, event);
  render();
}

function captureFrame(): Blob | null {
  if (video.videoWidth === 0) return null;
  scratch.width = video.videoWidth;
  scratch.height = video.videoHeight;
  const ctx = scratch.getContext("2d");
  if (!ctx) return null;
  ctx.drawImage(video, 0, 0);
  // toBlob is async; use the data URL round trip to stay synchronous here
  const dataUrl = scratch.toDataURL("image/jpeg", 0.7);
  const bytes = atob(dataUrl.split(",")[1]);
  const buf = new Uint8Array(bytes.length);
  for (let i = 0; i < bytes.length; i++) buf[i] = bytes.charCodeAt(i);
  return new Blob([buf], { type: "image/jpeg" });
}

const loop = new CaptureLoop<Blob, ClassifyResponse>(targetFps, {
  now: () => performance.now(),
  setTimer: (cb, ms) => window.setTimeout(cb, ms),
  clearTimer: (h) => window.clearTimeout(h as number),
  captureFrame,
  send: (frame) => client.classify(frame),
  onResult: (result) => {
    state = withFps(state, loop.stats().fpsActual);
    dispatch({ type: "result", response: result });
  },
  onError: () => dispatch({ type: "server_error", message: "service unreachable — retrying" }),
});

async function showDetail(id: string): Promise<void> {
  try {
    const detail = await client.medicine(id);
    detailPanel.innerHTML = `
      <h2>${detail.name}</h2>
      <p class="posology">${detail.posology}</p>
      <h3>Usage</h3><p>${detail.pil.usage}</p>
      <h3>Warnings</h3><p>${detail.pil.warnings}</p>
      <h3>Interactions</h3><p>${detail.pil.interactions}</p>
      <button id="dismiss">Back to camera</button>`;
    document.getElementById("dismiss")?.addEventListener("click", () =>
      dispatch({ type: "dismiss_detail" }));
  } catch {
    banner.textContent = "details unavailable";
    banner.hidden = false;
    dispatch({ type: "dismiss_detail" });
  }
}

function render(): void {
  banner.hidden = state.banner === null;
  if (state.banner) banner.textContent = state.banner;

  const showOverlay = state.mode === "recognized" && state.current !== null;
  overlayBox.hidden = !showOverlay;
  if (showOverlay && state.current) {
    overlayBox.innerHTML = `
      <strong>${state.current.name}</strong>
      <span class="conf">${(state.current.confidence * 100).toFixed(0)}%</span>
      <p>${state.current.posology}</p>
      <small>tap for leaflet details</small>`;
  }

  detailPanel.hidden = state.mode !== "detail";
  if (state.mode === "detail" && state.current) void showDetail(state.current.id);

  statsLine.textContent =
    `${state.mode} · ${loop.stats().fpsActual.toFixed(1)} fps · ` +
    `${loop.stats().framesDropped} dropped`;
}

overlayBox.addEventListener("click", () => dispatch({ type: "tap_overlay" }));

async function start(): Promise<void> {
  try {
    const stream = await navigator.mediaDevices.getUserMedia({
      video: { width: 640, height: 480 },
    });
    video.srcObject = stream;
    await video.play();
    dispatch({ type: "start" });
    loop.start();
  } catch {
    dispatch({ type: "camera_denied" });
  }
}

void start();
