/**
 * Overlay state machine.
 *
 * Pure transitions (state, event) -> state so the stabilization rules are
 * exhaustively testable:
 *  - a medicine is shown only after 3 consecutive recognitions of the same
 *    class (per-frame results flicker);
 *  - 5 consecutive below-threshold results clear the overlay;
 *  - below-threshold responses never populate the current medicine;
 *  - the detail panel is reachable only from `recognized` and returns there.
 */
import type { ClassifyResponse, MedicineSummary } from "./types.js";

export type Mode = "idle" | "recognizing" | "recognized" | "detail";

export interface CurrentMedicine extends MedicineSummary {
  confidence: number;
}

export interface OverlayState {
  mode: Mode;
  current: CurrentMedicine | null;
  stabilityCounter: number;
  belowStreak: number;
  /** id of the last single-frame recognition, for counting agreement */
  lastSeenId: string | null;
  banner: string | null;
  fpsActual: number;
}

export type OverlayEvent =
  | { type: "start" }
  | { type: "result"; response: ClassifyResponse }
  | { type: "tap_overlay" }
  | { type: "dismiss_detail" }
  | { type: "server_error"; message: string }
  | { type: "camera_denied" };

export const STABILITY_FRAMES = 3;
export const CLEAR_FRAMES = 5;

export function initialState(): OverlayState {
  return {
    mode: "idle",
    current: null,
    stabilityCounter: 0,
    belowStreak: 0,
    lastSeenId: null,
    banner: null,
    fpsActual: 0,
  };
}

function applyResult(state: OverlayState, response: ClassifyResponse): OverlayState {
  const next = { ...state, banner: null };
  if (next.mode === "idle") next.mode = "recognizing";

  if (response.status === "recognized" && response.medicine) {
    next.belowStreak = 0;
    if (state.lastSeenId === response.medicine.id) {
      next.stabilityCounter = state.stabilityCounter + 1;
    } else {
      next.stabilityCounter = 1;
      next.lastSeenId = response.medicine.id;
    }
    if (next.stabilityCounter >= STABILITY_FRAMES) {
      next.current = {
        ...response.medicine,
        confidence: response.top?.[0]?.confidence ?? 0,
      };
      if (next.mode !== "detail") next.mode = "recognized";
    }
    return next;
  }

  // below threshold: never populate current; clear after a sustained streak
  next.belowStreak = state.belowStreak + 1;
  next.stabilityCounter = 0;
  next.lastSeenId = null;
  if (next.belowStreak >= CLEAR_FRAMES && next.mode !== "detail") {
    next.current = null;
    next.mode = "recognizing";
  }
  return next;
}

/** Total transition function: every (mode, event) pair has a successor. */
export function update(state: OverlayState, event: OverlayEvent): OverlayState {
  switch (event.type) {
    case "start":
      return { ...initialState(), mode: "recognizing", fpsActual: state.fpsActual };
    case "result":
      return applyResult(state, event.response);
    case "tap_overlay":
      if (state.mode === "recognized" && state.current) {
        return { ...state, mode: "detail" };
      }
      return state;
    case "dismiss_detail":
      if (state.mode === "detail") {
        return { ...state, mode: state.current ? "recognized" : "recognizing" };
      }
      return state;
    case "server_error":
      return {
        ...state,
        mode: "idle",
        current: null,
        stabilityCounter: 0,
        belowStreak: 0,
        lastSeenId: null,
        banner: event.message,
      };
    case "camera_denied":
      return { ...initialState(), banner: "camera permission denied" };
  }
}

export function withFps(state: OverlayState, fps: number): OverlayState {
  return { ...state, fpsActual: fps };
}
