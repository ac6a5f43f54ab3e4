// UI session state as a pure function of the latest server document plus the
// locally pending (optimistic) click markers.

import { ClickDoc, SessionDoc } from "./api.js";
import { RleMask } from "./rle.js";

export interface Marker extends ClickDoc {
  pending: boolean;
}

export interface UiSessionState {
  sessionId: string;
  width: number;
  height: number;
  mode: string;
  clickCount: number;
  dice: number | null;
  maskRle: RleMask;
  maskPng: string;
  markers: Marker[];
  pending: Marker[];
}

export function fromServerDoc(doc: SessionDoc, pending: Marker[] = []): UiSessionState {
  return {
    sessionId: doc.session_id,
    width: doc.width,
    height: doc.height,
    mode: doc.mode,
    clickCount: doc.click_count,
    dice: doc.dice ?? null,
    maskRle: doc.mask.rle,
    maskPng: doc.mask.png,
    markers: doc.clicks.map((c) => ({ ...c, pending: false })),
    pending: [...pending],
  };
}

export function withOptimisticClick(state: UiSessionState, click: ClickDoc): UiSessionState {
  return { ...state, pending: [...state.pending, { ...click, pending: true }] };
}

export function withoutPending(state: UiSessionState, click: ClickDoc): UiSessionState {
  const idx = state.pending.findIndex(
    (m) => m.x === click.x && m.y === click.y && m.polarity === click.polarity,
  );
  if (idx < 0) {
    return state;
  }
  const pending = [...state.pending];
  pending.splice(idx, 1);
  return { ...state, pending };
}

export function allMarkers(state: UiSessionState): Marker[] {
  return [...state.markers, ...state.pending];
}
