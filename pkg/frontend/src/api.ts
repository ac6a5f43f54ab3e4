// Thin REST client for the segmentation inference service.

import { RleMask } from "./rle.js";

export type Mode = "semantic" | "incontext" | "interactive";
export type Polarity = "positive" | "negative";

export interface MaskPayload {
  rle: RleMask;
  png: string; // base64 PNG bytes
}

export interface ClickDoc {
  x: number;
  y: number;
  polarity: Polarity;
}

export interface SessionDoc {
  schema_version: number;
  session_id: string;
  mode: Mode;
  class_id: number | null;
  width: number;
  height: number;
  click_count: number;
  clicks: ClickDoc[];
  mask: MaskPayload;
  dice?: number;
  history: { clicks: number; dice: number | null }[];
}

export interface ClassEntry {
  id: number;
  name: string;
}

export interface ReferenceEntry {
  id: number;
  classes: number[];
  split: string;
}

export interface SuggestedClick {
  done: boolean;
  x?: number;
  y?: number;
  polarity?: Polarity;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: unknown,
  ) {
    super(`HTTP ${status}: ${JSON.stringify(detail)}`);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  let resp: Response;
  try {
    resp = await fetch(url, init);
  } catch (err) {
    throw new ApiError(0, `server unreachable: ${err}`);
  }
  let body: unknown = null;
  try {
    body = await resp.json();
  } catch {
    // non-JSON body; keep null
  }
  if (!resp.ok) {
    throw new ApiError(resp.status, (body as { detail?: unknown })?.detail ?? body);
  }
  return body as T;
}

export class Client {
  constructor(private baseUrl: string) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  healthz(): Promise<{ status: string }> {
    return request(this.url("/healthz"));
  }

  classes(): Promise<{ classes: ClassEntry[] }> {
    return request(this.url("/classes"));
  }

  references(): Promise<{ references: ReferenceEntry[] }> {
    return request(this.url("/references"));
  }

  createSession(body: {
    image: string;
    mode: Mode;
    class_id?: number;
    support_ids?: number[];
    gt?: string;
  }): Promise<SessionDoc> {
    return request(this.url("/sessions"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  getSession(id: string): Promise<SessionDoc> {
    return request(this.url(`/sessions/${id}`));
  }

  addClick(id: string, click: ClickDoc): Promise<SessionDoc> {
    return request(this.url(`/sessions/${id}/clicks`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(click),
    });
  }

  undo(id: string): Promise<SessionDoc> {
    return request(this.url(`/sessions/${id}/undo`), { method: "POST" });
  }

  suggestClick(id: string): Promise<SuggestedClick> {
    return request(this.url(`/sessions/${id}/suggest_click`));
  }
}
