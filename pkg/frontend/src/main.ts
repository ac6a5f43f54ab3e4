// Annotation app: load an image, pick a mode, click to refine, export the mask.
// Left click adds a positive (include) click, right click a negative one.

import { ApiError, ClassEntry, Client, ClickDoc, Mode, ReferenceEntry, SessionDoc } from "./api.js";
import { displayToImage, imageToDisplay } from "./coords.js";
import { drawMarker, overlayImageData } from "./overlay.js";
import { RequestQueue } from "./queue.js";
import { allMarkers, fromServerDoc, UiSessionState, withOptimisticClick, withoutPending } from "./state.js";

const client = new Client("");
const queue = new RequestQueue();

let state: UiSessionState | null = null;
let imageBitmap: ImageBitmap | null = null;
let imageB64: string | null = null;
let gtB64: string | null = null;

const el = <T extends HTMLElement>(id: string): T => document.getElementById(id) as T;
const canvas = () => el<HTMLCanvasElement>("canvas");
const toastBox = () => el<HTMLDivElement>("toasts");

function toast(message: string): void {
  const node = document.createElement("div");
  node.className = "toast";
  node.textContent = message;
  toastBox().appendChild(node);
  setTimeout(() => node.remove(), 4000);
}

function showError(err: unknown): void {
  if (err instanceof ApiError) {
    toast(`error ${err.status}: ${JSON.stringify(err.detail)}`);
  } else {
    toast(String(err));
  }
}

async function fileToBase64(file: File): Promise<string> {
  const buf = await file.arrayBuffer();
  let binary = "";
  const bytes = new Uint8Array(buf);
  for (let i = 0; i < bytes.length; i++) binary += String.fromCharCode(bytes[i]);
  return btoa(binary);
}

function render(): void {
  const cv = canvas();
  const ctx = cv.getContext("2d")!;
  ctx.clearRect(0, 0, cv.width, cv.height);
  if (!imageBitmap) return;
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(imageBitmap, 0, 0, cv.width, cv.height);
  if (state) {
    const overlay = overlayImageData(state.maskRle);
    const off = new OffscreenCanvas(overlay.width, overlay.height);
    off.getContext("2d")!.putImageData(overlay, 0, 0);
    ctx.drawImage(off, 0, 0, cv.width, cv.height);
    for (const m of allMarkers(state)) {
      const p = imageToDisplay({ x: m.x, y: m.y }, cv.width, cv.height, state.width, state.height);
      drawMarker(ctx, p.x, p.y, m.polarity, m.pending);
    }
    el<HTMLSpanElement>("clicks").textContent = String(state.clickCount);
    el<HTMLSpanElement>("dice").textContent =
      state.dice === null ? "n/a" : state.dice.toFixed(4);
  }
}

function setState(doc: SessionDoc): void {
  state = fromServerDoc(doc, state?.pending ?? []);
  render();
}

async function populateCatalogs(): Promise<void> {
  try {
    const [cls, refs] = await Promise.all([client.classes(), client.references()]);
    const classSel = el<HTMLSelectElement>("class-select");
    classSel.innerHTML = "";
    for (const c of cls.classes as ClassEntry[]) {
      const opt = document.createElement("option");
      opt.value = String(c.id);
      opt.textContent = `${c.id}: ${c.name}`;
      classSel.appendChild(opt);
    }
    const refSel = el<HTMLSelectElement>("ref-select");
    refSel.innerHTML = "";
    for (const r of refs.references as ReferenceEntry[]) {
      const opt = document.createElement("option");
      opt.value = String(r.id);
      opt.textContent = `#${r.id} (classes ${r.classes.join(",")})`;
      refSel.appendChild(opt);
    }
  } catch (err) {
    showError(err);
  }
}

async function startSession(): Promise<void> {
  if (!imageB64) {
    toast("load an image first");
    return;
  }
  const mode = el<HTMLSelectElement>("mode-select").value as Mode;
  const body: Parameters<Client["createSession"]>[0] = { image: imageB64, mode };
  if (mode === "semantic") {
    body.class_id = Number(el<HTMLSelectElement>("class-select").value);
  }
  if (mode === "incontext") {
    body.class_id = Number(el<HTMLSelectElement>("class-select").value);
    body.support_ids = [Number(el<HTMLSelectElement>("ref-select").value)];
  }
  if (gtB64) {
    body.gt = gtB64;
  }
  try {
    const doc = await client.createSession(body);
    state = fromServerDoc(doc);
    render();
    toast(`session ${doc.session_id.slice(0, 8)} started (${mode})`);
  } catch (err) {
    state = null;
    showError(err);
  }
}

function onCanvasClick(ev: MouseEvent): void {
  ev.preventDefault();
  if (!state) return;
  const cv = canvas();
  const rect = cv.getBoundingClientRect();
  const display = { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
  const pixel = displayToImage(display, rect.width, rect.height, state.width, state.height);
  const click: ClickDoc = {
    x: pixel.x,
    y: pixel.y,
    polarity: ev.button === 2 || ev.type === "contextmenu" ? "negative" : "positive",
  };
  state = withOptimisticClick(state, click);
  render();
  const sid = state.sessionId;
  queue
    .enqueue(() => client.addClick(sid, click))
    .then((doc) => {
      state = state ? withoutPending(state, click) : state;
      setState(doc);
    })
    .catch((err) => {
      state = state ? withoutPending(state, click) : state;
      render();
      showError(err);
    });
}

function undo(): void {
  if (!state) return;
  const sid = state.sessionId;
  queue
    .enqueue(() => client.undo(sid))
    .then(setState)
    .catch(showError);
}

function exportMask(): void {
  if (!state) return;
  // byte-exact copy of the server's PNG payload
  const bytes = Uint8Array.from(atob(state.maskPng), (c) => c.charCodeAt(0));
  const blob = new Blob([bytes], { type: "image/png" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = `mask_${state.sessionId.slice(0, 8)}_${state.clickCount}clicks.png`;
  a.click();
  URL.revokeObjectURL(a.href);
}

async function onImageChosen(input: HTMLInputElement): Promise<void> {
  const file = input.files?.[0];
  if (!file) return;
  imageB64 = await fileToBase64(file);
  imageBitmap = await createImageBitmap(file);
  const cv = canvas();
  const scale = Math.max(1, Math.floor(512 / Math.max(imageBitmap.width, imageBitmap.height)));
  cv.width = imageBitmap.width * scale;
  cv.height = imageBitmap.height * scale;
  state = null;
  render();
}

async function onGtChosen(input: HTMLInputElement): Promise<void> {
  const file = input.files?.[0];
  gtB64 = file ? await fileToBase64(file) : null;
}

export function boot(): void {
  populateCatalogs();
  el<HTMLInputElement>("image-input").addEventListener("change", (e) =>
    onImageChosen(e.target as HTMLInputElement),
  );
  el<HTMLInputElement>("gt-input").addEventListener("change", (e) =>
    onGtChosen(e.target as HTMLInputElement),
  );
  el<HTMLButtonElement>("start").addEventListener("click", startSession);
  el<HTMLButtonElement>("undo").addEventListener("click", undo);
  el<HTMLButtonElement>("export").addEventListener("click", exportMask);
  const cv = canvas();
  cv.addEventListener("click", onCanvasClick);
  cv.addEventListener("contextmenu", onCanvasClick);
  el<HTMLSelectElement>("mode-select").addEventListener("change", () => {
    const mode = el<HTMLSelectElement>("mode-select").value;
    el<HTMLDivElement>("semantic-opts").style.display = mode === "interactive" ? "none" : "";
    el<HTMLDivElement>("ref-opts").style.display = mode === "incontext" ? "" : "none";
  });
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  boot();
}
