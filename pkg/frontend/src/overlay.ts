// Mask overlay rendering: semi-transparent fill plus a contour, decoded from
// the server's RLE payload on the client.

import { decodeRle, RleMask } from "./rle.js";

const FILL = [64, 160, 255, 110] as const; // RGBA
const CONTOUR = [16, 80, 200, 255] as const;

export function overlayImageData(rle: RleMask): ImageData {
  const [h, w] = rle.size;
  const mask = decodeRle(rle);
  const data = new Uint8ClampedArray(h * w * 4);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const i = y * w + x;
      if (!mask[i]) continue;
      const edge =
        x === 0 || y === 0 || x === w - 1 || y === h - 1 ||
        !mask[i - 1] || !mask[i + 1] || !mask[i - w] || !mask[i + w];
      const color = edge ? CONTOUR : FILL;
      data[i * 4] = color[0];
      data[i * 4 + 1] = color[1];
      data[i * 4 + 2] = color[2];
      data[i * 4 + 3] = color[3];
    }
  }
  return new ImageData(data, w, h);
}

export function drawMarker(
  ctx: CanvasRenderingContext2D,
  x: number,
  y: number,
  polarity: "positive" | "negative",
  pending: boolean,
): void {
  ctx.save();
  ctx.beginPath();
  ctx.arc(x, y, 5, 0, 2 * Math.PI);
  ctx.fillStyle = polarity === "positive" ? "#2fbf4a" : "#e04040";
  ctx.globalAlpha = pending ? 0.5 : 1.0;
  ctx.fill();
  ctx.lineWidth = 1.5;
  ctx.strokeStyle = "#ffffff";
  ctx.stroke();
  ctx.restore();
}
