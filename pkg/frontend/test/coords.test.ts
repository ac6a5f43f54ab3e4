import { describe, expect, it } from "vitest";

import { displayToImage, imageToDisplay } from "../src/coords.js";

describe("coordinate fidelity", () => {
  it("maps 2x display-scale clicks to exact original pixels", () => {
    // 64x64 image shown at 128x128: every display pixel (2x+dx, 2y+dy) with
    // dx,dy in {0,1} must land on image pixel (x, y)
    for (const [dx, dy] of [[0, 0], [1, 0], [0, 1], [1, 1]] as const) {
      for (const [x, y] of [[0, 0], [13, 40], [63, 63]] as const) {
        const p = displayToImage({ x: 2 * x + dx, y: 2 * y + dy }, 128, 128, 64, 64);
        expect(p).toEqual({ x, y });
      }
    }
  });

  it("is the exact inverse of the display scaling at integer factors", () => {
    for (let x = 0; x < 32; x += 5) {
      for (let y = 0; y < 32; y += 7) {
        const d = imageToDisplay({ x, y }, 96, 96, 32, 32);
        expect(displayToImage(d, 96, 96, 32, 32)).toEqual({ x, y });
      }
    }
  });

  it("handles non-integer scales by flooring into the containing pixel", () => {
    expect(displayToImage({ x: 10, y: 10 }, 100, 100, 64, 64)).toEqual({ x: 6, y: 6 });
    expect(displayToImage({ x: 99.9, y: 0 }, 100, 100, 64, 64)).toEqual({ x: 63, y: 0 });
  });

  it("clamps clicks on the outer edge into bounds", () => {
    expect(displayToImage({ x: 128, y: 128 }, 128, 128, 64, 64)).toEqual({ x: 63, y: 63 });
    expect(displayToImage({ x: -1, y: 0 }, 128, 128, 64, 64)).toEqual({ x: 0, y: 0 });
  });
});
