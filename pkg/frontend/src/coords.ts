// Canvas-display to original-image pixel mapping (and back).
//
// The canvas is rendered at an arbitrary CSS size; a click lands in display
// coordinates and must map to the exact source pixel, i.e. the inverse of the
// display scaling, floored to the containing pixel.

export interface Point {
  x: number;
  y: number;
}

export function displayToImage(
  p: Point,
  displayWidth: number,
  displayHeight: number,
  imageWidth: number,
  imageHeight: number,
): Point {
  const x = Math.floor((p.x * imageWidth) / displayWidth);
  const y = Math.floor((p.y * imageHeight) / displayHeight);
  return {
    x: Math.min(Math.max(x, 0), imageWidth - 1),
    y: Math.min(Math.max(y, 0), imageHeight - 1),
  };
}

export function imageToDisplay(
  p: Point,
  displayWidth: number,
  displayHeight: number,
  imageWidth: number,
  imageHeight: number,
): Point {
  // centre of the source pixel in display space
  return {
    x: ((p.x + 0.5) * displayWidth) / imageWidth,
    y: ((p.y + 0.5) * displayHeight) / imageHeight,
  };
}
