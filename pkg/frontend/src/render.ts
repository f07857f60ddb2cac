// DOM rendering: query frames as absolutely-positioned divs over the image,
// so clicks are real DOM events and tests can drive them.

import type { AnnotationRound } from "./state.js";

export interface DisplayTransform {
  scale: number; // canvas px per image px
}

export const FRAME_CLASS = "cl-frame";

const COLORS: Record<string, string> = {
  pos: "#19b219",
  neg: "#d42a2a",
  undetermined: "#888888",
};

export function renderFrames(
  container: HTMLElement,
  round: AnnotationRound,
  display: DisplayTransform,
  onChange?: () => void,
): HTMLElement[] {
  container.querySelectorAll(`.${FRAME_CLASS}`).forEach((el) => el.remove());
  return round.frames.map((frame, index) => {
    const [x, y, w, h] = frame.query.rect;
    const el = document.createElement("div");
    el.className = FRAME_CLASS;
    el.dataset.index = String(index);
    el.dataset.x = String(frame.query.x);
    el.dataset.y = String(frame.query.y);
    el.style.position = "absolute";
    el.style.left = `${x * display.scale}px`;
    el.style.top = `${y * display.scale}px`;
    el.style.width = `${w * display.scale}px`;
    el.style.height = `${h * display.scale}px`;
    el.style.cursor = "pointer";
    paint(el, round, index);
    el.addEventListener("click", (event) => {
      event.preventDefault();
      round.toggleFlip(index);
      paint(el, round, index);
      onChange?.();
    });
    el.addEventListener("contextmenu", (event) => {
      event.preventDefault();
      round.toggleUndetermined(index);
      paint(el, round, index);
      onChange?.();
    });
    container.appendChild(el);
    return el;
  });
}

function paint(el: HTMLElement, round: AnnotationRound, index: number): void {
  const label = round.effectiveLabel(index);
  el.style.border = `3px ${label === "undetermined" ? "dotted" : "solid"} ${COLORS[label]}`;
  el.dataset.label = label;
  el.title = label === "undetermined" ? "cannot determine" : `tentative: ${label}`;
}

export function drawDetections(
  ctx: CanvasRenderingContext2D,
  points: [number, number][],
  display: DisplayTransform,
): void {
  ctx.strokeStyle = "#ffdc00";
  ctx.lineWidth = 2;
  for (const [x, y] of points) {
    ctx.beginPath();
    ctx.arc(x * display.scale, y * display.scale, 6, 0, 2 * Math.PI);
    ctx.stroke();
  }
}
