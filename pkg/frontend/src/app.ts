// Annotation app composition: upload an image, drag one or more bounding
// windows until the server reports enough initial positives, then review each
// round's color-coded query frames (left-click flips, right-click marks
// "cannot determine", untouched frames are accepted), watch the running
// count, and download the detections when done.

import { ApiError, CountloopClient, type Rect, type SessionState } from "./api.js";
import { renderFrames } from "./render.js";
import { AnnotationRound } from "./state.js";

interface Elements {
  file: HTMLInputElement;
  stage: HTMLElement;
  image: HTMLImageElement;
  status: HTMLElement;
  count: HTMLElement;
  windowHint: HTMLElement;
  iterate: HTMLButtonElement;
  submit: HTMLButtonElement;
  finish: HTMLButtonElement;
  download: HTMLAnchorElement;
}

export class App {
  private client: CountloopClient;
  private round: AnnotationRound | null = null;
  private displayScale = 1.0;
  private windows: Rect[] = [];
  private dragStart: { x: number; y: number } | null = null;
  private dragBox: HTMLElement | null = null;
  private busy = false;

  constructor(private el: Elements, baseUrl: string) {
    this.client = new CountloopClient(baseUrl);
    el.file.addEventListener("change", () => void this.onUpload());
    el.iterate.addEventListener("click", () => void this.onIterate());
    el.submit.addEventListener("click", () => void this.onSubmit());
    el.finish.addEventListener("click", () => void this.onFinish());
    el.stage.addEventListener("mousedown", (e) => this.onDragStart(e));
    el.stage.addEventListener("mousemove", (e) => this.onDragMove(e));
    el.stage.addEventListener("mouseup", (e) => void this.onDragEnd(e));
    this.setButtons({ iterate: false, submit: false, finish: false });
  }

  private status(text: string): void {
    this.el.status.textContent = text;
  }

  private setButtons(state: { iterate: boolean; submit: boolean; finish: boolean }): void {
    this.el.iterate.disabled = !state.iterate;
    this.el.submit.disabled = !state.submit;
    this.el.finish.disabled = !state.finish;
  }

  private async onUpload(): Promise<void> {
    const file = this.el.file.files?.[0];
    if (!file) return;
    try {
      await this.client.createSession(file);
    } catch (err) {
      this.status(`upload failed: ${(err as Error).message}`);
      return;
    }
    const url = URL.createObjectURL(file);
    await new Promise<void>((resolve) => {
      this.el.image.onload = () => resolve();
      this.el.image.src = url;
    });
    const maxWidth = 900;
    this.displayScale = Math.min(1.0, maxWidth / this.el.image.naturalWidth);
    this.el.image.style.width = `${this.el.image.naturalWidth * this.displayScale}px`;
    this.windows = [];
    this.status("drag a box around one object instance");
    this.el.windowHint.textContent = "";
  }

  private stageCoords(event: MouseEvent): { x: number; y: number } {
    const rect = this.el.stage.getBoundingClientRect();
    return {
      x: (event.clientX - rect.left) / this.displayScale,
      y: (event.clientY - rect.top) / this.displayScale,
    };
  }

  private onDragStart(event: MouseEvent): void {
    if (this.client.id === null || this.round !== null || event.button !== 0) return;
    this.dragStart = this.stageCoords(event);
    this.dragBox = document.createElement("div");
    this.dragBox.className = "cl-dragbox";
    this.dragBox.style.position = "absolute";
    this.dragBox.style.border = "2px dashed #2277ff";
    this.el.stage.appendChild(this.dragBox);
  }

  private onDragMove(event: MouseEvent): void {
    if (!this.dragStart || !this.dragBox) return;
    const cur = this.stageCoords(event);
    const x = Math.min(cur.x, this.dragStart.x) * this.displayScale;
    const y = Math.min(cur.y, this.dragStart.y) * this.displayScale;
    const w = Math.abs(cur.x - this.dragStart.x) * this.displayScale;
    const h = Math.abs(cur.y - this.dragStart.y) * this.displayScale;
    Object.assign(this.dragBox.style, { left: `${x}px`, top: `${y}px`, width: `${w}px`, height: `${h}px` });
  }

  private async onDragEnd(event: MouseEvent): Promise<void> {
    if (!this.dragStart) return;
    const start = this.dragStart;
    const end = this.stageCoords(event);
    this.dragStart = null;
    this.dragBox?.remove();
    this.dragBox = null;
    const rect: Rect = {
      x: Math.round(Math.min(start.x, end.x)),
      y: Math.round(Math.min(start.y, end.y)),
      w: Math.round(Math.abs(end.x - start.x)),
      h: Math.round(Math.abs(end.y - start.y)),
    };
    if (rect.w < 3 || rect.h < 3) return;
    this.windows.push(rect);
    try {
      const resp = await this.client.addWindows([rect]);
      if (resp.sufficient) {
        this.status(`${resp.positives_found} initial positives found — ready to train`);
        this.el.windowHint.textContent = "";
        this.setButtons({ iterate: true, submit: false, finish: false });
      } else {
        // The harvest came up short: ask for another bounding window.
        this.el.windowHint.textContent =
          `only ${resp.positives_found} of ${resp.minimum} required positives — ` +
          "mark another object instance";
        this.setButtons({ iterate: false, submit: false, finish: false });
      }
    } catch (err) {
      this.status(`window rejected: ${(err as Error).message}`);
      this.windows.pop();
    }
  }

  private async trainAndFetch(): Promise<void> {
    this.busy = true;
    this.setButtons({ iterate: false, submit: false, finish: false });
    try {
      const state = await this.client.waitForPhase("awaiting-feedback", {
        onTick: (s: SessionState) => {
          if (s.phase === "training") this.status(`training… (iteration ${s.iteration})`);
        },
      });
      const payload = await this.client.queries();
      this.round = new AnnotationRound(payload.iteration, payload.queries);
      renderFrames(this.el.stage, this.round, { scale: this.displayScale });
      if (state.count_estimate !== undefined) {
        this.el.count.textContent = `count: ${state.count_estimate}  clicks: ${state.clicks}  iteration: ${state.iteration}`;
      }
      if (this.round.size === 0) {
        this.status("no queries left — the classifier is consistent; finish when ready");
        this.round = null;
        this.setButtons({ iterate: true, submit: false, finish: true });
      } else {
        this.status(`review ${this.round.size} frames: click to flip, right-click for "cannot determine"`);
        this.setButtons({ iterate: false, submit: true, finish: true });
      }
    } catch (err) {
      this.status(`error: ${(err as Error).message}`);
      this.setButtons({ iterate: true, submit: false, finish: true });
    } finally {
      this.busy = false;
    }
  }

  private async onIterate(): Promise<void> {
    if (this.busy) return;
    try {
      await this.client.iterate();
    } catch (err) {
      if (err instanceof ApiError && err.status !== 409) {
        this.status(`iterate failed: ${err.message}`);
        return;
      }
    }
    await this.trainAndFetch();
  }

  private async onSubmit(): Promise<void> {
    if (this.busy || this.round === null) return;
    const decisions = this.round.pendingDecisions();
    this.round = null;
    renderFrames(this.el.stage, new AnnotationRound(0, []), { scale: this.displayScale });
    try {
      await this.client.sendFeedback(decisions);
    } catch (err) {
      this.status(`feedback failed: ${(err as Error).message}`);
      return;
    }
    await this.client.waitForPhase("awaiting-feedback", {
      onTick: (s) => this.status(`retraining… (iteration ${s.iteration})`),
    });
    await this.onIterate();
  }

  private async onFinish(): Promise<void> {
    if (this.busy) return;
    try {
      const result = await this.client.finish();
      this.el.count.textContent = `final count: ${result.count}  clicks: ${result.clicks}`;
      this.status("session finished — detections ready to download");
      const blob = new Blob(
        [JSON.stringify({ count: result.count, points: result.points, space: result.space }, null, 1)],
        { type: "application/json" },
      );
      this.el.download.href = URL.createObjectURL(blob);
      this.el.download.download = "detections.json";
      this.el.download.style.display = "inline";
      this.setButtons({ iterate: false, submit: false, finish: false });
    } catch (err) {
      this.status(`finish failed: ${(err as Error).message}`);
    }
  }
}

export function mount(root: Document, baseUrl: string): App {
  const get = <T extends HTMLElement>(id: string): T => {
    const el = root.getElementById(id);
    if (!el) throw new Error(`missing #${id}`);
    return el as T;
  };
  return new App(
    {
      file: get<HTMLInputElement>("file"),
      stage: get("stage"),
      image: get<HTMLImageElement>("image"),
      status: get("status"),
      count: get("count"),
      windowHint: get("window-hint"),
      iterate: get<HTMLButtonElement>("iterate"),
      submit: get<HTMLButtonElement>("submit"),
      finish: get<HTMLButtonElement>("finish"),
      download: get<HTMLAnchorElement>("download"),
    },
    baseUrl,
  );
}
