// Local annotation state for one feedback round: the server's query frames
// plus the user's override toggles. Overrides stay local until submitted.

import type { Decision, QueryFrame } from "./api.js";

export type Override = "none" | "flipped" | "undetermined";

export interface FrameState {
  query: QueryFrame;
  override: Override;
}

export class AnnotationRound {
  readonly frames: FrameState[];
  readonly iteration: number;

  constructor(iteration: number, queries: QueryFrame[]) {
    this.iteration = iteration;
    this.frames = queries.map((query) => ({ query, override: "none" }));
  }

  get size(): number {
    return this.frames.length;
  }

  /** Left-click semantics: toggle between accept and flip. */
  toggleFlip(index: number): Override {
    const frame = this.frameAt(index);
    frame.override = frame.override === "flipped" ? "none" : "flipped";
    return frame.override;
  }

  /** Right-click semantics: toggle "cannot determine". */
  toggleUndetermined(index: number): Override {
    const frame = this.frameAt(index);
    frame.override = frame.override === "undetermined" ? "none" : "undetermined";
    return frame.override;
  }

  /** The label the frame would get if submitted right now (display aid). */
  effectiveLabel(index: number): "pos" | "neg" | "undetermined" {
    const frame = this.frameAt(index);
    if (frame.override === "undetermined") return "undetermined";
    if (frame.override === "flipped") {
      return frame.query.tentative === "pos" ? "neg" : "pos";
    }
    return frame.query.tentative;
  }

  /** Only overridden frames are sent; absence of a click means accept. */
  pendingDecisions(): Decision[] {
    const decisions: Decision[] = [];
    for (const frame of this.frames) {
      if (frame.override === "none") continue;
      decisions.push({
        x: frame.query.x,
        y: frame.query.y,
        action: frame.override === "flipped" ? "flip" : "undetermined",
      });
    }
    return decisions;
  }

  clickCount(): number {
    return this.frames.filter((f) => f.override !== "none").length;
  }

  private frameAt(index: number): FrameState {
    const frame = this.frames[index];
    if (!frame) throw new RangeError(`no frame ${index} in a round of ${this.frames.length}`);
    return frame;
  }
}
