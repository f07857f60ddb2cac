// Typed client for the countloop session service. All coordinates on the wire
// are in original-image space.

export interface Rect {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface QueryFrame {
  x: number;
  y: number;
  rect: [number, number, number, number]; // x, y, w, h
  tentative: "pos" | "neg";
}

export interface QueriesPayload {
  iteration: number;
  queries: QueryFrame[];
}

export interface WindowsResponse {
  positives_found: number;
  sufficient: boolean;
  minimum: number;
}

export interface SessionState {
  phase: "awaiting-windows" | "training" | "awaiting-feedback" | "finished";
  iteration: number;
  clicks: number;
  positives_found: number;
  queries_pending: number;
  error: string | null;
  count_estimate?: number;
  labels?: [number, number];
}

export interface Decision {
  x: number;
  y: number;
  action: "flip" | "undetermined";
}

export interface FinishResponse {
  count: number;
  points: [number, number][];
  space: string;
  clicks: number;
  iterations: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = typeof fetch;

export class CountloopClient {
  private sessionId: string | null = null;

  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch,
  ) {}

  get id(): string | null {
    return this.sessionId;
  }

  private async request<T>(method: string, path: string, body?: BodyInit, contentType?: string): Promise<T> {
    const headers: Record<string, string> = {};
    if (contentType) headers["Content-Type"] = contentType;
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, { method, body, headers });
    const text = await resp.text();
    let doc: unknown = null;
    try {
      doc = text ? JSON.parse(text) : null;
    } catch {
      doc = null;
    }
    if (!resp.ok) {
      const message = (doc as { error?: string } | null)?.error ?? `HTTP ${resp.status}`;
      throw new ApiError(resp.status, message);
    }
    return doc as T;
  }

  async createSession(image: Blob | ArrayBuffer, seed = 0): Promise<string> {
    const body = image instanceof Blob ? image : new Blob([image]);
    const doc = await this.request<{ id: string }>("POST", `/sessions?seed=${seed}`, body, "image/png");
    this.sessionId = doc.id;
    return doc.id;
  }

  async addWindows(rects: Rect[], config: Record<string, unknown> = {}): Promise<WindowsResponse> {
    return this.request("POST", `/sessions/${this.sessionId}/windows`, JSON.stringify({ rects, config }), "application/json");
  }

  async iterate(): Promise<void> {
    await this.request("POST", `/sessions/${this.sessionId}/iterate`);
  }

  async state(): Promise<SessionState> {
    return this.request("GET", `/sessions/${this.sessionId}/state`);
  }

  async queries(): Promise<QueriesPayload> {
    return this.request("GET", `/sessions/${this.sessionId}/queries`);
  }

  /** Send only the overridden frames; unclicked frames mean accept-tentative. */
  async sendFeedback(decisions: Decision[]): Promise<void> {
    await this.request("POST", `/sessions/${this.sessionId}/feedback`, JSON.stringify({ decisions }), "application/json");
  }

  async finish(): Promise<FinishResponse> {
    return this.request("POST", `/sessions/${this.sessionId}/finish`);
  }

  async delete(): Promise<void> {
    await this.request("DELETE", `/sessions/${this.sessionId}`);
  }

  overlayUrl(): string {
    return `${this.baseUrl}/sessions/${this.sessionId}/overlay.png?t=${Date.now()}`;
  }

  /** Poll /state until the phase is reached; raises on a surfaced server error. */
  async waitForPhase(
    phase: SessionState["phase"],
    opts: { timeoutMs?: number; intervalMs?: number; onTick?: (s: SessionState) => void } = {},
  ): Promise<SessionState> {
    const deadline = Date.now() + (opts.timeoutMs ?? 600_000);
    for (;;) {
      const state = await this.state();
      if (state.error) throw new ApiError(500, state.error);
      opts.onTick?.(state);
      if (state.phase === phase) return state;
      if (Date.now() > deadline) throw new ApiError(408, `timed out waiting for phase ${phase}`);
      await new Promise((resolve) => setTimeout(resolve, opts.intervalMs ?? 300));
    }
  }
}
