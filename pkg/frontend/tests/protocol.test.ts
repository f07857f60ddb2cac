// Protocol equivalence: a scripted browser-level session — automated clicks
// replaying the headless run's oracle decisions — must reach the same final
// count as the headless run with the same seed.
//
// Requires the python package (repo root) to be importable; the test spawns
// the real HTTP service and a real headless CLI run on a small scene.

// @vitest-environment jsdom

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { CountloopClient } from "../src/api.js";
import { renderFrames } from "../src/render.js";
import { AnnotationRound } from "../src/state.js";

const PYTHON = process.env.PYTHON ?? "python3";
const REPO_ROOT = join(__dirname, "..", "..");
const PORT = 18973;
const BASE = `http://127.0.0.1:${PORT}`;

interface LoggedDecision {
  x: number;
  y: number;
  action: "accept" | "flip" | "undetermined";
}

interface LoggedIteration {
  phase: string;
  iteration?: number;
  queries?: { x: number; y: number; tentative: string }[];
  decisions?: LoggedDecision[];
  clicks?: number;
}

let workdir: string;
let server: ChildProcess | null = null;
let headlessCount = 0;
let headlessClicks = 0;
let iterations: LoggedIteration[] = [];
let scenePng: Buffer;
let windowRect = { x: 0, y: 0, w: 21, h: 21 };

function py(args: string[]): string {
  return execFileSync(PYTHON, ["-m", "countloop", ...args], {
    cwd: REPO_ROOT,
    env: { ...process.env, PYTHONPATH: join(REPO_ROOT, "src") },
    encoding: "utf8",
    timeout: 580_000,
  });
}

async function serverReady(): Promise<void> {
  const deadline = Date.now() + 30_000;
  for (;;) {
    try {
      const resp = await fetch(`${BASE}/sessions/000000000000/state`);
      if (resp.status === 404) return;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) throw new Error("service did not come up");
    await new Promise((r) => setTimeout(r, 250));
  }
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "countloop-proto-"));
  const spec = {
    width: 90, height: 90, count: 12, kind: "disk",
    radius_min: 7, radius_max: 7, intensity_jitter: 0.2,
    background_noise: 0.0, min_spacing: 18, edge_margin: 12,
  };
  const specPath = join(workdir, "spec.json");
  require("node:fs").writeFileSync(specPath, JSON.stringify(spec));
  py(["gen", "--spec", specPath, "--seed", "3",
      "--image", join(workdir, "scene.png"), "--gt", join(workdir, "gt.json")]);

  const gt = JSON.parse(readFileSync(join(workdir, "gt.json"), "utf8"));
  const d0 = gt.points[0];
  windowRect = {
    x: Math.max(0, Math.min(d0[0] - 10, 90 - 21)),
    y: Math.max(0, Math.min(d0[1] - 10, 90 - 21)),
    w: 21, h: 21,
  };

  // Headless reference run (same seed the scripted session will use).
  py(["run", "--image", join(workdir, "scene.png"), "--gt", join(workdir, "gt.json"),
      "--window", `${windowRect.x},${windowRect.y},${windowRect.w},${windowRect.h}`,
      "--iterations", "3", "--seed", "5", "--out", join(workdir, "headless")]);
  const detections = JSON.parse(readFileSync(join(workdir, "headless", "detections.json"), "utf8"));
  headlessCount = detections.count;
  const log = readFileSync(join(workdir, "headless", "session.jsonl"), "utf8")
    .split("\n").filter(Boolean).map((line) => JSON.parse(line) as LoggedIteration);
  iterations = log.filter((rec) => rec.phase === "iteration");
  headlessClicks = iterations.reduce((acc, rec) => acc + (rec.clicks ?? 0), 0);

  scenePng = readFileSync(join(workdir, "scene.png"));
  server = spawn(PYTHON, ["-m", "countloop", "serve", "--port", String(PORT)], {
    cwd: REPO_ROOT,
    env: { ...process.env, PYTHONPATH: join(REPO_ROOT, "src") },
    stdio: "ignore",
  });
  await serverReady();
}, 600_000);

afterAll(() => {
  server?.kill();
  rmSync(workdir, { recursive: true, force: true });
});

describe("protocol equivalence", () => {
  it("scripted clicks reproduce the headless count", async () => {
    expect(headlessCount).toBeGreaterThan(0);
    expect(iterations.length).toBeGreaterThan(0);

    document.body.innerHTML = '<div id="stage" style="position:relative"></div>';
    const stage = document.getElementById("stage")!;
    const client = new CountloopClient(BASE);
    await client.createSession(new Blob([new Uint8Array(scenePng)]), 5);
    const windows = await client.addWindows([windowRect]);
    expect(windows.sufficient).toBe(true);

    let totalClicks = 0;
    for (const record of iterations) {
      await client.iterate();
      await client.waitForPhase("awaiting-feedback", { timeoutMs: 560_000 });
      const payload = await client.queries();
      const logged = record.queries ?? [];
      expect(payload.queries.length).toBe(logged.length);
      if (payload.queries.length === 0) break;

      const round = new AnnotationRound(payload.iteration, payload.queries);
      const frames = renderFrames(stage, round, { scale: 1 });
      for (const decision of record.decisions ?? []) {
        if (decision.action === "accept") continue; // no click needed
        // scene trains at scale 1, so logged (rescaled) coords are original coords
        const idx = payload.queries.findIndex(
          (q) => Math.abs(q.x - decision.x) < 0.51 && Math.abs(q.y - decision.y) < 0.51,
        );
        expect(idx).toBeGreaterThanOrEqual(0);
        frames[idx].dispatchEvent(new MouseEvent(
          decision.action === "flip" ? "click" : "contextmenu",
          { bubbles: true, cancelable: true },
        ));
      }
      totalClicks += round.clickCount();
      await client.sendFeedback(round.pendingDecisions());
      await client.waitForPhase("awaiting-feedback", { timeoutMs: 560_000 });
    }

    const final = await client.finish();
    expect(final.count).toBe(headlessCount);
    expect(final.clicks).toBe(headlessClicks);
    expect(totalClicks).toBe(headlessClicks);
  }, 600_000);
});
