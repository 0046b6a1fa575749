// @vitest-environment jsdom
//
// Scripted end-to-end session against the real annotation server: builds
// a five-item fixture, spawns the Python server (with the built client as
// its static root), drives the DOM app through all items with a scripted
// policy, then checks the server report against a hand-computed accuracy
// and asserts no ground-truth information crossed the wire.

import { spawn, execFileSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, existsSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, dirname } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { AnnotatorApp } from "../src/app.js";

const FRONTEND = join(dirname(fileURLToPath(import.meta.url)), "..");
const PORT = 18431;
const BASE = `http://127.0.0.1:${PORT}`;

const FIXTURE_SCRIPT = `
import sys
from pathlib import Path
from reidalign.data import SyntheticConfig, generate_synthetic, load_manifest
from reidalign import humaneval as he

out = Path(sys.argv[1])
cfg = SyntheticConfig(num_identities=8, images_per_identity=6, train_identities=2,
                      queries_per_identity=1, seed=42)
manifest = generate_synthetic(cfg, out / "data")
ds = load_manifest(manifest)
query_rows = [int(i) for i in ds.indices("query")][:5]
gallery_rows = [int(i) for i in ds.indices("gallery")]
rank_lists, gt_sets = [], []
for q in query_rows:
    qid = int(ds.identities[q])
    same = [g for g in gallery_rows if int(ds.identities[g]) == qid][:1]
    others = [g for g in gallery_rows if int(ds.identities[g]) != qid]
    order = sorted(others, key=lambda g: (abs(int(ds.identities[g]) - qid), g))
    ranked = order[:4] + same + order[4:]  # single gt buried at model rank 5
    rank_lists.append(ranked)
    gt_sets.append(same)
sessions = he.build_sessions(rank_lists, gt_sets, query_rows, ["tester"], "single", seed=3)
(out / "sessions.json").write_text(he.sessions_to_json(sessions, "single"))
(out / "events.jsonl").touch()
print(manifest)
`;

interface SessionBlob {
  sessions: Array<{
    annotator: string;
    items: Array<{ displayed_order: number[]; gt_flags: boolean[] }>;
  }>;
}

let server: ChildProcess | null = null;
let fixtureDir = "";
let capturedPayloads: string[] = [];

function recordingFetch(input: RequestInfo | URL, init?: RequestInit): Promise<Response> {
  if (init?.body) {
    capturedPayloads.push(String(init.body));
  }
  return fetch(input, init).then(async (resp) => {
    const clone = resp.clone();
    try {
      capturedPayloads.push(await clone.text());
    } catch {
      /* binary bodies (images) are not part of the JSON surface */
    }
    return resp;
  });
}

async function waitForServer(url: string, attempts = 60): Promise<void> {
  for (let i = 0; i < attempts; i++) {
    try {
      const resp = await fetch(url);
      if (resp.ok) {
        return;
      }
    } catch {
      /* not up yet */
    }
    await new Promise((resolve) => setTimeout(resolve, 500));
  }
  throw new Error(`server did not come up at ${url}`);
}

beforeAll(async () => {
  fixtureDir = mkdtempSync(join(tmpdir(), "annotator-e2e-"));
  execFileSync("python3", ["-c", FIXTURE_SCRIPT, fixtureDir], { stdio: "pipe" });
  const dist = join(FRONTEND, "dist");
  if (!existsSync(join(dist, "index.html"))) {
    execFileSync("npm", ["run", "build"], { cwd: FRONTEND, stdio: "pipe" });
  }
  server = spawn(
    "python3",
    [
      "-m",
      "reidalign.cli",
      "humaneval-serve",
      "--sessions", join(fixtureDir, "sessions.json"),
      "--events", join(fixtureDir, "events.jsonl"),
      "--data", join(fixtureDir, "data", "manifest.csv"),
      "--port", String(PORT),
      "--static", dist,
    ],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  await waitForServer(`${BASE}/api/report`);
});

afterAll(() => {
  server?.kill();
});

describe("scripted browser session against the live server", () => {
  it("serves the built client as its landing page", async () => {
    const resp = await fetch(`${BASE}/`);
    expect(resp.status).toBe(200);
    const html = await resp.text();
    expect(html).toContain('<div id="app">');
    expect(html).toContain("main.js");
  });

  it("completes a five-item session matching hand-computed accuracy", async () => {
    const blob = JSON.parse(
      readFileSync(join(fixtureDir, "sessions.json"), "utf-8"),
    ) as SessionBlob;
    const items = blob.sessions.find((s) => s.annotator === "tester")!.items;
    expect(items).toHaveLength(5);
    // scripted policy: always confirm displayed tile 0; the displayed
    // tile k shows candidates[displayed_order[k]]
    const expectCorrect = items.filter((it) => it.gt_flags[it.displayed_order[0]]).length;

    capturedPayloads = [];
    document.body.innerHTML = '<div id="app"></div>';
    const root = document.getElementById("app")!;
    const api = new ApiClient(BASE, recordingFetch as typeof fetch);
    const app = new AnnotatorApp(root, api);
    await app.login("tester");

    for (let i = 0; i < 5; i++) {
      expect(root.querySelectorAll(".candidate")).toHaveLength(10);
      const progress = root.querySelector(".progress")!.textContent!;
      expect(progress).toContain(`item ${i + 1} of 5`);
      (root.querySelectorAll(".candidate")[0] as HTMLElement).click();
      await app.confirm();
    }

    // session exhausted: the report view is showing
    expect(root.querySelector(".report")).not.toBeNull();
    expect(root.textContent).toContain("tester");

    const report = await api.report();
    expect(report.per_annotator["tester"].answered).toBe(5);
    expect(report.per_annotator["tester"].correct).toBe(expectCorrect);
    expect(report.per_annotator["tester"].accuracy).toBeCloseTo(expectCorrect / 5, 10);
    expect(report.best_annotator).toBe("tester");
  });

  it("kept every network payload free of ground-truth markers", () => {
    expect(capturedPayloads.length).toBeGreaterThan(10);
    for (const payload of capturedPayloads) {
      let parsed: unknown;
      try {
        parsed = JSON.parse(payload);
      } catch {
        continue; // html/static assets are not JSON payloads
      }
      const scan = (obj: unknown): void => {
        if (Array.isArray(obj)) {
          obj.forEach(scan);
        } else if (obj !== null && typeof obj === "object") {
          for (const [key, value] of Object.entries(obj)) {
            expect(key.toLowerCase()).not.toMatch(/gt|ground|flag/);
            scan(value);
          }
        }
      };
      scan(parsed);
    }
  });

  it("rejects a duplicate answer with 409 after the scripted run", async () => {
    const resp = await fetch(`${BASE}/api/annotator/tester/answer`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ item: 0, chosen: 1 }),
    });
    expect(resp.status).toBe(409);
  });
});
