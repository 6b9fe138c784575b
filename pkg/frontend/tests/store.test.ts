import { beforeEach, describe, expect, it } from "vitest";

import { FetchLike, Projection, TriageApi } from "../src/api.js";
import { SessionStore } from "../src/store.js";

/**
 * In-memory stand-in for the triage service. Numbers returned by the mock
 * are deliberately arbitrary so any client-side recomputation would show up
 * as a mismatch in the assertions.
 */
class MockServer {
  modules = [
    { module_id: 11, score: 0.9, representative_image_id: 110 },
    { module_id: 12, score: 0.61, representative_image_id: 120 },
    { module_id: 13, score: 0.35, representative_image_id: 130 },
    { module_id: 14, score: 0.2, representative_image_id: 140 },
    { module_id: 15, score: 0.05, representative_image_id: 150 },
  ];
  delta = 0.1;
  decisions: Record<string, string> = {};
  /** Arbitrary projection numbers keyed by delta, as the server would compute. */
  projections: Record<string, Projection> = {};
  calls: { method: string; url: string; body?: unknown }[] = [];
  failNextThreshold = false;
  failNextDecision: number | null = null;

  projectionFor(delta: number): Projection {
    const key = delta.toFixed(2);
    if (!this.projections[key]) {
      const flagged = this.modules.filter((m) => m.score > delta).length;
      this.projections[key] = {
        delta,
        modules_to_review: flagged,
        estimated_review_time_s: flagged * 3,
        estimated_lost_anomalies: 7, // arbitrary server-side estimate
      };
    }
    return this.projections[key];
  }

  fetch: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const body = init?.body ? JSON.parse(String(init.body)) : undefined;
    this.calls.push({ method, url, body });

    const respond = (status: number, payload: unknown) =>
      new Response(JSON.stringify(payload), {
        status,
        headers: { "content-type": "application/json" },
      });

    if (method === "PUT" && url.includes("/threshold")) {
      if (this.failNextThreshold) {
        this.failNextThreshold = false;
        return respond(400, { detail: "delta must lie in [0, 1]" });
      }
      this.delta = (body as { delta: number }).delta;
      return respond(200, this.projectionFor(this.delta));
    }
    if (method === "POST" && url.includes("/decisions")) {
      const { module_id, verdict } = body as { module_id: number; verdict: string };
      if (this.failNextDecision === module_id) {
        this.failNextDecision = null;
        return respond(500, { detail: "boom" });
      }
      if (!this.modules.some((m) => m.module_id === module_id)) {
        return respond(404, { detail: "unknown module" });
      }
      this.decisions[String(module_id)] = verdict;
      return respond(200, { ok: true, decided: Object.keys(this.decisions).length });
    }
    if (method === "GET" && url.includes("/queue")) {
      const params = new URLSearchParams(url.split("?")[1]);
      const cursor = Number(params.get("cursor") ?? 0);
      const limit = Number(params.get("limit") ?? 20);
      const ordered = [...this.modules].sort((a, b) =>
        Number(String(a.module_id) in this.decisions) -
          Number(String(b.module_id) in this.decisions) ||
        b.score - a.score || a.module_id - b.module_id);
      const items = ordered.slice(cursor, cursor + limit).map((m) => ({
        ...m,
        n_images: 4,
        verdict: m.score > this.delta ? "anomalous" : "normal",
        decision: this.decisions[String(m.module_id)] ?? null,
      }));
      const next = cursor + items.length;
      return respond(200, {
        items,
        next_cursor: next < ordered.length ? next : null,
        total: ordered.length,
      });
    }
    if (method === "GET" && url.includes("/report")) {
      return respond(200, {
        session_id: "s1",
        delta: this.delta,
        projection: this.projectionFor(this.delta),
        review_time_s: this.projectionFor(this.delta).modules_to_review * 3,
        baseline_time_s: this.modules.length * 3,
        progress: {
          decided: Object.keys(this.decisions).length,
          total: this.modules.length,
          decisions: { ...this.decisions },
        },
      });
    }
    return respond(404, { detail: `no route ${method} ${url}` });
  };
}

/** Manually stepped timers so the debounce window is under test control. */
class ManualTimers {
  private queue: { fn: () => void; id: number }[] = [];
  private counter = 0;

  set = (fn: () => void, _ms: number): number => {
    this.queue.push({ fn, id: ++this.counter });
    return this.counter;
  };

  clear = (id: number): void => {
    this.queue = this.queue.filter((t) => t.id !== id);
  };

  fire(): void {
    const pending = this.queue;
    this.queue = [];
    for (const t of pending) t.fn();
  }
}

const flush = () => new Promise((resolve) => setTimeout(resolve, 0));

describe("SessionStore", () => {
  let server: MockServer;
  let timers: ManualTimers;
  let store: SessionStore;

  beforeEach(async () => {
    server = new MockServer();
    timers = new ManualTimers();
    const api = new TriageApi("http://svc", server.fetch);
    store = new SessionStore(api, "s1", {
      pageSize: 2,
      setTimer: timers.set as never,
      clearTimer: timers.clear as never,
    });
    await store.load();
  });

  it("displays only server-provided numbers", async () => {
    // The projection shown is exactly the mock's payload, including the
    // arbitrary loss estimate the client could never derive itself.
    expect(store.state.projection).toEqual(server.projectionFor(0.1));
    expect(store.state.projection!.estimated_lost_anomalies).toBe(7);
    // Queue scores and verdicts are echoed verbatim, in server order.
    expect(store.state.items.map((i) => i.score)).toEqual([0.9, 0.61]);
    expect(store.state.items.every((i) => i.verdict === "anomalous")).toBe(true);
    expect(store.state.totalModules).toBe(5);
  });

  it("keeps server order on screen without client re-sorting", async () => {
    await store.fetchNextPage();
    await store.fetchNextPage();
    expect(store.state.items.map((i) => i.module_id)).toEqual([11, 12, 13, 14, 15]);
    expect(store.state.nextCursor).toBeNull();
  });

  it("paginates without overlap", async () => {
    const first = store.state.items.map((i) => i.module_id);
    await store.fetchNextPage();
    const all = store.state.items.map((i) => i.module_id);
    expect(new Set(all).size).toBe(all.length);
    expect(all.slice(0, first.length)).toEqual(first);
  });

  it("debounces threshold changes to exactly one request", async () => {
    server.calls = [];
    store.adjustThreshold(0.2);
    store.adjustThreshold(0.3);
    store.adjustThreshold(0.4); // rapid slider motion
    expect(server.calls.filter((c) => c.method === "PUT")).toHaveLength(0);
    timers.fire();
    await flush();
    const puts = server.calls.filter((c) => c.method === "PUT");
    expect(puts).toHaveLength(1);
    expect(puts[0].body).toEqual({ delta: 0.4 });
    // rendered projection is the server's response for the final value
    expect(store.state.projection).toEqual(server.projectionFor(0.4));
    expect(store.state.acknowledgedDelta).toBe(0.4);
  });

  it("refetches the queue after a threshold change", async () => {
    store.adjustThreshold(0.5);
    timers.fire();
    await flush();
    await flush();
    // verdicts now reflect the new server-side threshold
    const verdicts = Object.fromEntries(
      store.state.items.map((i) => [i.module_id, i.verdict]),
    );
    expect(verdicts[11]).toBe("anomalous");
    expect(verdicts[12]).toBe("anomalous");
  });

  it("reverts the slider when the server rejects the threshold", async () => {
    server.failNextThreshold = true;
    store.adjustThreshold(0.9);
    expect(store.state.sliderDelta).toBe(0.9);
    timers.fire();
    await flush();
    expect(store.state.sliderDelta).toBe(0.1); // back to acknowledged
    expect(store.state.toast).toContain("threshold rejected");
  });

  it("applies decisions optimistically and confirms with the server", async () => {
    await store.submitDecision(11, "confirmed_anomalous");
    expect(store.state.decisions["11"]).toBe("confirmed_anomalous");
    expect(store.state.decidedCount).toBe(1);
    expect(server.decisions["11"]).toBe("confirmed_anomalous");
  });

  it("rolls back a failed decision", async () => {
    server.failNextDecision = 12;
    await store.submitDecision(12, "confirmed_normal");
    expect(store.state.decisions["12"]).toBeUndefined();
    expect(store.state.decidedCount).toBe(0);
    expect(store.state.toast).toContain("decision failed");
  });

  it("removes the card when the module vanished server-side", async () => {
    server.modules = server.modules.filter((m) => m.module_id !== 12);
    await store.submitDecision(12, "skipped");
    expect(store.state.items.some((i) => i.module_id === 12)).toBe(false);
    expect(store.state.toast).toContain("no longer exists");
  });

  it("decisions survive a page reload via the report endpoint", async () => {
    await store.submitDecision(11, "confirmed_anomalous");
    await store.submitDecision(13, "confirmed_normal");

    // new store instance = page reload; state restored from GET /report
    const reloaded = new SessionStore(new TriageApi("http://svc", server.fetch), "s1", {
      pageSize: 10,
      setTimer: timers.set as never,
      clearTimer: timers.clear as never,
    });
    await reloaded.load();
    expect(reloaded.state.decisions).toEqual({
      "11": "confirmed_anomalous",
      "13": "confirmed_normal",
    });
    expect(reloaded.state.decidedCount).toBe(2);
    expect(reloaded.state.sliderDelta).toBe(server.delta);
  });

  it("shows the final server report when everything is decided", async () => {
    for (const m of server.modules) {
      await store.submitDecision(m.module_id, "confirmed_normal");
    }
    await flush();
    expect(store.state.complete).toBe(true);
    expect(store.state.finalReport!.progress.decided).toBe(5);
    expect(store.state.finalReport!.review_time_s).toBe(
      server.projectionFor(server.delta).modules_to_review * 3,
    );
  });

  it("one in-flight decision per module", async () => {
    const p1 = store.submitDecision(14, "skipped");
    const p2 = store.submitDecision(14, "confirmed_normal"); // ignored while pending
    await Promise.all([p1, p2]);
    const posts = server.calls.filter(
      (c) => c.method === "POST" && (c.body as { module_id: number }).module_id === 14,
    );
    expect(posts).toHaveLength(1);
  });
});
