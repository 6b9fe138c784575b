/** Entry point: resolve the session from the URL and mount the view. */

import { TriageApi } from "./api.js";
import { TriageView } from "./render.js";
import { SessionStore } from "./store.js";

async function boot(): Promise<void> {
  const container = document.getElementById("app");
  if (!container) throw new Error("missing #app container");

  const params = new URLSearchParams(window.location.search);
  const api = new TriageApi(params.get("api") ?? "");

  let sessionId = params.get("session");
  if (!sessionId) {
    const sourceStore = params.get("source_store");
    const predictions = params.get("predictions");
    if (!sourceStore || !predictions) {
      container.innerHTML =
        "<p>open with ?session=ID or ?source_store=...&predictions=...</p>";
      return;
    }
    const created = await api.createSession({
      source_store: sourceStore,
      predictions,
      labels: params.get("labels") ?? undefined,
    });
    sessionId = created.session_id;
    params.set("session", sessionId);
    window.history.replaceState(null, "", `?${params}`);
  }

  const store = new SessionStore(api, sessionId);
  new TriageView(container, store, api);
  await store.load();
}

void boot();
