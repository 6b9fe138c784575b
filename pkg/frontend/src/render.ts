/**
 * DOM rendering for the triage screen. Pure view over SessionState: cards in
 * server order, a threshold slider, the projection panel and a completion
 * screen. Grayscale previews come straight from the service's PNG endpoint
 * (black = coldest, white = hottest).
 */

import { TriageApi, Verdict } from "./api.js";
import { SessionState, SessionStore } from "./store.js";

const VERDICT_LABELS: Record<string, string> = {
  confirmed_anomalous: "anomalous",
  confirmed_normal: "normal",
  skipped: "skipped",
};

function minutes(seconds: number): string {
  return `${(seconds / 60).toFixed(1)} min`;
}

export class TriageView {
  private cards: HTMLElement;
  private slider: HTMLInputElement;
  private sliderValue: HTMLElement;
  private projectionPanel: HTMLElement;
  private progressBar: HTMLElement;
  private toast: HTMLElement;
  private completion: HTMLElement;
  private sentinel: HTMLElement;

  constructor(
    container: HTMLElement,
    private store: SessionStore,
    private api: TriageApi,
  ) {
    container.innerHTML = `
      <header class="topbar">
        <h1>Module review</h1>
        <div class="threshold">
          <label>decision threshold &delta;
            <input type="range" min="0" max="1" step="0.01" value="0.1" class="delta-slider">
            <span class="delta-value">0.10</span>
          </label>
        </div>
        <div class="projection"></div>
        <div class="progress"></div>
      </header>
      <div class="toast hidden"></div>
      <main class="cards"></main>
      <div class="scroll-sentinel"></div>
      <section class="completion hidden"></section>
    `;
    this.cards = container.querySelector(".cards") as HTMLElement;
    this.slider = container.querySelector(".delta-slider") as HTMLInputElement;
    this.sliderValue = container.querySelector(".delta-value") as HTMLElement;
    this.projectionPanel = container.querySelector(".projection") as HTMLElement;
    this.progressBar = container.querySelector(".progress") as HTMLElement;
    this.toast = container.querySelector(".toast") as HTMLElement;
    this.completion = container.querySelector(".completion") as HTMLElement;
    this.sentinel = container.querySelector(".scroll-sentinel") as HTMLElement;

    this.slider.addEventListener("input", () => {
      store.adjustThreshold(Number(this.slider.value));
    });
    this.toast.addEventListener("click", () => store.dismissToast());
    this.installInfiniteScroll();
    this.installKeyboardShortcuts();
    store.subscribe((state) => this.render(state));
  }

  private installInfiniteScroll(): void {
    if (typeof IntersectionObserver === "undefined") return;
    const observer = new IntersectionObserver((entries) => {
      if (entries.some((e) => e.isIntersecting)) void this.store.fetchNextPage();
    });
    observer.observe(this.sentinel);
  }

  private installKeyboardShortcuts(): void {
    document.addEventListener("keydown", (event) => {
      const shortcuts: Record<string, Verdict> = {
        a: "confirmed_anomalous",
        r: "confirmed_normal",
        s: "skipped",
      };
      const verdict = shortcuts[event.key];
      if (!verdict) return;
      const next = this.store.state.items.find(
        (i) => !(String(i.module_id) in this.store.state.decisions),
      );
      if (next) void this.store.submitDecision(next.module_id, verdict);
    });
  }

  render(state: SessionState): void {
    this.slider.value = String(state.sliderDelta);
    this.sliderValue.textContent = state.sliderDelta.toFixed(2);

    if (state.projection) {
      const p = state.projection;
      const lost =
        p.estimated_lost_anomalies !== undefined
          ? `<span>est. lost anomalies <b>${p.estimated_lost_anomalies}</b></span>`
          : "";
      this.projectionPanel.innerHTML = `
        <span>to review <b>${p.modules_to_review}</b></span>
        <span>est. time <b>${minutes(p.estimated_review_time_s)}</b></span>
        ${lost}`;
    }
    this.progressBar.textContent = `${state.decidedCount} / ${state.totalModules} decided`;

    this.toast.classList.toggle("hidden", state.toast === null);
    this.toast.textContent = state.toast ?? "";

    if (state.complete && state.finalReport) {
      this.renderCompletion(state);
    } else {
      this.completion.classList.add("hidden");
      this.renderCards(state);
    }
  }

  private renderCards(state: SessionState): void {
    if (state.items.length === 0) {
      this.cards.innerHTML = `<p class="empty">nothing to review</p>`;
      return;
    }
    this.cards.innerHTML = "";
    for (const item of state.items) {
      const decision = state.decisions[String(item.module_id)] ?? null;
      const pending = state.pendingDecisions.has(item.module_id);
      const card = document.createElement("article");
      card.className = `card ${decision ? "decided" : ""}`;
      card.dataset.moduleId = String(item.module_id);
      card.innerHTML = `
        <img src="${this.api.previewUrl(item.representative_image_id)}"
             alt="module ${item.module_id}" loading="lazy">
        <div class="meta">
          <span class="module-id">#${item.module_id}</span>
          <span class="score">score ${item.score.toFixed(3)}</span>
          <span class="badge badge-${item.verdict}">${item.verdict}</span>
          ${decision ? `<span class="badge badge-decided">${VERDICT_LABELS[decision]}</span>` : ""}
        </div>
        <div class="actions">
          <button data-verdict="confirmed_anomalous" ${pending ? "disabled" : ""}>anomalous</button>
          <button data-verdict="confirmed_normal" ${pending ? "disabled" : ""}>normal</button>
          <button data-verdict="skipped" ${pending ? "disabled" : ""}>skip</button>
        </div>`;
      for (const button of card.querySelectorAll("button")) {
        button.addEventListener("click", () => {
          void this.store.submitDecision(
            item.module_id,
            button.dataset.verdict as Verdict,
          );
        });
      }
      this.cards.appendChild(card);
    }
  }

  private renderCompletion(state: SessionState): void {
    const report = state.finalReport!;
    this.cards.innerHTML = "";
    this.completion.classList.remove("hidden");
    const lost =
      report.projection.estimated_lost_anomalies !== undefined
        ? `<li>estimated lost anomalies: <b>${report.projection.estimated_lost_anomalies}</b></li>`
        : "";
    this.completion.innerHTML = `
      <h2>Review complete</h2>
      <ul>
        <li>modules reviewed: <b>${report.progress.decided}</b></li>
        <li>review time at 3 s/module: <b>${minutes(report.review_time_s)}</b></li>
        <li>baseline sighting time: <b>${minutes(report.baseline_time_s)}</b></li>
        ${lost}
      </ul>`;
  }
}
