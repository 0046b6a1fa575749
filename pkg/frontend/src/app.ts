import { ApiClient } from "./api.js";
import type { NextItemPending, Report } from "./types.js";

/**
 * Annotation client: the query image sits on the left, the shuffled
 * candidates form a grid on the right. Clicking a tile selects it,
 * Confirm posts the pick exactly once, then the next item loads. After
 * the last item the per-annotator report is shown.
 */
export class AnnotatorApp {
  private annotator: string | null = null;
  private current: NextItemPending | null = null;
  private selected: number | null = null;
  private submitting = false;
  private itemShownAt = 0;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ApiClient,
    private readonly now: () => number = () => Date.now(),
  ) {}

  start(): void {
    this.renderLogin();
  }

  /** Begin a session for the given annotator id. */
  async login(annotator: string): Promise<void> {
    const trimmed = annotator.trim();
    if (!trimmed) {
      return;
    }
    this.annotator = trimmed;
    await this.loadNext();
  }

  async loadNext(): Promise<void> {
    if (this.annotator === null) {
      throw new Error("loadNext before login");
    }
    let next;
    try {
      next = await this.api.nextItem(this.annotator);
    } catch (err) {
      this.renderError(String(err), () => this.loadNext());
      return;
    }
    if (next.done) {
      await this.showReport();
      return;
    }
    this.current = next;
    this.selected = null;
    this.submitting = false;
    this.itemShownAt = this.now();
    this.renderItem(next);
  }

  select(displayedIndex: number): void {
    if (this.current === null || this.submitting) {
      return;
    }
    this.selected = displayedIndex;
    const tiles = this.root.querySelectorAll<HTMLElement>(".candidate");
    tiles.forEach((tile, i) => {
      tile.classList.toggle("selected", i === displayedIndex);
    });
    const confirm = this.root.querySelector<HTMLButtonElement>("#confirm");
    if (confirm) {
      confirm.disabled = false;
    }
  }

  /** Post the current pick; guarded so a double click sends one POST. */
  async confirm(): Promise<void> {
    if (
      this.current === null ||
      this.selected === null ||
      this.submitting
    ) {
      return;
    }
    this.submitting = true;
    const confirmBtn = this.root.querySelector<HTMLButtonElement>("#confirm");
    if (confirmBtn) {
      confirmBtn.disabled = true;
    }
    const body = {
      item: this.current.item,
      chosen: this.selected,
      elapsed_ms: this.now() - this.itemShownAt,
    };
    try {
      await this.api.submitAnswer(this.annotator as string, body);
    } catch (err) {
      this.submitting = false;
      this.renderError(String(err), () => this.confirm());
      return;
    }
    await this.loadNext();
  }

  async showReport(): Promise<void> {
    let report: Report;
    try {
      report = await this.api.report();
    } catch (err) {
      this.renderError(String(err), () => this.showReport());
      return;
    }
    this.renderReport(report);
  }

  // -- rendering ------------------------------------------------------------

  private clear(): HTMLElement {
    this.root.innerHTML = "";
    return this.root;
  }

  private renderLogin(): void {
    const root = this.clear();
    const box = document.createElement("div");
    box.className = "login";
    box.innerHTML = `
      <h1>Match the person</h1>
      <p>Enter your annotator id to begin.</p>
      <input id="annotator-id" type="text" placeholder="annotator id" />
      <button id="begin">Start</button>
    `;
    root.appendChild(box);
    const input = box.querySelector<HTMLInputElement>("#annotator-id")!;
    const begin = box.querySelector<HTMLButtonElement>("#begin")!;
    begin.addEventListener("click", () => void this.login(input.value));
    input.addEventListener("keydown", (ev) => {
      if (ev.key === "Enter") {
        void this.login(input.value);
      }
    });
  }

  private renderItem(item: NextItemPending): void {
    const root = this.clear();
    const progress = document.createElement("div");
    progress.className = "progress";
    progress.textContent = `item ${item.answered + 1} of ${item.total} — ${item.annotator}`;
    root.appendChild(progress);

    const layout = document.createElement("div");
    layout.className = "layout";

    const queryPane = document.createElement("div");
    queryPane.className = "query-pane";
    const queryImg = document.createElement("img");
    queryImg.src = this.api.imageUrl(item.query);
    queryImg.alt = "query";
    queryImg.className = "query-image";
    const caption = document.createElement("p");
    caption.textContent = "query";
    queryPane.append(queryImg, caption);

    const grid = document.createElement("div");
    grid.className = "candidate-grid";
    item.candidates.forEach((url, index) => {
      const tile = document.createElement("button");
      tile.className = "candidate";
      tile.dataset.index = String(index);
      const img = document.createElement("img");
      img.src = this.api.imageUrl(url);
      img.alt = `candidate ${index + 1}`;
      tile.appendChild(img);
      tile.addEventListener("click", () => this.select(index));
      grid.appendChild(tile);
    });

    layout.append(queryPane, grid);
    root.appendChild(layout);

    const controls = document.createElement("div");
    controls.className = "controls";
    const confirm = document.createElement("button");
    confirm.id = "confirm";
    confirm.textContent = "Confirm pick";
    confirm.disabled = true;
    confirm.addEventListener("click", () => void this.confirm());
    controls.appendChild(confirm);
    root.appendChild(controls);
  }

  private renderReport(report: Report): void {
    const root = this.clear();
    const box = document.createElement("div");
    box.className = "report";
    const title = document.createElement("h1");
    title.textContent = "Results";
    box.appendChild(title);

    const annotators = Object.keys(report.per_annotator);
    if (annotators.length === 0) {
      const empty = document.createElement("p");
      empty.className = "empty";
      empty.textContent = "No answers recorded yet.";
      box.appendChild(empty);
    } else {
      const table = document.createElement("table");
      table.innerHTML =
        "<thead><tr><th>annotator</th><th>answered</th><th>rank-1 accuracy</th></tr></thead>";
      const body = document.createElement("tbody");
      for (const name of annotators) {
        const row = document.createElement("tr");
        const score = report.per_annotator[name];
        const acc =
          score.accuracy === null ? "—" : `${(score.accuracy * 100).toFixed(1)}%`;
        row.innerHTML = `<td>${name}</td><td>${score.answered}</td><td>${acc}</td>`;
        if (name === report.best_annotator) {
          row.classList.add("best");
        }
        body.appendChild(row);
      }
      table.appendChild(body);
      box.appendChild(table);
      if (report.best !== null) {
        const best = document.createElement("p");
        best.className = "best-line";
        best.textContent = `best (designated human performance): ${(report.best * 100).toFixed(1)}% by ${report.best_annotator}`;
        box.appendChild(best);
      }
    }
    const refresh = document.createElement("button");
    refresh.id = "refresh-report";
    refresh.textContent = "Refresh";
    refresh.addEventListener("click", () => void this.showReport());
    box.appendChild(refresh);
    root.appendChild(box);
  }

  private renderError(message: string, retry: () => void): void {
    const root = this.clear();
    const box = document.createElement("div");
    box.className = "error";
    const text = document.createElement("p");
    text.textContent = `Something went wrong: ${message}`;
    const button = document.createElement("button");
    button.id = "retry";
    button.textContent = "Retry";
    button.addEventListener("click", retry);
    box.append(text, button);
    root.appendChild(box);
  }
}
