import type { AnswerBody, NextItem, Report } from "./types.js";

/** Thin typed client over the annotation server's JSON API. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!resp.ok) {
      throw new Error(`GET ${path} failed: ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  nextItem(annotator: string): Promise<NextItem> {
    return this.getJson<NextItem>(
      `/api/annotator/${encodeURIComponent(annotator)}/next`,
    );
  }

  /**
   * Post one answer. Resolves to true when the server recorded it and
   * false when the item was already answered (409) — the UI treats a
   * duplicate as settled, never retries it.
   */
  async submitAnswer(annotator: string, body: AnswerBody): Promise<boolean> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/annotator/${encodeURIComponent(annotator)}/answer`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      },
    );
    if (resp.status === 409) {
      return false;
    }
    if (!resp.ok) {
      throw new Error(`answer rejected: ${resp.status}`);
    }
    return true;
  }

  report(): Promise<Report> {
    return this.getJson<Report>("/api/report");
  }

  imageUrl(path: string): string {
    return `${this.baseUrl}${path}`;
  }
}
