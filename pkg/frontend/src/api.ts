/** Typed client for the triage service HTTP API. */

export interface Projection {
  delta: number;
  modules_to_review: number;
  estimated_review_time_s: number;
  estimated_lost_anomalies?: number;
}

export interface QueueItem {
  module_id: number;
  score: number;
  representative_image_id: number;
  n_images: number;
  verdict: "normal" | "anomalous";
  decision: string | null;
}

export interface QueuePage {
  items: QueueItem[];
  next_cursor: number | null;
  total: number;
}

export interface Progress {
  decided: number;
  total: number;
  decisions: Record<string, string>;
}

export interface Report {
  session_id: string;
  delta: number;
  projection: Projection;
  review_time_s: number;
  baseline_time_s: number;
  progress: Progress;
}

export type Verdict = "confirmed_anomalous" | "confirmed_normal" | "skipped";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class TriageApi {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  createSession(body: {
    source_store: string;
    predictions: string;
    delta?: number;
    k?: number;
    labels?: string;
  }): Promise<{ session_id: string }> {
    return this.request("/v1/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  getQueue(sessionId: string, cursor = 0, limit = 20): Promise<QueuePage> {
    const params = new URLSearchParams({ cursor: String(cursor), limit: String(limit) });
    return this.request(`/v1/sessions/${sessionId}/queue?${params}`);
  }

  setThreshold(sessionId: string, delta: number): Promise<Projection> {
    return this.request(`/v1/sessions/${sessionId}/threshold`, {
      method: "PUT",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ delta }),
    });
  }

  recordDecision(
    sessionId: string,
    moduleId: number,
    verdict: Verdict,
  ): Promise<{ ok: boolean; decided: number }> {
    return this.request(`/v1/sessions/${sessionId}/decisions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ module_id: moduleId, verdict }),
    });
  }

  getReport(sessionId: string): Promise<Report> {
    return this.request(`/v1/sessions/${sessionId}/report`);
  }

  previewUrl(imageId: number): string {
    return `${this.baseUrl}/v1/images/${imageId}/preview`;
  }
}
