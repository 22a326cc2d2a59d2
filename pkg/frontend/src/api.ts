/** Typed client for the reader-study HTTP API. */

export interface CaseDescriptor {
  case_id: string;
  mode: "blind" | "assisted";
  image_url: string;
  remaining: number;
  model_probabilities?: Record<string, number>;
  overlay_url?: string;
}

export interface StudyMeta {
  labels: string[];
  case_count: number;
  readers: string[];
}

export interface ParticipantSummary {
  recognition_rate: Record<string, number | null>;
  totals: Record<string, number>;
}

export interface StudySummary {
  labels: string[];
  model: ParticipantSummary;
  readers: Record<string, ParticipantSummary & { responses: number }>;
  case_count: number;
  response_count: number;
}

export type NextCase =
  | { kind: "case"; value: CaseDescriptor }
  | { kind: "complete" };

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly validLabels?: string[],
  ) {
    super(message);
  }
}

export class ReaderApi {
  constructor(private readonly baseUrl: string = "") {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async meta(): Promise<StudyMeta> {
    const res = await fetch(this.url("/api/meta"));
    if (!res.ok) throw new ApiError(res.status, "failed to load study metadata");
    return (await res.json()) as StudyMeta;
  }

  async nextCase(reader: string, mode: "blind" | "assisted"): Promise<NextCase> {
    const res = await fetch(
      this.url(`/api/cases/next?reader=${encodeURIComponent(reader)}&mode=${mode}`),
    );
    if (res.status === 204) return { kind: "complete" };
    if (!res.ok) {
      const body = await res.json().catch(() => ({ error: res.statusText }));
      throw new ApiError(res.status, body.error ?? "failed to fetch next case");
    }
    return { kind: "case", value: (await res.json()) as CaseDescriptor };
  }

  /** Resolves on 201; throws ApiError with status 409 for duplicates. */
  async submitResponse(
    caseId: string,
    reader: string,
    label: string,
    mode: "blind" | "assisted",
    elapsedMs: number,
  ): Promise<void> {
    const res = await fetch(this.url(`/api/cases/${encodeURIComponent(caseId)}/responses`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        reader_id: reader,
        chosen_label: label,
        mode,
        elapsed_ms: Math.max(0, Math.round(elapsedMs)),
      }),
    });
    if (res.status === 201) return;
    const body = await res.json().catch(() => ({ error: res.statusText }));
    throw new ApiError(res.status, body.error ?? "submission failed", body.valid_labels);
  }

  async summary(adminToken: string): Promise<StudySummary> {
    const res = await fetch(this.url("/api/summary"), {
      headers: { "X-Admin-Token": adminToken },
    });
    if (!res.ok) {
      const body = await res.json().catch(() => ({ error: res.statusText }));
      throw new ApiError(res.status, body.error ?? "summary unavailable");
    }
    return (await res.json()) as StudySummary;
  }
}
