/** Typed client for the colorization service API. */

import { RleMask } from "./rle.js";

export interface ColorizePayload {
  gray_png_base64: string;
  global_text?: string;
  instances?: { text: string; mask: RleMask }[];
  alpha?: number;
  beta?: number;
  steps?: number;
  guidance?: number;
  seed?: number;
  luma_lock?: boolean;
}

export interface JobRecord {
  id: string;
  state: "queued" | "running" | "done" | "failed";
  request: Record<string, unknown>;
  error: string | null;
  result_png_base64?: string;
  provenance?: Record<string, unknown>;
}

export class ApiError extends Error {
  readonly status: number;
  readonly field?: string;

  constructor(status: number, message: string, field?: string) {
    super(message);
    this.status = status;
    this.field = field;
  }
}

async function parseError(res: Response): Promise<ApiError> {
  let message = `${res.status}`;
  let field: string | undefined;
  try {
    const body = await res.json();
    message = body?.error?.message ?? message;
    field = body?.error?.field;
  } catch {
    /* non-JSON error body */
  }
  return new ApiError(res.status, message, field);
}

export class StudioApi {
  constructor(private readonly base: string = "") {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  async health(): Promise<{ status: string; checkpoint_hash: string }> {
    const res = await fetch(this.url("/api/health"));
    if (!res.ok) throw await parseError(res);
    return res.json();
  }

  async palette(): Promise<{ colors: Record<string, number[]>; shapes: string[] }> {
    const res = await fetch(this.url("/api/palette"));
    if (!res.ok) throw await parseError(res);
    return res.json();
  }

  async submit(payload: ColorizePayload): Promise<string> {
    const res = await fetch(this.url("/api/colorize"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    if (!res.ok) throw await parseError(res);
    const body = await res.json();
    return body.job_id;
  }

  async job(id: string): Promise<JobRecord> {
    const res = await fetch(this.url(`/api/jobs/${id}`));
    if (!res.ok) throw await parseError(res);
    return res.json();
  }

  /** Poll until the job reaches a terminal state. */
  async waitForJob(id: string, intervalMs = 500, timeoutMs = 120_000): Promise<JobRecord> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const job = await this.job(id);
      if (job.state === "done" || job.state === "failed") return job;
      if (Date.now() > deadline) throw new Error(`job ${id} timed out`);
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}
