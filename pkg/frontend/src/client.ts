/** Typed HTTP client for the review service.
 *
 * Every failure is classified so the caller can pick a recovery path:
 * ConflictError advances past an already-rated task, ValidationError holds
 * field messages for inline display, NetworkError keeps the form so nothing
 * typed is lost.
 */

import type {
  FieldError,
  FinalizeReport,
  NextTaskResponse,
  Progress,
  RatingPayload,
  RatingReceipt,
  Task,
} from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export class ConflictError extends ApiError {
  constructor(message: string) {
    super(409, message);
    this.name = "ConflictError";
  }
}

export class ValidationError extends ApiError {
  constructor(readonly errors: FieldError[]) {
    super(422, errors.map((e) => `${e.field}: ${e.message}`).join("; "));
    this.name = "ValidationError";
  }
}

export class NetworkError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "NetworkError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private readonly fetchImpl: FetchLike;

  constructor(
    private readonly baseUrl: string = "",
    private readonly token?: string,
    fetchImpl?: FetchLike,
  ) {
    // wrap the global so the call keeps its own binding in browsers
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private headers(hasBody: boolean): Record<string, string> {
    const h: Record<string, string> = {};
    if (hasBody) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async request(path: string, init: RequestInit = {}): Promise<unknown> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.baseUrl + path, {
        ...init,
        headers: { ...this.headers(init.body != null), ...init.headers },
      });
    } catch (err) {
      throw new NetworkError(err instanceof Error ? err.message : String(err));
    }
    if (response.ok) {
      return response.json();
    }
    let detail: unknown = null;
    try {
      detail = ((await response.json()) as { detail?: unknown }).detail;
    } catch {
      // non-JSON error body; fall through to the generic message
    }
    if (response.status === 409) {
      throw new ConflictError(typeof detail === "string" ? detail : "already rated");
    }
    if (response.status === 422 && Array.isArray(detail)) {
      throw new ValidationError(detail as FieldError[]);
    }
    const message = typeof detail === "string" ? detail : `HTTP ${response.status}`;
    throw new ApiError(response.status, message);
  }

  async nextTask(): Promise<NextTaskResponse> {
    return (await this.request("/tasks/next")) as NextTaskResponse;
  }

  async getTask(queryId: string): Promise<Task> {
    const body = (await this.request(`/tasks/${queryId}`)) as { task: Task };
    return body.task;
  }

  async submitRating(queryId: string, payload: RatingPayload): Promise<RatingReceipt> {
    return (await this.request(`/tasks/${queryId}/rating`, {
      method: "POST",
      body: JSON.stringify(payload),
    })) as RatingReceipt;
  }

  async progress(): Promise<Progress> {
    return (await this.request("/progress")) as Progress;
  }

  async finalize(): Promise<FinalizeReport> {
    return (await this.request("/finalize", { method: "POST" })) as FinalizeReport;
  }
}
