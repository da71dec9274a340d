import { describe, expect, it } from "vitest";

import {
  ApiClient,
  ApiError,
  ConflictError,
  NetworkError,
  ValidationError,
} from "../src/client.js";

interface Recorded {
  url: string;
  method: string;
  headers: Record<string, string>;
  body: string | null;
}

function stubFetch(status: number, payload: unknown) {
  const calls: Recorded[] = [];
  const impl = async (input: string, init?: RequestInit): Promise<Response> => {
    calls.push({
      url: input,
      method: init?.method ?? "GET",
      headers: (init?.headers ?? {}) as Record<string, string>,
      body: (init?.body as string | undefined) ?? null,
    });
    return new Response(JSON.stringify(payload), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { impl, calls };
}

describe("ApiClient", () => {
  it("fetches the next task", async () => {
    const { impl, calls } = stubFetch(200, { task: { query_id: "q1" }, remaining: 4 });
    const client = new ApiClient("http://host", undefined, impl);
    const next = await client.nextTask();
    expect(next.remaining).toBe(4);
    expect(next.task?.query_id).toBe("q1");
    expect(calls[0]?.url).toBe("http://host/tasks/next");
  });

  it("sends the bearer token and JSON body on rating posts", async () => {
    const { impl, calls } = stubFetch(201, { recorded: "q1", remaining: 3 });
    const client = new ApiClient("", "sesame", impl);
    const receipt = await client.submitRating("q1", {
      annotator_id: "a", relevance: true, answerability_1to3: 3,
    });
    expect(receipt).toEqual({ recorded: "q1", remaining: 3 });
    const call = calls[0]!;
    expect(call.method).toBe("POST");
    expect(call.headers["Authorization"]).toBe("Bearer sesame");
    expect(call.headers["Content-Type"]).toBe("application/json");
    expect(JSON.parse(call.body!)).toMatchObject({ relevance: true });
  });

  it("maps 409 to ConflictError", async () => {
    const { impl } = stubFetch(409, { detail: "query q1 already rated" });
    const client = new ApiClient("", undefined, impl);
    await expect(client.submitRating("q1", {
      annotator_id: "a", relevance: true, answerability_1to3: 1,
    })).rejects.toThrow(ConflictError);
  });

  it("maps 422 to ValidationError with field messages", async () => {
    const { impl } = stubFetch(422, {
      detail: [{ field: "multihop_necessary", message: "required" }],
    });
    const client = new ApiClient("", undefined, impl);
    const failure = client.submitRating("q1", {
      annotator_id: "a", relevance: true, answerability_1to3: 1,
    });
    await expect(failure).rejects.toThrow(ValidationError);
    await failure.catch((err: ValidationError) => {
      expect(err.errors).toEqual([{ field: "multihop_necessary", message: "required" }]);
    });
  });

  it("maps other HTTP failures to ApiError with the status", async () => {
    const { impl } = stubFetch(404, { detail: "no task for query zz" });
    const client = new ApiClient("", undefined, impl);
    await client.getTask("zz").then(
      () => { throw new Error("expected rejection"); },
      (err: unknown) => {
        expect(err).toBeInstanceOf(ApiError);
        expect((err as ApiError).status).toBe(404);
        expect((err as ApiError).message).toBe("no task for query zz");
      },
    );
  });

  it("wraps transport failures in NetworkError", async () => {
    const impl = async (): Promise<Response> => { throw new TypeError("fetch failed"); };
    const client = new ApiClient("", undefined, impl);
    await expect(client.progress()).rejects.toThrow(NetworkError);
  });
});
