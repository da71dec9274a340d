/** Bootstrap: wires the API client, the pure state machine and the renderer.
 * Configuration comes from the URL: ?annotator=<id>&token=<bearer>.
 */

import { ApiClient, ConflictError, NetworkError, ValidationError } from "./client.js";
import { renderApp, type Handlers } from "./render.js";
import {
  applyKey,
  buildPayload,
  canSubmit,
  initialState,
  onConflict,
  onFormChange,
  onNetworkError,
  onProgress,
  onSubmitted,
  onTaskLoaded,
  onValidationError,
  setAnswerability,
  setMultihop,
  setRelevance,
  toggleIrrelevant,
  type AppState,
} from "./viewmodel.js";

const params = new URLSearchParams(window.location.search);
const annotatorId = params.get("annotator") ?? "anonymous";
const client = new ApiClient("", params.get("token") ?? undefined);
const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app mount point");
}

let state: AppState = initialState;

function update(next: AppState): void {
  state = next;
  renderApp(root as HTMLElement, state, handlers);
}

async function refreshProgress(): Promise<void> {
  try {
    update(onProgress(state, await client.progress()));
  } catch {
    // progress is decoration; the task flow carries its own error handling
  }
}

async function loadNext(): Promise<void> {
  update({ ...state, phase: "loading" });
  try {
    const next = await client.nextTask();
    update(onTaskLoaded(state, next));
    void refreshProgress();
  } catch (err) {
    if (err instanceof NetworkError) {
      update(onNetworkError(state, err.message));
    } else {
      update(onNetworkError(state, err instanceof Error ? err.message : String(err)));
    }
  }
}

async function submit(): Promise<void> {
  const task = state.task;
  if (!task || !canSubmit(task, state.form)) return;
  try {
    await client.submitRating(task.query_id, buildPayload(annotatorId, task, state.form));
    update(onSubmitted(state));
    await loadNext();
  } catch (err) {
    if (err instanceof ConflictError) {
      update(onConflict(state));
      await loadNext();
    } else if (err instanceof ValidationError) {
      update(onValidationError(state, err.errors));
    } else if (err instanceof NetworkError) {
      update(onNetworkError(state, err.message));
    } else {
      throw err;
    }
  }
}

const handlers: Handlers = {
  onRelevance: (value) => update(onFormChange(state, setRelevance(state.form, value))),
  onAnswerability: (value) => update(onFormChange(state, setAnswerability(state.form, value))),
  onMultihop: (value) => {
    if (state.task) update(onFormChange(state, setMultihop(state.task, state.form, value)));
  },
  onToggleIrrelevant: (passageId) => {
    if (state.task) {
      update(onFormChange(state, toggleIrrelevant(state.task, state.form, passageId)));
    }
  },
  onSubmit: () => void submit(),
  onRetry: () => void loadNext(),
};

document.addEventListener("keydown", (event) => {
  if (state.phase !== "rating" || !state.task) return;
  const target = event.target as HTMLElement | null;
  if (target && (target.tagName === "INPUT" || target.tagName === "TEXTAREA")) return;
  if (event.key === "Enter") {
    void submit();
    return;
  }
  const form = applyKey(state.task, state.form, event.key);
  if (form !== state.form) {
    update(onFormChange(state, form));
  }
});

update(initialState);
void loadNext();
