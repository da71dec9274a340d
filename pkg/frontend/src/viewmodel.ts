/** Pure view logic: what the rater sees and may do is a function of
 * (current task, form inputs) and nothing else. All transitions return new
 * objects; nothing here touches the DOM or the network.
 */

import type { FieldError, NextTaskResponse, Progress, RatingPayload, Task } from "./types.js";

export type Answerability = 1 | 2 | 3;

export interface FormState {
  relevance: boolean | null;
  answerability: Answerability | null;
  multihop: boolean | null;
  irrelevant: readonly string[];
}

export const emptyForm: FormState = {
  relevance: null,
  answerability: null,
  multihop: null,
  irrelevant: [],
};

export function isMultiDoc(task: Task): boolean {
  return task.n_docs > 1;
}

export interface ControlVisibility {
  multihop: boolean;
  irrelevantFlags: boolean;
}

// multihop and per-passage flags only make sense across several sources
export function controlsFor(task: Task): ControlVisibility {
  return { multihop: isMultiDoc(task), irrelevantFlags: isMultiDoc(task) };
}

export function missingFields(task: Task, form: FormState): string[] {
  const missing: string[] = [];
  if (form.relevance === null) missing.push("relevance");
  if (form.answerability === null) missing.push("answerability");
  if (isMultiDoc(task) && form.multihop === null) missing.push("multihop");
  return missing;
}

export function canSubmit(task: Task, form: FormState): boolean {
  return missingFields(task, form).length === 0;
}

export function setRelevance(form: FormState, value: boolean): FormState {
  return { ...form, relevance: value };
}

export function setAnswerability(form: FormState, value: Answerability): FormState {
  return { ...form, answerability: value };
}

export function setMultihop(task: Task, form: FormState, value: boolean): FormState {
  if (!isMultiDoc(task)) return form;
  return { ...form, multihop: value };
}

export function toggleIrrelevant(task: Task, form: FormState, passageId: string): FormState {
  if (!isMultiDoc(task)) return form;
  if (!task.passages.some((p) => p.passage_id === passageId)) return form;
  const irrelevant = form.irrelevant.includes(passageId)
    ? form.irrelevant.filter((id) => id !== passageId)
    : [...form.irrelevant, passageId];
  return { ...form, irrelevant };
}

/** Keyboard map: 1-3 answerability, y/n relevance, m toggles multihop. */
export function applyKey(task: Task, form: FormState, key: string): FormState {
  switch (key) {
    case "1":
    case "2":
    case "3":
      return setAnswerability(form, Number(key) as Answerability);
    case "y":
      return setRelevance(form, true);
    case "n":
      return setRelevance(form, false);
    case "m":
      return setMultihop(task, form, form.multihop === null ? true : !form.multihop);
    default:
      return form;
  }
}

export function buildPayload(annotatorId: string, task: Task, form: FormState): RatingPayload {
  const missing = missingFields(task, form);
  if (missing.length > 0) {
    throw new Error(`rating incomplete: ${missing.join(", ")} not set`);
  }
  const payload: RatingPayload = {
    annotator_id: annotatorId,
    relevance: form.relevance as boolean,
    answerability_1to3: form.answerability as number,
  };
  if (isMultiDoc(task)) {
    payload.multihop_necessary = form.multihop as boolean;
    if (form.irrelevant.length > 0) {
      payload.irrelevant_passage_ids = [...form.irrelevant];
    }
  }
  return payload;
}

// -- session state machine ---------------------------------------------------

export type Phase = "loading" | "rating" | "done" | "error";

export interface AppState {
  phase: Phase;
  task: Task | null;
  form: FormState;
  /** transient outcome of the previous action, e.g. "task already rated" */
  notice: string | null;
  /** sticky connectivity problem; the form is kept so nothing is lost */
  banner: string | null;
  progress: Progress | null;
}

export const initialState: AppState = {
  phase: "loading",
  task: null,
  form: emptyForm,
  notice: null,
  banner: null,
  progress: null,
};

export function onTaskLoaded(state: AppState, next: NextTaskResponse): AppState {
  if (next.task === null) {
    return { ...state, phase: "done", task: null, form: emptyForm, banner: null };
  }
  return { ...state, phase: "rating", task: next.task, form: emptyForm, banner: null };
}

export function onProgress(state: AppState, progress: Progress): AppState {
  return { ...state, progress };
}

export function onSubmitted(state: AppState): AppState {
  return { ...state, phase: "loading", task: null, form: emptyForm, notice: null };
}

export function onConflict(state: AppState): AppState {
  return {
    ...state,
    phase: "loading",
    task: null,
    form: emptyForm,
    notice: "task already rated by someone else; moving on",
  };
}

export function onValidationError(state: AppState, errors: FieldError[]): AppState {
  const notice = errors.map((e) => `${e.field}: ${e.message}`).join("; ");
  return { ...state, notice };
}

/** Connectivity failure: surface a retry banner but keep task and inputs. */
export function onNetworkError(state: AppState, message: string): AppState {
  if (state.task === null) {
    return { ...state, phase: "error", banner: message };
  }
  return { ...state, phase: "rating", banner: message };
}

export function onFormChange(state: AppState, form: FormState): AppState {
  return { ...state, form, notice: null };
}
