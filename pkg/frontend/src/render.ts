/** DOM construction from an AppState snapshot. Re-renders the whole view on
 * every state change; all text goes through textContent, never innerHTML.
 */

import type { AppState } from "./viewmodel.js";
import { canSubmit, controlsFor, missingFields } from "./viewmodel.js";

export interface Handlers {
  onRelevance(value: boolean): void;
  onAnswerability(value: 1 | 2 | 3): void;
  onMultihop(value: boolean): void;
  onToggleIrrelevant(passageId: string): void;
  onSubmit(): void;
  onRetry(): void;
}

function el(
  tag: string,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElement {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

function choiceButton(
  label: string,
  pressed: boolean,
  testId: string,
  onClick: () => void,
): HTMLElement {
  const button = el("button", {
    type: "button",
    class: pressed ? "choice pressed" : "choice",
    "aria-pressed": String(pressed),
    "data-testid": testId,
  }, [label]);
  button.addEventListener("click", onClick);
  return button;
}

function renderProgress(state: AppState): HTMLElement {
  const box = el("div", { class: "progress", "data-testid": "progress" });
  if (state.progress) {
    box.textContent = `rated ${state.progress.rated} of ${state.progress.total}`;
  } else {
    box.textContent = "progress unavailable";
  }
  return box;
}

function renderPassages(state: AppState, handlers: Handlers): HTMLElement {
  const task = state.task;
  if (!task) return el("div");
  const flags = controlsFor(task).irrelevantFlags;
  const list = el("div", { class: "passages" });
  for (const passage of task.passages) {
    const pane = el("section", { class: "passage", "data-testid": "passage-pane" }, [
      el("pre", { class: "metadata" }, [passage.metadata_header]),
      el("p", { class: "text" }, [passage.text]),
    ]);
    if (flags) {
      const checkbox = el("input", {
        type: "checkbox",
        id: `flag-${passage.passage_id}`,
        "data-testid": `flag-${passage.passage_id}`,
      }) as HTMLInputElement;
      checkbox.checked = state.form.irrelevant.includes(passage.passage_id);
      checkbox.addEventListener("change", () =>
        handlers.onToggleIrrelevant(passage.passage_id));
      pane.append(el("label", { class: "flag", for: `flag-${passage.passage_id}` },
        [checkbox, "not relevant to this query"]));
    }
    list.append(pane);
  }
  return list;
}

function renderControls(state: AppState, handlers: Handlers): HTMLElement {
  const task = state.task;
  if (!task) return el("div");
  const form = state.form;
  const controls = el("div", { class: "controls" });

  controls.append(el("fieldset", { class: "control", "data-testid": "relevance" }, [
    el("legend", {}, ["relevant to the product? (y/n)"]),
    choiceButton("yes", form.relevance === true, "relevance-yes",
      () => handlers.onRelevance(true)),
    choiceButton("no", form.relevance === false, "relevance-no",
      () => handlers.onRelevance(false)),
  ]));

  const answerability = el("fieldset", { class: "control", "data-testid": "answerability" }, [
    el("legend", {}, ["answerable from the passages? 1=no 2=partly 3=fully"]),
  ]);
  for (const value of [1, 2, 3] as const) {
    answerability.append(choiceButton(String(value), form.answerability === value,
      `answerability-${value}`, () => handlers.onAnswerability(value)));
  }
  controls.append(answerability);

  if (controlsFor(task).multihop) {
    controls.append(el("fieldset", { class: "control", "data-testid": "multihop" }, [
      el("legend", {}, ["are all passages needed to answer? (m toggles)"]),
      choiceButton("yes", form.multihop === true, "multihop-yes",
        () => handlers.onMultihop(true)),
      choiceButton("no", form.multihop === false, "multihop-no",
        () => handlers.onMultihop(false)),
    ]));
  }

  const submit = el("button", {
    type: "button",
    class: "submit",
    "data-testid": "submit",
  }, ["submit rating"]) as HTMLButtonElement;
  submit.disabled = !canSubmit(task, form);
  submit.addEventListener("click", handlers.onSubmit);
  controls.append(submit);

  const missing = missingFields(task, form);
  if (missing.length > 0) {
    controls.append(el("p", { class: "hint", "data-testid": "missing-hint" },
      [`still needed: ${missing.join(", ")}`]));
  }
  return controls;
}

export function renderApp(root: HTMLElement, state: AppState, handlers: Handlers): void {
  root.textContent = "";
  const page = el("main", { class: "page" });
  page.append(renderProgress(state));

  if (state.banner) {
    const banner = el("div", { class: "banner", role: "alert", "data-testid": "banner" }, [
      `connection problem: ${state.banner} - your input is kept. `,
    ]);
    const retry = el("button", { type: "button", "data-testid": "retry" }, ["retry"]);
    retry.addEventListener("click", handlers.onRetry);
    banner.append(retry);
    page.append(banner);
  }
  if (state.notice) {
    page.append(el("div", { class: "notice", "data-testid": "notice" }, [state.notice]));
  }

  switch (state.phase) {
    case "loading":
      page.append(el("p", { "data-testid": "status" }, ["loading next task..."]));
      break;
    case "done":
      page.append(el("p", { "data-testid": "status" }, ["all tasks rated - thank you"]));
      break;
    case "error":
      if (!state.banner) {
        page.append(el("p", { "data-testid": "status" }, ["something went wrong"]));
      }
      break;
    case "rating": {
      const task = state.task;
      if (!task) break;
      page.append(el("header", { class: "task-head" }, [
        el("h1", { "data-testid": "query-text" }, [task.query_text]),
        el("p", { class: "meta", "data-testid": "task-meta" },
          [`${task.query_type} query over ${task.n_docs} ` +
           `${task.n_docs === 1 ? "passage" : "passages"} ` +
           `(auto score ${task.auto_score.toFixed(1)})`]),
      ]));
      page.append(renderPassages(state, handlers));
      page.append(renderControls(state, handlers));
      break;
    }
  }
  root.append(page);
}
