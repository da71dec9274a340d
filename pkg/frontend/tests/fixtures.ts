import type { Task } from "../src/types.js";

export function singleDocTask(overrides: Partial<Task> = {}): Task {
  return {
    query_id: "qs-prodalpha-doc1-001",
    query_text: "What fee applies to early closure?",
    query_type: "single",
    n_docs: 1,
    auto_score: 5.0,
    passages: [
      {
        passage_id: "prodalpha-doc1-001",
        metadata_header:
          "Product Name: prodalpha\nDocument Name: guide\nLast Updated: 2024-06-01\nChunk: 1/4",
        text: "Early closure forfeits accrued interest.",
      },
    ],
    ...overrides,
  };
}

export function multiDocTask(overrides: Partial<Task> = {}): Task {
  return {
    query_id: "qm-abc123",
    query_text: "How do the deposit products differ in fees?",
    query_type: "merged",
    n_docs: 2,
    auto_score: 5.0,
    passages: [
      {
        passage_id: "prodalpha-doc1-001",
        metadata_header:
          "Product Name: prodalpha\nDocument Name: guide\nLast Updated: 2024-06-01\nChunk: 1/4",
        text: "prodalpha charges no monthly fee.",
      },
      {
        passage_id: "prodalpha-doc2-003",
        metadata_header:
          "Product Name: prodalpha\nDocument Name: terms\nLast Updated: 2024-06-01\nChunk: 3/4",
        text: "Withdrawals above the cap cost 1%.",
      },
    ],
    ...overrides,
  };
}
