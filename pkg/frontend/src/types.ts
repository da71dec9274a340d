/** Wire types for the annotation review API. */

export interface PassageView {
  passage_id: string;
  metadata_header: string;
  text: string;
}

export interface Task {
  query_id: string;
  query_text: string;
  query_type: string;
  n_docs: number;
  auto_score: number;
  passages: PassageView[];
  status?: string;
}

export interface NextTaskResponse {
  task: Task | null;
  remaining: number;
}

export interface RatingPayload {
  annotator_id: string;
  relevance: boolean;
  answerability_1to3: number;
  multihop_necessary?: boolean;
  irrelevant_passage_ids?: string[];
}

export interface RatingReceipt {
  recorded: string;
  remaining: number;
}

export interface TypeProgress {
  total: number;
  rated: number;
}

export interface Progress {
  total: number;
  rated: number;
  remaining: number;
  by_type: Record<string, TypeProgress>;
}

export interface FieldError {
  field: string;
  message: string;
}

export interface FinalizeReport {
  stage: string;
  counts: Record<string, number>;
  outputs: Record<string, string>;
  details: Record<string, unknown>;
  notes: string[];
}
