/** Wire types for the annotation server's JSON API. */

export interface NextItemPending {
  annotator: string;
  answered: number;
  total: number;
  done: false;
  item: number;
  query: string;
  candidates: string[];
}

export interface NextItemDone {
  annotator: string;
  answered: number;
  total: number;
  done: true;
}

export type NextItem = NextItemPending | NextItemDone;

export interface AnswerBody {
  item: number;
  chosen: number;
  elapsed_ms?: number;
}

export interface AnnotatorScore {
  answered: number;
  correct: number;
  accuracy: number | null;
}

export interface Report {
  per_annotator: Record<string, AnnotatorScore>;
  best: number | null;
  best_annotator: string | null;
}
