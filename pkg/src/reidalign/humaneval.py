"""Human-performance protocol: candidate sets, sessions, scoring, and API.

For each query the annotator picks the match from a small candidate set
built out of the model's rank list: the 10-image mode guarantees exactly
one ground truth (injected at position 10 when the model missed it), the
50-image mode guarantees every ground truth is present by displacing the
lowest-ranked non-matches.  Candidates are shuffled per annotator with a
recorded seed, answers land in an append-only event log, and the report
scores rank-1 accuracy per annotator, designating the best.

The HTTP surface never exposes ground-truth flags; correctness exists
only server-side and in the report.
"""

import io
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class UnknownAnnotator(ValueError):
    pass


class DuplicateAnswer(ValueError):
    pass


@dataclass
class CandidateSet:
    """One query's candidate pool with hidden ground-truth flags."""

    query_ref: int
    candidates: list  # gallery refs in model-rank order after injection
    gt_flags: list
    shuffle_seed: int
    displayed_order: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.candidates) != len(self.gt_flags):
            raise ValueError("CandidateSet: flags must match candidates")
        if not self.displayed_order:
            rng = np.random.default_rng(self.shuffle_seed)
            self.displayed_order = [int(i) for i in rng.permutation(len(self.candidates))]

    def displayed_refs(self) -> list:
        return [self.candidates[k] for k in self.displayed_order]

    def is_correct(self, displayed_index: int) -> bool:
        return bool(self.gt_flags[self.displayed_order[displayed_index]])


def build_candidate_set_single_gt(
    query_ref: int, ranked_gallery, gt_index: int, shuffle_seed: int = 0,
    set_size: int = 10,
) -> CandidateSet:
    """Top-``set_size`` of the rank list; the single ground truth replaces
    the last entry when the model missed it entirely."""
    ranked = [int(r) for r in ranked_gallery]
    if len(ranked) < set_size:
        raise ValueError(
            f"build_candidate_set_single_gt: rank list of {len(ranked)} is "
            f"shorter than the candidate set ({set_size})"
        )
    top = ranked[:set_size]
    if gt_index not in top:
        if gt_index not in ranked:
            raise ValueError("build_candidate_set_single_gt: ground truth not ranked")
        top[-1] = int(gt_index)
    flags = [c == gt_index for c in top]
    return CandidateSet(int(query_ref), top, flags, shuffle_seed)


def build_candidate_set_multi_gt(
    query_ref: int, ranked_gallery, gt_indices, shuffle_seed: int = 0,
    set_size: int = 50,
) -> CandidateSet:
    """Top-``set_size`` with every ground truth present.

    Missing ground truths are injected in ascending model-rank order, each
    displacing the currently lowest-ranked non-ground-truth entry.
    """
    ranked = [int(r) for r in ranked_gallery]
    gt_set = {int(g) for g in gt_indices}
    if len(gt_set) > set_size:
        raise ValueError(
            f"build_candidate_set_multi_gt: {len(gt_set)} ground truths exceed "
            f"the candidate set size {set_size}"
        )
    if len(ranked) < set_size:
        raise ValueError(
            f"build_candidate_set_multi_gt: rank list of {len(ranked)} is "
            f"shorter than the candidate set ({set_size})"
        )
    if not gt_set.issubset(ranked):
        raise ValueError("build_candidate_set_multi_gt: ground truths missing from rank list")
    top = ranked[:set_size]
    flags = [c in gt_set for c in top]
    missing = [g for g in ranked if g in gt_set and g not in top]
    for gt in missing:  # already in ascending model-rank order
        pos = max(i for i, f in enumerate(flags) if not f)
        top[pos] = gt
        flags[pos] = True
    return CandidateSet(int(query_ref), top, flags, shuffle_seed)


@dataclass
class Session:
    annotator: str
    items: list
    answers: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)

    def __post_init__(self):
        if not self.answers:
            self.answers = [None] * len(self.items)
            self.timestamps = [None] * len(self.items)

    def next_unanswered(self):
        for idx, answer in enumerate(self.answers):
            if answer is None:
                return idx
        return None

    def answered_count(self) -> int:
        return sum(a is not None for a in self.answers)


def build_sessions(
    rank_lists,
    gt_sets,
    query_refs,
    annotators,
    mode: str = "single",
    seed: int = 0,
    set_size: int | None = None,
):
    """One session per annotator over the same queries, shuffled per
    (annotator, item) with seeds derived from ``seed``."""
    if mode not in ("single", "multi"):
        raise ValueError(f"build_sessions: unknown mode {mode!r}")
    size = set_size or (10 if mode == "single" else 50)
    sessions = []
    for a_idx, annotator in enumerate(annotators):
        items = []
        for q_idx, (ranked, gts, qref) in enumerate(zip(rank_lists, gt_sets, query_refs)):
            shuffle_seed = seed * 1_000_003 + a_idx * 10_007 + q_idx
            if mode == "single":
                gt_list = [gts] if np.isscalar(gts) else list(gts)
                if len(gt_list) != 1:
                    raise ValueError(
                        f"build_sessions: single mode needs exactly one ground "
                        f"truth per query, query {q_idx} has {len(gt_list)}"
                    )
                items.append(
                    build_candidate_set_single_gt(
                        qref, ranked, int(gt_list[0]), shuffle_seed, size
                    )
                )
            else:
                items.append(
                    build_candidate_set_multi_gt(qref, ranked, gts, shuffle_seed, size)
                )
        sessions.append(Session(str(annotator), items))
    return sessions


@dataclass
class HumanReport:
    per_annotator: dict
    best: float
    best_annotator: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_annotator": self.per_annotator,
                "best": self.best,
                "best_annotator": self.best_annotator,
            },
            indent=1,
        )


def score_report(sessions) -> HumanReport:
    """Rank-1 accuracy per annotator over answered items; best designated.

    Skipped items (null answers) stay out of the denominator.
    """
    per = {}
    for session in sessions:
        answered = correct = 0
        for item, answer in zip(session.items, session.answers):
            if answer is None:
                continue
            answered += 1
            correct += item.is_correct(answer)
        per[session.annotator] = {
            "answered": answered,
            "correct": correct,
            "accuracy": (correct / answered) if answered else None,
        }
    scored = {a: v["accuracy"] for a, v in per.items() if v["accuracy"] is not None}
    if not scored:
        raise ValueError("score_report: no answered items")
    best_annotator = max(scored, key=scored.get)  # first annotator wins ties
    return HumanReport(per, scored[best_annotator], best_annotator)


# ---------------------------------------------------------------------------
# persistence


def sessions_to_json(sessions, mode: str) -> str:
    return json.dumps(
        {
            "mode": mode,
            "sessions": [
                {
                    "annotator": s.annotator,
                    "items": [
                        {
                            "query_ref": it.query_ref,
                            "candidates": it.candidates,
                            "gt_flags": it.gt_flags,
                            "shuffle_seed": it.shuffle_seed,
                            "displayed_order": it.displayed_order,
                        }
                        for it in s.items
                    ],
                }
                for s in sessions
            ],
        },
        indent=1,
    )


def sessions_from_json(text: str):
    blob = json.loads(text)
    sessions = []
    for s in blob["sessions"]:
        items = [
            CandidateSet(
                it["query_ref"],
                it["candidates"],
                it["gt_flags"],
                it["shuffle_seed"],
                it["displayed_order"],
            )
            for it in s["items"]
        ]
        sessions.append(Session(s["annotator"], items))
    return blob.get("mode", "single"), sessions


class SessionStore:
    """Sessions plus an append-only answer log; answers are serialized."""

    def __init__(self, sessions, events_path=None, mode: str = "single"):
        self.sessions = {s.annotator: s for s in sessions}
        self.events_path = None if events_path is None else Path(events_path)
        self.mode = mode
        self._lock = threading.Lock()

    @classmethod
    def load(cls, sessions_path, events_path=None) -> "SessionStore":
        mode, sessions = sessions_from_json(Path(sessions_path).read_text())
        store = cls(sessions, events_path=None, mode=mode)
        if events_path is not None and Path(events_path).exists():
            for lineno, line in enumerate(
                Path(events_path).read_text().splitlines(), start=1
            ):
                if not line.strip():
                    continue
                ev = json.loads(line)
                store.record_answer(
                    ev["annotator"],
                    ev["item"],
                    ev["chosen"],
                    elapsed_ms=ev.get("elapsed_ms"),
                    ts=ev.get("ts"),
                )
        store.events_path = None if events_path is None else Path(events_path)
        return store

    def session(self, annotator: str) -> Session:
        if annotator not in self.sessions:
            raise UnknownAnnotator(f"unknown annotator {annotator!r}")
        return self.sessions[annotator]

    def record_answer(self, annotator, item, chosen, elapsed_ms=None, ts=None):
        with self._lock:
            session = self.session(annotator)
            if not (0 <= item < len(session.items)):
                raise ValueError(f"item {item} out of range")
            if chosen is not None and not (
                0 <= chosen < len(session.items[item].candidates)
            ):
                raise ValueError(f"chosen index {chosen} out of range")
            if session.answers[item] is not None:
                raise DuplicateAnswer(
                    f"item {item} already answered by {annotator!r}"
                )
            ts = time.time() if ts is None else ts
            session.answers[item] = chosen
            session.timestamps[item] = ts
            if self.events_path is not None:
                event = {"annotator": annotator, "item": item, "chosen": chosen, "ts": ts}
                if elapsed_ms is not None:
                    event["elapsed_ms"] = elapsed_ms
                with open(self.events_path, "a") as fh:
                    fh.write(json.dumps(event) + "\n")

    def report(self) -> HumanReport:
        return score_report(list(self.sessions.values()))


# ---------------------------------------------------------------------------
# HTTP API


def image_to_png_bytes(image) -> bytes:
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    raw = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(raw, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(store: SessionStore, image_loader, static_dir=None):
    """FastAPI app over a SessionStore.

    ``image_loader(ref)`` must return a float (3, H, W) image for any ref
    appearing in the sessions; refs outside its domain raise KeyError or
    IndexError, mapped to 404.
    """
    from fastapi import FastAPI, HTTPException, Response
    from fastapi.staticfiles import StaticFiles
    from pydantic import BaseModel

    class AnswerBody(BaseModel):
        item: int
        chosen: int
        elapsed_ms: float | None = None

    app = FastAPI(title="human evaluation")

    @app.get("/api/annotator/{annotator}/next")
    def next_item(annotator: str):
        try:
            session = store.session(annotator)
        except UnknownAnnotator as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        idx = session.next_unanswered()
        payload = {
            "annotator": annotator,
            "answered": session.answered_count(),
            "total": len(session.items),
        }
        if idx is None:
            payload["done"] = True
            return payload
        item = session.items[idx]
        payload.update(
            {
                "done": False,
                "item": idx,
                "query": f"/images/{item.query_ref}",
                "candidates": [f"/images/{ref}" for ref in item.displayed_refs()],
            }
        )
        return payload

    @app.post("/api/annotator/{annotator}/answer")
    def answer(annotator: str, body: AnswerBody):
        try:
            store.record_answer(annotator, body.item, body.chosen, body.elapsed_ms)
        except UnknownAnnotator as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except DuplicateAnswer as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"recorded": True}

    @app.get("/api/report")
    def report():
        try:
            rep = store.report()
        except ValueError:
            return {"per_annotator": {}, "best": None, "best_annotator": None}
        return json.loads(rep.to_json())

    @app.get("/images/{ref}")
    def image(ref: int):
        try:
            img = image_loader(ref)
        except (KeyError, IndexError) as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return Response(content=image_to_png_bytes(img), media_type="image/png")

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    return app


def serve(store, image_loader, static_dir=None, host="127.0.0.1", port=8008):
    import uvicorn

    app = create_app(store, image_loader, static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
