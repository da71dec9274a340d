"""HTTP API for the human review stage.

Serves auto-accepted queries as annotation tasks, records ratings against
the three review criteria (relevance, answerability, multi-hop necessity)
and finalizes the dataset export. Optionally hosts the built review UI.
"""

from __future__ import annotations

import threading
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .answerability import HumanRating
from .config import PipelineConfig
from .datastore import Workspace
from .pipeline import PipelineError, stage_finalize, workspace_for


class RatingPayload(BaseModel):
    annotator_id: str = Field(min_length=1)
    relevance: bool
    answerability_1to3: int = Field(ge=1, le=3)
    multihop_necessary: bool | None = None
    irrelevant_passage_ids: list[str] = Field(default_factory=list)


class ReviewSession:
    """In-memory task queue over the workspace; ratings append to JSONL.

    Claiming is optimistic: the first rating for a task wins, later ones
    get a conflict. The rated set is seeded from ratings already on disk
    so a restarted server never re-serves finished tasks.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.workspace: Workspace = workspace_for(config)
        state = self.workspace.load_state()
        unchecked = [q for q in state.queries_with_status("accepted")
                     if q.is_multi and q.query_id not in state.verdicts]
        if unchecked:
            raise PipelineError(
                f"{len(unchecked)} accepted multi-document queries lack a dependency "
                f"verdict; run the dep-check stage before annotation")
        self.tasks: dict[str, dict] = {}
        for query in state.queries_with_status("accepted"):
            score = state.scores.get(query.query_id)
            self.tasks[query.query_id] = {
                "query_id": query.query_id,
                "query_text": query.text,
                "query_type": query.query_type,
                "n_docs": len(query.source_passage_ids),
                "auto_score": score.score if score else None,
                "passages": [
                    {"passage_id": p.passage_id,
                     "metadata_header": p.metadata_header,
                     "text": p.text}
                    for p in (state.corpus.get(pid) for pid in query.source_passage_ids)
                ],
            }
        self.rated: set[str] = set(state.ratings) & set(self.tasks)
        self._lock = threading.Lock()

    def task_view(self, query_id: str) -> dict:
        status = "rated" if query_id in self.rated else "pending"
        return {**self.tasks[query_id], "status": status}

    def next_pending(self) -> str | None:
        for query_id in sorted(self.tasks):
            if query_id not in self.rated:
                return query_id
        return None

    def remaining(self) -> int:
        return len(self.tasks) - len(self.rated)

    def validate_payload(self, query_id: str, payload: RatingPayload) -> list[dict]:
        task = self.tasks[query_id]
        errors = []
        if task["n_docs"] > 1:
            if payload.multihop_necessary is None:
                errors.append({"field": "multihop_necessary",
                               "message": "required for multi-document tasks"})
        else:
            if payload.multihop_necessary is not None:
                errors.append({"field": "multihop_necessary",
                               "message": "only allowed for multi-document tasks"})
            if payload.irrelevant_passage_ids:
                errors.append({"field": "irrelevant_passage_ids",
                               "message": "only allowed for multi-document tasks"})
        known = {p["passage_id"] for p in task["passages"]}
        unknown = sorted(set(payload.irrelevant_passage_ids) - known)
        if unknown:
            errors.append({"field": "irrelevant_passage_ids",
                           "message": f"not part of this task: {unknown}"})
        return errors

    def record(self, query_id: str, payload: RatingPayload) -> int:
        """Store the rating; raises on conflict. Returns remaining count."""
        with self._lock:
            if query_id in self.rated:
                raise KeyError(query_id)
            rating = HumanRating(
                query_id=query_id,
                annotator_id=payload.annotator_id,
                answerability_1to3=payload.answerability_1to3,
                relevance=payload.relevance,
                multihop_necessary=payload.multihop_necessary,
                irrelevant_passage_ids=list(dict.fromkeys(payload.irrelevant_passage_ids)),
            )
            self.workspace.append_rating(rating)
            self.rated.add(query_id)
            return self.remaining()

    def progress(self) -> dict:
        by_type: dict[str, dict[str, int]] = {}
        for task in self.tasks.values():
            slot = by_type.setdefault(task["query_type"], {"total": 0, "rated": 0})
            slot["total"] += 1
            slot["rated"] += task["query_id"] in self.rated
        return {
            "total": len(self.tasks),
            "rated": len(self.rated),
            "remaining": self.remaining(),
            "by_type": by_type,
        }


def create_app(config: PipelineConfig, ui_dist: Path | None = None) -> FastAPI:
    session = ReviewSession(config)
    app = FastAPI(title="querybench annotation service")
    app.state.session = session

    def require_token(request: Request) -> None:
        token = config.annotation.token
        if token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or bad bearer token")

    guarded = [Depends(require_token)]

    @app.get("/tasks/next", dependencies=guarded)
    def next_task() -> dict:
        query_id = session.next_pending()
        return {
            "task": session.task_view(query_id) if query_id else None,
            "remaining": session.remaining(),
        }

    @app.get("/tasks/{query_id}", dependencies=guarded)
    def get_task(query_id: str) -> dict:
        if query_id not in session.tasks:
            raise HTTPException(status_code=404, detail=f"no task for query {query_id}")
        return {"task": session.task_view(query_id)}

    @app.post("/tasks/{query_id}/rating", status_code=201, dependencies=guarded)
    def post_rating(query_id: str, payload: RatingPayload) -> dict:
        if query_id not in session.tasks:
            raise HTTPException(status_code=404, detail=f"no task for query {query_id}")
        errors = session.validate_payload(query_id, payload)
        if errors:
            raise HTTPException(status_code=422, detail=errors)
        try:
            remaining = session.record(query_id, payload)
        except KeyError:
            raise HTTPException(status_code=409,
                                detail=f"task {query_id} is already rated") from None
        return {"recorded": query_id, "remaining": remaining}

    @app.get("/progress", dependencies=guarded)
    def progress() -> dict:
        return session.progress()

    @app.post("/finalize", dependencies=guarded)
    def finalize() -> dict:
        report = stage_finalize(config)
        return report.to_dict()

    if ui_dist is not None:
        if not Path(ui_dist).is_dir():
            raise PipelineError(f"UI bundle directory not found: {ui_dist}")
        app.mount("/", StaticFiles(directory=str(ui_dist), html=True), name="ui")

    return app
