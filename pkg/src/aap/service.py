"""HTTP surface: submit pruning runs, poll their progress, pull reports."""

from __future__ import annotations

import threading
import traceback
import uuid
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import checkpoint as ckpt_store
from .config import RunConfig
from .runner import REPORT_KINDS, bench, execute_run, write_report

app = FastAPI(title="aap", description="Adaptive attention-based filter pruning")


class RunState(BaseModel):
    run_id: str
    status: str  # pending | running | done | failed
    run_dir: Optional[str] = None
    error: Optional[str] = None


class RunSubmitted(BaseModel):
    run_id: str
    run_dir: str


class ReportRequest(BaseModel):
    run_dir: str
    kind: str


class ReportResponse(BaseModel):
    csv_path: str


class BenchRequest(BaseModel):
    run_dir: str
    checkpoint: Optional[str] = None  # defaults to the run's final checkpoint
    trials: int = 10


class InspectRequest(BaseModel):
    checkpoint: str


_runs: dict[str, RunState] = {}
_lock = threading.Lock()


def _execute(run_id: str, config: RunConfig, run_dir: Path) -> None:
    with _lock:
        _runs[run_id].status = "running"
    try:
        execute_run(config, run_dir)
        with _lock:
            _runs[run_id].status = "done"
    except Exception:
        with _lock:
            _runs[run_id].status = "failed"
            _runs[run_id].error = traceback.format_exc(limit=5)


@app.post("/runs", response_model=RunSubmitted)
def submit_run(config: RunConfig, background: bool = True):
    run_id = uuid.uuid4().hex[:12]
    run_dir = Path(config.output_dir) / f"run-{run_id}"
    with _lock:
        _runs[run_id] = RunState(run_id=run_id, status="pending", run_dir=str(run_dir))
    if background:
        threading.Thread(target=_execute, args=(run_id, config, run_dir),
                         daemon=True).start()
    else:
        _execute(run_id, config, run_dir)
    return RunSubmitted(run_id=run_id, run_dir=str(run_dir))


@app.get("/runs/{run_id}", response_model=RunState)
def run_status(run_id: str):
    with _lock:
        state = _runs.get(run_id)
    if state is None:
        raise HTTPException(404, f"unknown run {run_id}")
    return state


@app.get("/runs/{run_id}/summary")
def run_summary(run_id: str):
    with _lock:
        state = _runs.get(run_id)
    if state is None:
        raise HTTPException(404, f"unknown run {run_id}")
    if state.status != "done":
        raise HTTPException(409, f"run {run_id} is {state.status}")
    import json
    return json.loads((Path(state.run_dir) / "summary.json").read_text())


@app.post("/reports", response_model=ReportResponse)
def make_report(req: ReportRequest):
    if req.kind not in REPORT_KINDS:
        raise HTTPException(422, f"kind must be one of {REPORT_KINDS}")
    try:
        path = write_report(req.run_dir, req.kind)
    except FileNotFoundError as e:
        raise HTTPException(404, str(e))
    return ReportResponse(csv_path=str(path))


@app.post("/bench")
def run_bench(req: BenchRequest):
    run_dir = Path(req.run_dir)
    ckpt = req.checkpoint
    if ckpt is None:
        import json
        summary = json.loads((run_dir / "summary.json").read_text())
        ckpt = run_dir / "checkpoints" / f"round_{summary['final_round']:04d}.aap"
    try:
        return bench(ckpt, trials=req.trials, run_dir=run_dir)
    except FileNotFoundError as e:
        raise HTTPException(404, str(e))


@app.post("/inspect")
def inspect(req: InspectRequest):
    try:
        return ckpt_store.read_header(req.checkpoint)
    except FileNotFoundError as e:
        raise HTTPException(404, str(e))
