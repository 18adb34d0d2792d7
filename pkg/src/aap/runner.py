"""Run orchestration: builds model/dataset/trainer from a RunConfig, executes
the pruning loop into a self-describing run directory, and renders reports."""

from __future__ import annotations

import csv
import json
import time
import uuid
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_store
from .accounting import cost_table
from .config import RunConfig
from .controller import PruningRun, SubstrateTrainer, accounting_goal, stability
from .data import Dataset, load_mnist, synthetic_blobs
from .graph import ModelGraph, build_preset
from .oracle import OracleTrainer

REPORT_KINDS = ("trace", "sparsity", "attention", "stability")


def build_model(config: RunConfig) -> ModelGraph:
    num_classes = 10 if config.dataset == "mnist" else config.synthetic.num_classes
    model = build_preset(config.model, num_classes=num_classes,
                         image_size=config.synthetic.image_size)
    model.init_params(config.seed)
    return model


def build_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "mnist":
        return load_mnist(config.data_dir)
    s = config.synthetic
    return synthetic_blobs(s.num_classes, s.n_train, s.n_test,
                           s.image_size, s.noise, seed=config.seed)


def build_trainer(config: RunConfig, train_set: Dataset, test_set: Dataset):
    if config.trainer == "oracle":
        policy_goal = accounting_goal(config.policy)
        return OracleTrainer(config.oracle, policy_goal)
    k = config.policy.effective_rewind_epoch(config.train.total_epochs)
    return SubstrateTrainer(train_set, test_set, config.train, config.attention, k)


def execute_run(config: RunConfig, run_dir=None) -> Path:
    """Run the full pruning pipeline; returns the populated run directory."""
    t_start = time.monotonic()
    if run_dir is None:
        run_dir = Path(config.output_dir) / f"run-{uuid.uuid4().hex[:8]}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.model_dump_json(indent=2))

    model = build_model(config)
    if config.trainer == "oracle":
        train_set = test_set = None
    else:
        train_set, test_set = build_datasets(config)
    trainer = build_trainer(config, train_set, test_set)

    trace_path = run_dir / "trace.jsonl"
    with open(trace_path, "w") as trace:
        def emit(rec: dict) -> None:
            trace.write(json.dumps(rec) + "\n")
            trace.flush()

        run = PruningRun(model, trainer, config.policy,
                         checkpoint_dir=run_dir / "checkpoints", emit=emit)
        final_model, records = run.run()

    final = run.final_record
    summary = {
        "acc_loss_pct": final.acc_loss,
        "params_red_pct": final.param_red,
        "flops_red_pct": final.flops_red,
        "rounds": records[-1].round_index,
        "final_round": final.round_index,
        "baseline_accuracy": run.baseline_accuracy,
        "final_accuracy": final.accuracy,
        "wall_time": time.monotonic() - t_start,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return run_dir


def _load_trace(run_dir: Path) -> list[dict]:
    path = run_dir / "trace.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no trace.jsonl in {run_dir}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _final_checkpoint(run_dir: Path):
    summary = json.loads((run_dir / "summary.json").read_text())
    path = run_dir / "checkpoints" / f"round_{summary['final_round']:04d}.aap"
    return ckpt_store.load(path)


def model_from_checkpoint(run_dir: Path, ckpt=None) -> ModelGraph:
    config = RunConfig.model_validate_json((run_dir / "config.json").read_text())
    model = build_model(config)
    if ckpt is None:
        ckpt = _final_checkpoint(run_dir)
    ckpt_store.rollback(model, ckpt)
    return model


def write_report(run_dir, kind: str) -> Path:
    """Render one plot-ready CSV from a run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"unknown run dir {run_dir}")
    if kind not in REPORT_KINDS:
        raise ValueError(f"unknown report kind {kind!r}; expected one of {REPORT_KINDS}")
    out = run_dir / f"report_{kind}.csv"
    rows: list[list] = []
    if kind == "trace":
        header = ["round", "T", "lambda", "acc_loss", "param_red"]
        for rec in _load_trace(run_dir):
            rows.append([rec["round_index"], rec["threshold"], rec["step"],
                         rec["acc_loss"], rec["param_red"]])
    elif kind == "sparsity":
        header = ["layer", "active", "total", "sparsity_pct"]
        ckpt = _final_checkpoint(run_dir)
        for layer, mask in sorted(ckpt.masks.items()):
            active = int(mask.sum())
            rows.append([layer, active, mask.size,
                         100.0 * (1 - active / mask.size)])
    elif kind == "attention":
        header = ["layer", "filter", "score", "batch_id"]
        for rec in _load_trace(run_dir):
            for layer, filt, score in rec.get("attention_rows", []):
                rows.append([layer, filt, score, rec["round_index"]])
    else:  # stability
        header = ["rewind_epoch", "l2"]
        config = RunConfig.model_validate_json((run_dir / "config.json").read_text())
        k = config.policy.effective_rewind_epoch(config.train.total_epochs)
        ckpt_final = _final_checkpoint(run_dir)
        ckpt0 = ckpt_store.load(run_dir / "checkpoints" / "round_0000.aap")
        pruned = model_from_checkpoint(run_dir, ckpt_final)
        original = model_from_checkpoint(run_dir, ckpt0)
        rows.append([k, stability(pruned, original)])
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return out


def bench(checkpoint_path, trials: int = 10, batch_size: int = 32,
          model: ModelGraph = None, run_dir=None) -> dict:
    """Forward latency of the masked vs. compacted model."""
    if model is None:
        if run_dir is not None:
            model = model_from_checkpoint(Path(run_dir), ckpt_store.load(checkpoint_path))
        else:
            raise ValueError("need a run_dir (for the architecture) or a model")
    compacted = model.compact()
    rng = np.random.default_rng(0)
    x = rng.random((batch_size, *model.input_shape), dtype=np.float32)

    def time_forward(m):
        times = []
        m.forward(x)  # warmup
        for _ in range(trials):
            t0 = time.perf_counter()
            m.forward(x)
            times.append(time.perf_counter() - t0)
        return times

    masked_t = time_forward(model)
    compact_t = time_forward(compacted)
    report = {
        "trials": trials,
        "masked_mean_s": float(np.mean(masked_t)),
        "masked_min_s": float(np.min(masked_t)),
        "compact_mean_s": float(np.mean(compact_t)),
        "compact_min_s": float(np.min(compact_t)),
        "speedup": float(np.mean(masked_t) / np.mean(compact_t)),
    }
    if trials > 1:
        report["masked_std_s"] = float(np.std(masked_t))
        report["compact_std_s"] = float(np.std(compact_t))
    return report
