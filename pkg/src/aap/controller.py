"""Adaptive iterative pruning orchestrator.

One pruning round: score filters, prune those at or below their layer-local
threshold, rewind surviving weights to the early-epoch snapshot, retrain,
evaluate against the policy, then either raise the global threshold or roll
back and halve the step. Terminates when the model size stops changing for a
window of acceptable rounds, when the target is met, or at max_rounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from . import checkpoint as ckpt_store
from .accounting import cost_table, local_thresholds, reductions
from .attention import AttentionReport, evaluate_model_attentions
from .config import AttentionConfig, PolicyConfig, TrainConfig
from .data import Dataset
from .graph import ModelGraph
from .training import OptimizerState, evaluate_accuracy, train_run


class TrainerBackend(Protocol):
    def baseline(self, model: ModelGraph) -> float: ...
    def rewind(self, model: ModelGraph) -> None: ...
    def retrain(self, model: ModelGraph) -> float: ...
    def attentions(self, model: ModelGraph, round_index: int) -> AttentionReport: ...


class SubstrateTrainer:
    """Real train/evaluate cycle over the dense-network engine."""

    def __init__(self, train_set: Dataset, test_set: Dataset,
                 train_config: TrainConfig, attention_config: AttentionConfig,
                 rewind_epoch: int):
        self.train_set = train_set
        self.test_set = test_set
        self.config = train_config
        self.attention_config = attention_config
        self.rewind_epoch = rewind_epoch
        self._rewind_weights: dict[int, dict[str, np.ndarray]] = {}

    def baseline(self, model: ModelGraph) -> float:
        k, e = self.rewind_epoch, self.config.total_epochs
        state = train_run(model, self.train_set, self.config, 0, k)
        self._rewind_weights = {
            i: {key: v.copy() for key, v in p.items()} for i, p in model.params.items()
        }
        train_run(model, self.train_set, self.config, k, e, state=state)
        return evaluate_accuracy(model, self.test_set)

    def rewind(self, model: ModelGraph) -> None:
        for i, p in model.params.items():
            p["w"][...] = self._rewind_weights[i]["w"]
            p["b"][...] = self._rewind_weights[i]["b"]
        model.apply_masks()

    def retrain(self, model: ModelGraph) -> float:
        train_run(model, self.train_set, self.config,
                  self.rewind_epoch, self.config.total_epochs,
                  state=OptimizerState.zeros_like(model))
        return evaluate_accuracy(model, self.test_set)

    def attentions(self, model: ModelGraph, round_index: int) -> AttentionReport:
        return evaluate_model_attentions(model, self.train_set,
                                         self.attention_config, round_index)


@dataclass
class RoundRecord:
    round_index: int
    threshold: float
    step: float
    local_thresholds: dict[int, float]
    pruned_counts: dict[int, int]
    accuracy: float
    acc_loss: float
    param_red: float
    flops_red: float
    params_total: int
    flops_total: int
    acceptable: bool
    rollback_count: int = 0        # times this round has been rolled back TO
    rollback_to: Optional[int] = None  # set on rounds that triggered a rollback
    checkpoint_ref: Optional[str] = None
    attention_rows: list = field(default_factory=list)  # (layer, filter, score)

    def to_json(self) -> dict:
        d = asdict(self)
        d["local_thresholds"] = {str(k): v for k, v in d["local_thresholds"].items()}
        d["pruned_counts"] = {str(k): v for k, v in d["pruned_counts"].items()}
        return d


def policy_accept(acc_loss: float, param_red: float, flops_red: float,
                  policy: PolicyConfig) -> bool:
    """Whether a round keeps the pruning loop in its keep-going branch."""
    if policy.objective == "accuracy_guaranteed":
        return acc_loss < policy.acc_loss_target
    if policy.objective == "memory_constrained":
        return param_red < policy.param_target
    if policy.objective == "flops_constrained":
        return flops_red < policy.flops_target
    # multi: acceptable while the accuracy constraint (if any) holds and the
    # reduction targets are not all met yet
    acc_ok = policy.acc_loss_target is None or acc_loss < policy.acc_loss_target
    return acc_ok and not _targets_met(acc_loss, param_red, flops_red, policy)


def _targets_met(acc_loss: float, param_red: float, flops_red: float,
                 policy: PolicyConfig) -> bool:
    """All configured reduction targets reached (and accuracy within bounds)."""
    if policy.objective == "accuracy_guaranteed":
        return False
    met = True
    if policy.param_target is not None:
        met &= param_red >= policy.param_target
    if policy.flops_target is not None and policy.objective in ("flops_constrained", "multi"):
        met &= flops_red >= policy.flops_target
    if policy.objective == "multi" and policy.acc_loss_target is not None:
        met &= acc_loss < policy.acc_loss_target
    return met


def accounting_goal(policy: PolicyConfig) -> str:
    if policy.objective == "flops_constrained":
        return "flops"
    if policy.objective == "multi":
        return "params" if policy.param_target is not None else "flops"
    if policy.objective == "accuracy_guaranteed":
        return policy.minimize_metric
    return "params"


def check_convergence(records: list[RoundRecord], policy: PolicyConfig,
                      baseline_metric: float, goal: str) -> bool:
    """Model-size change below epsilon for the last `convergence_window`
    acceptable rounds (each compared to the preceding acceptable round)."""
    acceptable = [r for r in records if r.round_index > 0 and r.acceptable]
    if len(acceptable) < policy.convergence_window:
        return False
    metric = (lambda r: r.params_total) if goal == "params" else (lambda r: r.flops_total)
    window = acceptable[-policy.convergence_window:]
    prev_all = [r for r in records if r.acceptable]  # includes round 0
    for rec in window:
        pos = prev_all.index(rec)
        prev = prev_all[pos - 1]
        change = abs(metric(prev) - metric(rec)) / baseline_metric * 100.0
        if change >= policy.convergence_epsilon:
            return False
    return True


def stability(pruned_model: ModelGraph, original_model: ModelGraph,
              masks: Optional[dict[int, np.ndarray]] = None) -> float:
    """L2 distance between the two models' weights over mask-active coordinates."""
    if [s.kind for s in pruned_model.specs] != [s.kind for s in original_model.specs]:
        raise ValueError("architectures differ")
    if masks is None:
        masks = pruned_model.masks
    total = 0.0
    for i in pruned_model.param_layers():
        wp = pruned_model.params[i]["w"]
        wo = original_model.params[i]["w"]
        if wp.shape != wo.shape:
            raise ValueError(f"layer {i} weight shapes differ: {wp.shape} vs {wo.shape}")
        diff = (wp.astype(np.float64) - wo.astype(np.float64)) ** 2
        if i in masks:
            diff = diff[masks[i]]
        total += float(diff.sum())
    return math.sqrt(total)


@dataclass
class _Snapshot:
    weights: dict[int, dict[str, np.ndarray]]
    masks: dict[int, np.ndarray]

    @classmethod
    def of(cls, model: ModelGraph) -> "_Snapshot":
        return cls(
            {i: {k: v.copy() for k, v in p.items()} for i, p in model.params.items()},
            {i: m.copy() for i, m in model.masks.items()},
        )

    def restore(self, model: ModelGraph) -> None:
        for i, p in model.params.items():
            p["w"][...] = self.weights[i]["w"]
            p["b"][...] = self.weights[i]["b"]
        for i in model.masks:
            model.masks[i][...] = self.masks[i]
        model.apply_masks()


class PruningRun:
    """Executes the adaptive pruning loop and collects per-round records."""

    def __init__(self, model: ModelGraph, trainer: TrainerBackend,
                 policy: PolicyConfig,
                 checkpoint_dir: Optional[Path] = None,
                 emit: Optional[Callable[[dict], None]] = None,
                 keep_attention_rows: bool = True):
        self.model = model
        self.trainer = trainer
        self.policy = policy
        self.goal = accounting_goal(policy)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.emit = emit
        self.keep_attention_rows = keep_attention_rows
        self.records: list[RoundRecord] = []
        self.snapshots: dict[int, _Snapshot] = {}
        self.rollback_counts: dict[int, int] = {}
        self.baseline_accuracy: float = 0.0
        self.base_table = None

    # -------------- helpers --------------

    def _save_round(self, record: RoundRecord) -> None:
        self.snapshots[record.round_index] = _Snapshot.of(self.model)
        if self.checkpoint_dir is not None:
            path = self.checkpoint_dir / f"round_{record.round_index:04d}.aap"
            ckpt_store.save(self.model, meta={
                "round": record.round_index, "T": record.threshold,
                "lambda": record.step, "accuracy": record.accuracy,
                "param_red": record.param_red, "flops_red": record.flops_red,
            }, path=path, round_index=record.round_index)
            record.checkpoint_ref = str(path)

    def _gc_round(self, record: RoundRecord) -> None:
        if record.checkpoint_ref and record.round_index != 0:
            p = Path(record.checkpoint_ref)
            if p.exists():
                p.unlink()
            record.checkpoint_ref = None

    def _emit(self, record: RoundRecord) -> None:
        if self.emit is not None:
            self.emit(record.to_json())

    def _prune_round(self, report: AttentionReport, thresholds: dict[int, float],
                     ) -> dict[int, int]:
        pruned = {}
        for layer, th in thresholds.items():
            scores = report.scores[layer]
            indices = report.filter_indices[layer]
            below = scores <= th
            order = np.argsort(scores[below], kind="stable")
            doomed = [int(j) for j in indices[below][order]]
            if doomed:
                result = self.model.prune_filters(layer, doomed)
                pruned[layer] = len(result.pruned)
            else:
                pruned[layer] = 0
        return pruned

    def _find_rollback_target(self) -> Optional[RoundRecord]:
        """Last acceptable round; rounds past their retry limit get marked
        unacceptable and skipped. Round 0 is always an admissible target."""
        while True:
            candidates = [r for r in self.records if r.acceptable]
            if not candidates:
                return None
            target = candidates[-1]
            if target.round_index == 0:
                return target
            if self.rollback_counts.get(target.round_index, 0) >= self.policy.rollback_retry_limit:
                target.acceptable = False
                self._gc_round(target)
                continue
            return target

    # -------------- main loop --------------

    def run(self) -> tuple[ModelGraph, list[RoundRecord]]:
        acc0 = self.trainer.baseline(self.model)
        self.baseline_accuracy = acc0
        self.base_table = cost_table(self.model)
        base = self.base_table

        record0 = RoundRecord(
            round_index=0, threshold=self.policy.t0, step=self.policy.lambda0,
            local_thresholds={}, pruned_counts={}, accuracy=acc0, acc_loss=0.0,
            param_red=0.0, flops_red=0.0, params_total=base.total_params,
            flops_total=base.total_flops, acceptable=True)
        self._save_round(record0)
        self.records.append(record0)
        self._emit(record0)

        t = self.policy.t0
        lam = self.policy.lambda0
        baseline_metric = base.total_params if self.goal == "params" else base.total_flops

        for r in range(1, self.policy.max_rounds + 1):
            report = self.trainer.attentions(self.model, r)
            thresholds = local_thresholds(cost_table(self.model), t, self.goal)
            pruned_counts = self._prune_round(report, thresholds)
            self.trainer.rewind(self.model)
            acc = self.trainer.retrain(self.model)

            now = cost_table(self.model)
            param_red, flops_red = reductions(now, base)
            acc_loss = acc0 - acc
            acceptable = policy_accept(acc_loss, param_red, flops_red, self.policy)

            record = RoundRecord(
                round_index=r, threshold=t, step=lam,
                local_thresholds=thresholds, pruned_counts=pruned_counts,
                accuracy=acc, acc_loss=acc_loss, param_red=param_red,
                flops_red=flops_red, params_total=now.total_params,
                flops_total=now.total_flops, acceptable=acceptable,
                attention_rows=list(report.as_rows()) if self.keep_attention_rows else [])
            self._save_round(record)
            self.records.append(record)

            if acceptable:
                self._emit(record)
                if check_convergence(self.records, self.policy, baseline_metric, self.goal):
                    break
                t = t + lam
            else:
                target = self._find_rollback_target()
                if target is None:
                    break  # pathological target: report the unpruned model
                c = self.rollback_counts.get(target.round_index, 0)
                self.snapshots[target.round_index].restore(self.model)
                lam = target.step / (2.0 ** (c + 1))
                t = target.threshold + lam
                self.rollback_counts[target.round_index] = c + 1
                record.rollback_to = target.round_index
                record.rollback_count = c + 1
                self._gc_round(record)
                self._emit(record)

        final = self._select_final()
        return self.model, self.records

    def _select_final(self) -> RoundRecord:
        """Restore the model to the round the policy reports as final."""
        metric = (lambda r: r.param_red) if self.goal == "params" else (lambda r: r.flops_red)
        if self.policy.objective == "accuracy_guaranteed":
            ok = [r for r in self.records
                  if r.round_index == 0 or r.acc_loss < self.policy.acc_loss_target]
            best = max(ok, key=metric)
        else:
            met = [r for r in self.records
                   if _targets_met(r.acc_loss, r.param_red, r.flops_red, self.policy)]
            if met:
                best = max(met, key=lambda r: (r.accuracy, -r.round_index))
            else:
                ok = [r for r in self.records if r.acceptable or r.round_index == 0]
                best = max(ok, key=metric)
        self.snapshots[best.round_index].restore(self.model)
        if self.checkpoint_dir is not None and best.checkpoint_ref is None:
            path = self.checkpoint_dir / f"round_{best.round_index:04d}.aap"
            ckpt_store.save(self.model, meta={"round": best.round_index},
                            path=path, round_index=best.round_index)
            best.checkpoint_ref = str(path)
        self.final_record = best
        return best


def run_pruning(model: ModelGraph, trainer: TrainerBackend, policy: PolicyConfig,
                checkpoint_dir=None, emit=None, keep_attention_rows=True,
                ) -> tuple[ModelGraph, list[RoundRecord]]:
    run = PruningRun(model, trainer, policy, checkpoint_dir, emit, keep_attention_rows)
    return run.run()
