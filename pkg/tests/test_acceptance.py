"""End-to-end acceptance gate.

One test per criterion, each printing a single PASS/FAIL/SKIP line (visible
with ``pytest -s`` or ``-rA``). Criteria needing the MNIST IDX files skip with
a reason when the files are absent; synthetic-data analogs of those scenarios
run unconditionally so the pipeline is still exercised end to end.
"""

import hashlib
import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.stats import spearmanr

from aap import checkpoint as ckpt_store
from aap.accounting import cost_table, layer_flops, layer_params
from aap.attention import (attention_value, attentions_for_batch,
                           evaluate_model_attentions)
from aap.config import (AttentionConfig, OracleSpec, PolicyConfig, TrainConfig)
from aap.controller import PruningRun, SubstrateTrainer, stability
from aap.data import load_mnist, mnist_available, synthetic_blobs
from aap.graph import LayerSpec, ModelGraph, lenet5, lenet300, smallconv
from aap.nn import cross_entropy_loss
from aap.oracle import OracleTrainer
from aap.training import OptimizerState, evaluate_accuracy, train_run

from conftest import random_model
from test_accounting import brute_force_costs

MNIST_REASON = "MNIST IDX files not present under AAP_DATA_DIR"
FULL_REASON = "full-budget run disabled (set AAP_FULL_RUN=1 with MNIST present)"


@contextmanager
def criterion(num, label):
    try:
        yield
    except BaseException as e:
        verdict = "SKIP" if isinstance(e, pytest.skip.Exception) else "FAIL"
        print(f"\nCRITERION {num} [{label}]: {verdict}")
        raise
    print(f"\nCRITERION {num} [{label}]: PASS")


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def synth():
    return synthetic_blobs(4, 2048, 512, 16, seed=0)


@pytest.fixture(scope="module")
def substrate_run(synth, tmp_path_factory):
    """Memory-constrained pruning of a small conv net on synthetic data."""
    train, test = synth
    ckpt_dir = tmp_path_factory.mktemp("substrate-ckpts")
    tcfg = TrainConfig(initial_lr=0.05, total_epochs=10, batch_size=64, seed=0)
    acfg = AttentionConfig(batch_size=256)
    policy = PolicyConfig(objective="memory_constrained", param_target=40.0,
                          lambda0=0.05, convergence_window=4, max_rounds=40)
    model = smallconv(4, 16).init_params(0)
    trainer = SubstrateTrainer(train, test, tcfg, acfg, rewind_epoch=8)
    run = PruningRun(model, trainer, policy, checkpoint_dir=ckpt_dir,
                     keep_attention_rows=False)
    run.run()
    return run, trainer, tcfg, acfg


def wide_conv(num_classes=4, image_size=16, width=32):
    """Conv net with enough filters per layer for meaningful rank statistics."""
    feat = width * (image_size // 4) ** 2
    specs = [
        LayerSpec("conv2d", in_channels=1, out_channels=width, kernel=3,
                  padding=1, prunable=True),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", pool_size=2),
        LayerSpec("conv2d", in_channels=width, out_channels=width, kernel=3,
                  padding=1, prunable=True),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", pool_size=2),
        LayerSpec("flatten"),
        LayerSpec("linear", in_units=feat, out_units=32, prunable=True),
        LayerSpec("relu"),
        LayerSpec("linear", in_units=32, out_units=num_classes),
    ]
    return ModelGraph(specs, (1, image_size, image_size))


def model_state_hash(model):
    h = hashlib.sha256()
    for i in sorted(model.params):
        h.update(model.params[i]["w"].tobytes())
        h.update(model.params[i]["b"].tobytes())
    for i in sorted(model.masks):
        h.update(np.packbits(model.masks[i]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- criteria

class TestCriterion1:
    def test_cost_formulas_exact(self):
        with criterion(1, "cost formula exactness"):
            t0 = time.monotonic()
            assert layer_params(1, 5, 6) == 150
            assert layer_params(6, 5, 16) == 2400
            assert layer_flops(24, 24, 150) == 172800
            models = [lenet5().init_params(0)]
            models += [random_model(seed) for seed in range(20)]
            for m in models:
                ct = cost_table(m)
                p, f = brute_force_costs(m)
                assert ct.total_params == p
                assert ct.total_flops == f
            assert time.monotonic() - t0 < 1.0


class TestCriterion2:
    def test_backprop_matches_finite_differences(self):
        with criterion(2, "gradient correctness"):
            t0 = time.monotonic()
            worst = 0.0
            for seed in range(5):
                m = random_model(seed + 100).astype(np.float64)
                rng = np.random.default_rng(seed)
                # nonzero biases keep pre-ReLU values off the kink at 0,
                # where central differences disagree with any subgradient
                for p in m.params.values():
                    p["b"][...] = rng.standard_normal(p["b"].shape) * 0.1
                x = rng.standard_normal((3, *m.input_shape))
                y = rng.integers(0, 4, 3)
                _, grads = m.loss_and_grads(x, y)

                def loss():
                    logits, _, _ = m.forward(x)
                    return cross_entropy_loss(logits, y)[0]

                eps = 1e-5
                for i, p in m.params.items():
                    for key in ("w", "b"):
                        flat = p[key].ravel()
                        g = grads[i][key].ravel()
                        coords = np.arange(flat.size)
                        if flat.size > 300:
                            coords = rng.choice(flat.size, 300, replace=False)
                        for j in coords:
                            orig = flat[j]
                            flat[j] = orig + eps
                            lp = loss()
                            flat[j] = orig - eps
                            lm = loss()
                            flat[j] = orig
                            fd = (lp - lm) / (2 * eps)
                            denom = max(abs(fd), abs(g[j]), 1e-3)
                            worst = max(worst, abs(fd - g[j]) / denom)
            assert worst < 1e-4
            assert time.monotonic() - t0 < 30.0


class TestCriterion3:
    def test_masked_equals_compacted(self):
        with criterion(3, "masked/compacted equivalence"):
            t0 = time.monotonic()
            archs = [lambda: lenet5().init_params(7),
                     lambda: smallconv(4, 16).init_params(7),
                     lambda: random_model(301)]
            rng = np.random.default_rng(3)
            states = 0
            while states < 50:
                m = archs[states % 3]()
                for layer in m.prunable_layers():
                    n = m.masks[layer].size
                    k = int(rng.integers(0, n))
                    if k:
                        m.prune_filters(layer, rng.choice(n, k, replace=False))
                compacted = m.compact()
                x = rng.random((20, *m.input_shape), dtype=np.float32)
                a, _, _ = m.forward(x)
                b, _, _ = compacted.forward(x)
                rel = np.abs(a - b).max() / (np.abs(b).max() + 1e-12)
                assert rel < 1e-5
                states += 1
            assert time.monotonic() - t0 < 60.0


class TestCriterion4:
    @pytest.mark.parametrize("knee", [50, 70, 90])
    def test_controller_under_step_oracle(self, knee):
        with criterion(4, f"controller logic, knee {knee}%"):
            t0 = time.monotonic()
            spec = OracleSpec(curve="step", knee=knee, plateau=92, drop=5, seed=1)
            policy = PolicyConfig(objective="accuracy_guaranteed",
                                  acc_loss_target=1.0, max_rounds=500)

            start_hashes = {}

            class Instrumented(OracleTrainer):
                def attentions(self, model, round_index=0):
                    start_hashes[round_index] = model_state_hash(model)
                    return super().attentions(model, round_index)

            model = lenet300().init_params(0)
            trainer = Instrumented(spec)
            run = PruningRun(model, trainer, policy, keep_attention_rows=False)
            _, records = run.run()
            final = run.final_record

            # final reduction: the largest achievable reduction not past the
            # knee, i.e. within one score-resolution step below it
            probe = lenet300().init_params(0)
            ref = OracleTrainer(spec)
            ref.baseline(probe)
            feasible = [red for _, red in ref.feasible_reductions(probe)]
            optimum = max(r for r in feasible if r <= knee)
            assert final.param_red == pytest.approx(optimum, abs=1e-9)
            assert final.param_red <= knee

            # lambda halves exactly on each repeated rollback
            by_round = {r.round_index: r for r in records}
            rollbacks = [r for r in records if r.rollback_to is not None]
            assert rollbacks
            for rb in rollbacks:
                succ = by_round.get(rb.round_index + 1)
                if succ is None:
                    continue
                target = by_round[rb.rollback_to]
                lam = target.step / 2.0 ** rb.rollback_count
                assert succ.step == lam
                assert succ.threshold == target.threshold + lam
                # rollback restored bit-identical state
                snap = run.snapshots[rb.rollback_to]
                restored = start_hashes[rb.round_index + 1]
                h = hashlib.sha256()
                for i in sorted(snap.weights):
                    h.update(snap.weights[i]["w"].tobytes())
                    h.update(snap.weights[i]["b"].tobytes())
                for i in sorted(snap.masks):
                    h.update(np.packbits(snap.masks[i]).tobytes())
                assert restored == h.hexdigest()

            assert records[-1].round_index <= policy.max_rounds
            assert time.monotonic() - t0 < 10.0


class TestCriterion5:
    def test_attention_closed_forms(self):
        with criterion(5, "attention unit exactness"):
            small = np.array([[1.0, -2.0], [3.0, 4.0]])
            big = np.array([[0.5, -1.0, 1.5, 2.0],
                            [-2.5, 3.0, 0.0, -0.5],
                            [1.0, 1.0, -1.5, 2.5],
                            [0.5, -3.0, 2.0, 1.0]])
            for amap in (small, big):
                vals = np.abs(amap).ravel().tolist()
                for p in (1, 2, 4):
                    powered = [v ** p for v in vals]
                    assert attention_value(amap, "sum", p) == sum(powered)
                    assert attention_value(amap, "mean", p) == sum(powered) / len(powered)
                    assert attention_value(amap, "max", p) == max(powered)
            rng = np.random.default_rng(5)
            for _ in range(1000):
                h, w = rng.integers(1, 9, 2)
                amap = rng.standard_normal((h, w))
                p = float(rng.choice([1, 2, 4]))
                assert attention_value(amap, "sum", p) == pytest.approx(
                    h * w * attention_value(amap, "mean", p), rel=1e-12)


class TestCriterion6:
    @pytest.mark.skipif(not (mnist_available() and os.environ.get("AAP_FULL_RUN")),
                        reason=FULL_REASON)
    def test_full_budget_reproduction(self, tmp_path):
        with criterion(6, "full-budget reproduction"):
            train, test = load_mnist()
            tcfg = TrainConfig(initial_lr=0.1, total_epochs=100, batch_size=256,
                               weight_decay=0.0, seed=0)
            acfg = AttentionConfig(batch_size=256)
            policy = PolicyConfig(objective="memory_constrained", param_target=90.0,
                                  lambda0=0.05, convergence_window=4)
            model = lenet5().init_params(0)
            trainer = SubstrateTrainer(train, test, tcfg, acfg, rewind_epoch=80)
            run = PruningRun(model, trainer, policy, checkpoint_dir=tmp_path,
                             keep_attention_rows=False)
            run.run()
            assert run.baseline_accuracy >= 98.5
            assert run.final_record.param_red >= 90.0
            assert run.final_record.acc_loss <= 1.0

    @pytest.mark.skipif(not mnist_available(), reason=MNIST_REASON)
    def test_reduced_ci_variant(self, tmp_path):
        with criterion(6, "reduced reproduction (10k subset)"):
            t0 = time.monotonic()
            train, test = load_mnist()
            train = train.subset(10000)
            tcfg = TrainConfig(initial_lr=0.1, total_epochs=30, batch_size=256,
                               seed=0)
            acfg = AttentionConfig(batch_size=256)
            policy = PolicyConfig(objective="memory_constrained", param_target=70.0,
                                  lambda0=0.05, convergence_window=4)
            model = lenet5().init_params(0)
            trainer = SubstrateTrainer(train, test, tcfg, acfg, rewind_epoch=24)
            run = PruningRun(model, trainer, policy, checkpoint_dir=tmp_path,
                             keep_attention_rows=False)
            run.run()
            assert run.final_record.param_red >= 70.0
            assert run.final_record.acc_loss <= 2.0
            assert time.monotonic() - t0 < 900.0

    def test_synthetic_analog(self, substrate_run):
        with criterion(6, "reproduction analog on synthetic data"):
            run, _, _, _ = substrate_run
            assert run.baseline_accuracy >= 95.0
            assert run.final_record.param_red >= 40.0
            assert run.final_record.acc_loss <= 2.0


class TestCriterion7:
    @pytest.mark.skipif(not mnist_available(), reason=MNIST_REASON)
    def test_rank_robustness_mnist(self):
        with criterion(7, "attention rank robustness"):
            train, test = load_mnist()
            model = lenet5().init_params(0)
            tcfg = TrainConfig(initial_lr=0.1, total_epochs=30, batch_size=256, seed=0)
            train_run(model, train, tcfg, 0, 30)
            self._check_rank_stability(model, train, conv_layers=(0, 3))

    def test_rank_robustness_synthetic(self, synth):
        with criterion(7, "attention rank robustness analog"):
            train, _ = synth
            model = wide_conv().init_params(0)
            tcfg = TrainConfig(initial_lr=0.05, total_epochs=15, batch_size=64, seed=0)
            train_run(model, train, tcfg, 0, 15)
            self._check_rank_stability(model, train, conv_layers=(0, 3))

    @staticmethod
    def _check_rank_stability(model, train, conv_layers):
        acfg = AttentionConfig(batch_size=256, batch_seed=0)
        reports = [evaluate_model_attentions(model, train, acfg, round_index=i)
                   for i in range(7)]
        rng = np.random.default_rng(99)
        noise = rng.random((256, *model.input_shape), dtype=np.float32)
        reports.append(attentions_for_batch(model, noise, acfg))
        for layer in conv_layers:
            mats = [r.scores[layer] for r in reports]
            for i in range(len(mats)):
                for j in range(i + 1, len(mats)):
                    rho = spearmanr(mats[i], mats[j]).correlation
                    assert rho >= 0.9, f"layer {layer} batches {i},{j}: rho={rho}"


class TestCriterion8:
    def test_exact_hand_computed_values(self):
        with criterion(8, "stability metric exactness"):
            a = smallconv(4, 16).init_params(0)
            for p in a.params.values():
                p["w"][...] = 0.5  # exactly representable, so deltas are exact
            assert stability(a, a.copy()) == 0.0
            b = a.copy()
            b.params[0]["w"].ravel()[0] += 3.0
            assert stability(b, a) == 3.0
            c = a.copy()
            c.params[3]["w"].ravel()[:4] += 1.0
            c.params[7]["w"].ravel()[:9] -= 2.0
            assert stability(c, a) == math.sqrt(4 * 1.0 + 9 * 4.0)
            d = a.copy()
            d.masks[0][5] = False
            a2 = a.copy()
            a2.params[0]["w"][5] += 100.0  # differs only where masked out
            assert stability(d, a2) == 0.0

    def test_late_rewind_is_more_stable(self, synth):
        with criterion(8, "late rewind epoch lowers weight drift"):
            train, _ = synth
            E = 10
            tcfg = TrainConfig(initial_lr=0.05, total_epochs=E, batch_size=64, seed=0)
            model = smallconv(4, 16).init_params(0)
            snaps = {}

            def hook(epoch, m):
                if epoch in (1, 8):
                    snaps[epoch] = {i: {k: v.copy() for k, v in p.items()}
                                    for i, p in m.params.items()}

            train_run(model, train, tcfg, 0, E, epoch_hook=hook)
            original = model.copy()
            rep = evaluate_model_attentions(model, train,
                                            AttentionConfig(batch_size=256))
            drift = {}
            for k in (1, 8):
                pruned = original.copy()
                for layer, scores in rep.scores.items():
                    idx = rep.filter_indices[layer]
                    doomed = idx[np.argsort(scores)[: len(scores) // 3]]
                    pruned.prune_filters(layer, [int(j) for j in doomed])
                for i, p in pruned.params.items():
                    p["w"][...] = snaps[k][i]["w"]
                    p["b"][...] = snaps[k][i]["b"]
                pruned.apply_masks()
                train_run(pruned, train, tcfg, k, E,
                          state=OptimizerState.zeros_like(pruned))
                drift[k] = stability(pruned, original)
            assert drift[8] < drift[1]


class TestCriterion9:
    def test_roundtrip_bit_identical(self, tmp_path):
        with criterion(9, "checkpoint roundtrip"):
            rng = np.random.default_rng(9)
            cycles = 0
            for seed in range(20):
                m = random_model(seed + 900)
                for layer in m.prunable_layers():
                    n = m.masks[layer].size
                    k = int(rng.integers(0, n))
                    if k:
                        m.prune_filters(layer, rng.choice(n, k, replace=False))
                ref_hash = None
                for cycle in range(5):
                    path = tmp_path / f"{seed}-{cycle}.aap"
                    h = ckpt_store.save(m, path=path, epoch=cycle)
                    if ref_hash is None:
                        ref_hash = h
                    ck = ckpt_store.load(path)
                    for i, p in m.params.items():
                        assert ck.tensors[f"layer{i}.w"].tobytes() == p["w"].tobytes()
                        assert ck.tensors[f"layer{i}.b"].tobytes() == p["b"].tobytes()
                    for i, mask in m.masks.items():
                        assert np.array_equal(ck.masks[i], mask)
                    ckpt_store.rollback(m, ck)
                    cycles += 1
                # state unchanged by save/load/rollback cycles
                assert ckpt_store.save(m, path=tmp_path / f"{seed}-x.aap") == ref_hash
            assert cycles == 100

    def test_oracle_retrain_reproduces_accuracy(self, tmp_path):
        with criterion(9, "rollback + retrain reproduction (oracle)"):
            spec = OracleSpec(curve="step", knee=70, plateau=92, drop=5, seed=1)
            policy = PolicyConfig(objective="accuracy_guaranteed",
                                  acc_loss_target=1.0, max_rounds=300)
            model = lenet300().init_params(0)
            run = PruningRun(model, OracleTrainer(spec), policy,
                             checkpoint_dir=tmp_path, keep_attention_rows=False)
            _, records = run.run()
            targets = [r for r in records if r.checkpoint_ref and r.round_index > 0]
            assert targets
            for rec in (targets[len(targets) // 2], targets[-1]):
                fresh = lenet300().init_params(0)
                trainer = OracleTrainer(spec)
                trainer.baseline(lenet300().init_params(0))
                ckpt_store.rollback(fresh, ckpt_store.load(rec.checkpoint_ref))
                trainer.rewind(fresh)
                assert trainer.retrain(fresh) == rec.accuracy

    def test_substrate_retrain_reproduces_accuracy(self, substrate_run, synth):
        with criterion(9, "rollback + retrain reproduction (substrate)"):
            run, _, tcfg, acfg = substrate_run
            train, test = synth
            rec = run.final_record
            assert rec.checkpoint_ref
            trainer = SubstrateTrainer(train, test, tcfg, acfg, rewind_epoch=8)
            trainer.baseline(smallconv(4, 16).init_params(0))
            fresh = smallconv(4, 16).init_params(0)
            ckpt_store.rollback(fresh, ckpt_store.load(rec.checkpoint_ref))
            trainer.rewind(fresh)
            assert trainer.retrain(fresh) == pytest.approx(rec.accuracy, abs=1e-6)
