"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The long-running trend criteria (5, 6, 9) execute the bundled presets through
the experiment runner and time themselves.
"""

import subprocess
import sys
import time
from collections import defaultdict
from fractions import Fraction

import numpy as np
import pytest

from dcccl.cli import read_metrics, run_experiments
from dcccl.config import from_dict, parse_config
from dcccl.model import (FLATTEN, RELU, ModelSpec, SplitConfig, build_from_parts, build_model, conv,
                         count_params, desk_base_spec, fc, split_model, feasibility_base_spec, feasibility_reference_parts)
from dcccl.serialize import model_payload, models_payload
from dcccl.simnet import clear_caches, run_method
from dcccl.tensor import Tensor, conv2d, flatten, linear, maxpool2d, mse_loss, relu, softmax_cross_entropy

from conftest import central_difference, kink_safe_central_difference, max_relative_error

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return emit


def _preset_means(name, tmp_path):
    clear_caches()
    start = time.perf_counter()
    status = run_experiments(parse_config(name), tmp_path / name, timestamp=False, checkpoints=False)
    elapsed = time.perf_counter() - start
    rows = read_metrics(tmp_path / name / "metrics.csv")
    return status, rows, elapsed


def _mean_by(rows, key=lambda r: r["method"]):
    groups = defaultdict(list)
    for r in rows:
        groups[key(r)].append(r["accuracy"])
    return {k: float(np.mean(v)) for k, v in groups.items()}


# ---------------------------------------------------------------------------
# 1. gradient oracle


def _grad_check(build, arrays, indices=None):
    """Largest relative error between reverse-mode and central-difference gradients."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    build(*tensors).backward()
    worst = 0.0
    for i, (t, a) in enumerate(zip(tensors, arrays)):
        idx = None if indices is None else indices[i]
        fd = central_difference(lambda: float(build(*[Tensor(b) for b in arrays]).data), a, indices=idx)
        if idx is None:
            worst = max(worst, max_relative_error(t.grad, fd))
        else:
            sel = tuple(np.array(idx).T)
            worst = max(worst, max_relative_error(t.grad[sel], fd[sel]))
    return worst


def _model_grad_error(chain_params, loss_fn, x, rng, per_tensor=4):
    """Reverse-mode vs central differences on sampled entries of every parameter tensor and the input.

    A 3x32x32 input feeds ~10^5 ReLUs, so a 1e-5 step on a first-layer weight
    can push some pre-activation across zero; the kink-safe oracle shrinks the
    step for such entries.
    """
    xt = Tensor(x, requires_grad=True)
    for p in chain_params:
        p.unfreeze()
        p.grad = None
    loss_fn(xt).backward()
    worst = 0.0
    targets = [(p.data, p.grad) for p in chain_params] + [(x, xt.grad)]
    for arr, grad in targets:
        picks = [tuple(int(rng.integers(s)) for s in arr.shape) for _ in range(per_tensor)]
        fd = kink_safe_central_difference(lambda: float(loss_fn(Tensor(x)).data), arr, picks)
        sel = tuple(np.array(picks).T)
        worst = max(worst, max_relative_error(grad[sel], fd[sel]))
    return worst


def test_criterion_1_gradient_oracle(report):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    errors = {}
    x, w, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    r = rng.standard_normal(4 * 3 * 3)
    errors["conv"] = _grad_check(
        lambda x_, w_, b_: mse_loss(linear(flatten(conv2d(x_, w_, 2, 1, b_)), Tensor(r.reshape(-1, 1))),
                                    Tensor(np.zeros((2, 1)))), [x, w, b])
    xp = (rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1).astype(float)
    rp = rng.standard_normal((8, 1))
    errors["maxpool"] = _grad_check(
        lambda x_: mse_loss(linear(flatten(maxpool2d(x_, 2, 2)), Tensor(rp)), Tensor(np.zeros((2, 1)))), [xp])
    xr = rng.standard_normal((3, 5))
    xr[np.abs(xr) < 0.05] = 0.3
    errors["relu"] = _grad_check(
        lambda x_: mse_loss(relu(x_), Tensor(np.ones((3, 5)))), [xr])
    xf, wf, bf = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)
    errors["fc+ce"] = _grad_check(
        lambda x_, w_, b_: softmax_cross_entropy(linear(x_, w_, b_), np.array([0, 3, 1])), [xf, wf, bf])
    ta = rng.standard_normal((3, 4))
    errors["mse"] = _grad_check(lambda a: mse_loss(a, Tensor(ta)), [rng.standard_normal((3, 4))])

    y = np.array([3])
    base = build_model(feasibility_base_spec(), seed=1)
    xb = rng.standard_normal((1, 3, 32, 32))
    errors["feasibility CNN base"] = _model_grad_error(
        base.parameters(), lambda inp: softmax_cross_entropy(base(inp), y), xb, rng)
    dm = build_from_parts(feasibility_reference_parts(), (3, 32, 32), 10, seed=2)
    dm_params = [p for part in ("encoder", "cloud", "co") for p in dm.params(part)]

    def summed(inp):
        h = dm.encoder(inp)
        return softmax_cross_entropy(dm.cloud(h) + dm.co(h), y)

    errors["feasibility CNN decoupled"] = _model_grad_error(dm_params, summed, xb, rng)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 60
    report(1, ok, f"max rel err {worst:.2e} (<1e-4) over {sorted(errors)}; runtime {elapsed:.1f}s (<60s)")
    assert ok, errors


# ---------------------------------------------------------------------------
# 2. decoupling exactness


def test_criterion_2_decoupling_exactness(report):
    rng = np.random.default_rng(1)
    dm = split_model(desk_base_spec(), SplitConfig("7/8", "1/8"), seed=4)
    x = rng.standard_normal((100, 1, 12, 12))
    h = dm.encoder(x)
    cloud, co = dm.cloud(h).data, dm.co(h).data
    sum_err = float(np.abs(dm.logits(x, "decoupled") - (cloud + co)).max())
    changed = 0
    for p in dm.cloud.parameters():
        old = p.data.copy()
        p.data += rng.standard_normal(p.data.shape)
        changed += int(not np.array_equal(dm.co(dm.encoder(x)).data, co))
        p.data[...] = old
    for p in dm.cloud.parameters():
        p.data += rng.standard_normal(p.data.shape)
    changed += int(not np.array_equal(dm.co(dm.encoder(x)).data, co))
    ok = sum_err <= 1e-12 and changed == 0
    report(2, ok, f"max |decoupled - (cloud+co)| = {sum_err:.1e} (<=1e-12); "
                  f"co-logit changes under cloud perturbation: {changed} (must be 0)")
    assert ok


# ---------------------------------------------------------------------------
# 3. size accounting


def test_criterion_3_size_accounting(report):
    reference_rows = {"encoder conv1": 9_600, "cloud conv1": 258_048, "cloud conv2": 451_584,
                      "cloud conv3": 627_200, "cloud fc1": 71_680, "co conv1": 36_864, "co conv2": 9_216,
                      "co conv3": 25_600, "co fc1": 10_240}
    dm = build_from_parts(feasibility_reference_parts(), (3, 32, 32), 10)
    weights = lambda chain: [l.params[0].data.size for l in chain.layers if l.params]  # noqa: E731
    got = dict(zip(reference_rows, weights(dm.encoder) + weights(dm.cloud) + weights(dm.co)))
    mismatched = {k: (got[k], v) for k, v in reference_rows.items() if got[k] != v}
    base = count_params(build_model(feasibility_base_spec()))
    device = count_params(dm.encoder) + count_params(dm.co)
    ratio = 100 * device / base
    printed = 100 * (reference_rows["encoder conv1"] + sum(v for k, v in reference_rows.items()
                                                            if k.startswith("co"))) / base
    ratio_ok = abs(ratio - 5.1) <= 0.3
    ok = not mismatched and ratio_ok
    report(3, ok, f"instantiated rows mismatching the table {mismatched or 'none'}; "
                  f"device(encoder+co)/base = {device:,}/{base:,} = {ratio:.2f}% (target 5.1+-0.3); "
                  f"summing the printed rows instead gives {printed:.2f}%")
    assert ok


# ---------------------------------------------------------------------------
# 4. alpha scaling law


def _uniform_stack(width, depth=4, size=8, channels=3, classes=10):
    layers = [conv(width, 3), RELU] * (depth + 1)
    return ModelSpec(tuple(layers + [FLATTEN, fc(classes)]), (channels, size, size), classes)


def test_criterion_4_alpha_scaling_law(report):
    details, ok = [], True
    for width in (16, 32, 64):
        spec = _uniform_stack(width)
        dm = split_model(spec, SplitConfig("7/8", "1/8", shared_prefix_len=1))
        convs = lambda chain: [l for l in chain.layers if l.spec.kind == "conv"]  # noqa: E731
        base_high = convs(build_model(spec))[1:]  # the first conv is shared
        base_params = sum(l.params[0].data.size for l in base_high)
        co_layers = convs(dm.co)
        co_params = sum(l.params[0].data.size for l in co_layers)
        # one filter of each co layer: in_channels * k * k weights
        tolerance = sum(l.params[0].data[0].size for l in co_layers)
        gap = abs(co_params - base_params / 64)
        ok &= gap <= tolerance
        per_layer = [Fraction(c.params[0].data.size, b.params[0].data.size) for c, b in zip(co_layers, base_high)]
        details.append(f"w={width}: co {co_params} vs base/64 {base_params / 64:.0f} (gap {gap:.0f}, "
                       f"tol {tolerance}; per-layer co/base {', '.join(map(str, per_layer))})")
    report(4, ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------------------
# 5. feasibility trend


def test_criterion_5_feasibility_trend(report, tmp_path):
    status, rows, elapsed = _preset_means("feasibility", tmp_path)
    acc = _mean_by(rows)
    cb, cd, nc = acc["Central-B"], acc["Central-D"], acc["DC-CCL-no-control"]
    a = cd >= cb - 0.03
    b = cb - nc >= 0.05
    ok = status == 0 and a and b and elapsed < 600
    report(5, ok, f"Central-D {100 * cd:.1f} vs Central-B {100 * cb:.1f} (within 3: {a}); "
                  f"no-control {100 * nc:.1f}, cost {100 * (cb - nc):.1f} pts (>=5: {b}); runtime {elapsed:.0f}s (<600s)")
    assert ok


# ---------------------------------------------------------------------------
# 6. main-experiment trends


def test_criterion_6_main_trends(report, tmp_path):
    status, rows, elapsed = _preset_means("main", tmp_path)
    assert all(r["status"] == "ok" for r in rows)
    acc = _mean_by(rows)
    dc = acc["DC-CCL"]
    checks = {
        "DC-CCL >= Cloud-B + 10": dc - acc["Cloud-B"] >= 0.10,
        "|DC-CCL - Distr-D| <= 5": abs(dc - acc["Distr-D"]) <= 0.05,
        "DC-CCL > Distr-S": dc > acc["Distr-S"],
        "DC-CCL > Incr-S": dc > acc["Incr-S"],
        "no-control < DC-CCL": acc["DC-CCL-no-control"] < dc,
        "no-finetune < DC-CCL": acc["DC-CCL-no-finetune"] < dc,
        "runtime < 30 min": elapsed < 1800,
    }
    summary = ", ".join(f"{m} {100 * v:.1f}" for m, v in sorted(acc.items()))
    failed = [k for k, v in checks.items() if not v]
    ok = status == 0 and not failed
    report(6, ok, f"means: {summary}; runtime {elapsed:.0f}s; failed checks: {failed or 'none'}")
    assert ok


# ---------------------------------------------------------------------------
# 7. communication accounting


def test_criterion_7_communication_accounting(report):
    clear_caches()
    quick = {"cloud": {"epochs": 1}, "distill": {"epochs": 1}, "classifier": {"epochs": 1}, "rounds": 2}
    dc = run_method(from_dict({"method": "DC-CCL", "training": quick}))
    dd = run_method(from_dict({"method": "Distr-D", "training": quick}))
    co_size = len(model_payload(dc.model.co))
    full_size = len(models_payload([dd.model.encoder, dd.model.cloud, dd.model.co]))
    per_round_ok = all(dc.channel.bytes_in_round(r) == 2 * co_size for r in (1, 2))
    ratio = Fraction(dd.metrics.per_round_bytes, dc.metrics.per_round_bytes)
    ratio_ok = ratio == Fraction(full_size, co_size)
    ok = per_round_ok and ratio_ok
    report(7, ok, f"DC-CCL per-round {dc.metrics.per_round_bytes} B = 2 x {co_size} B: {per_round_ok}; "
                  f"Distr-D:DC-CCL = {float(ratio):.2f}x vs decoupled:co = {full_size}/{co_size}: {ratio_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism


DETERMINISM_CONFIG = """
name: determinism
training:
  cloud: {epochs: 2}
  distill: {epochs: 2}
  classifier: {epochs: 2}
  rounds: 2
matrix:
  method: [DC-CCL, Distr-D, Distr-S, Incr-S, Central-B, DC-CCL-no-control]
"""


def test_criterion_8_determinism(report, tmp_path):
    cfg = tmp_path / "det.yaml"
    cfg.write_text(DETERMINISM_CONFIG)
    outs = []
    for d in ("a", "b"):
        subprocess.run([sys.executable, "-m", "dcccl", "run", str(cfg), "--out", str(tmp_path / d),
                        "--no-timestamp", "--no-checkpoints"], check=True)
        outs.append((tmp_path / d / "metrics.csv").read_bytes())
    traces = sorted(p.name for p in (tmp_path / "a" / "traces").iterdir())
    same_traces = all((tmp_path / "a" / "traces" / t).read_bytes() == (tmp_path / "b" / "traces" / t).read_bytes()
                      for t in traces)
    ok = outs[0] == outs[1] and same_traces
    report(8, ok, f"metrics.csv identical across two processes: {outs[0] == outs[1]} "
                  f"({len(outs[0])} bytes); {len(traces)} trace files identical: {same_traces}")
    assert ok


# ---------------------------------------------------------------------------
# 9. heterogeneous mode


def test_criterion_9_heterogeneous(report, tmp_path):
    status, rows, elapsed = _preset_means("hetero", tmp_path)
    all_ok = all(r["status"] == "ok" for r in rows)
    acc = _mean_by(rows)
    ok = status == 0 and all_ok and acc["DC-CCL"] > acc["Cloud-B"]
    report(9, ok, f"all runs ok: {all_ok}; DC-CCL {100 * acc['DC-CCL']:.1f} vs Cloud-B "
                  f"{100 * acc['Cloud-B']:.1f}; runtime {elapsed:.0f}s")
    assert ok
