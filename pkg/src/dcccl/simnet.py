"""Two-node (cloud + device) simulation: byte-exact channel, round orchestration and runners.

Every method runs through :func:`run_method`. The collaborative schedule is::

    setup    downlink: whatever the device needs to start (charged once)
    round r  both sides train locally -> device uplinks its model
             -> cloud aggregates (sample-count weights) -> downlink aggregate
             -> evaluate
    finetune feature upload (or download) + classifier sync

Phase-1/2 artifacts are memoized per (seed, data, model, phase hyperparams) so
that every method sharing a seed starts from bit-identical parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import training as T
from .config import ExperimentConfig
from .data import LabeledDataset, PartitionedDataset, load_dataset, make_splits, partition_by_class
from .model import (PRESETS, DecoupledModel, LayerSpec, ModelSpec, Sequential, build_heterogeneous, build_model,
                    count_flops, count_params, encoder_plus, split_model, feasibility_reference_parts,
                    build_from_parts)
from .serialize import load_checkpoint, model_payload, models_payload, serialize_params
from .tensor import ShapeError

UPLINK, DOWNLINK = "uplink", "downlink"


class UnknownMethodError(ValueError):
    pass


# ---------------------------------------------------------------------------
# channel


@dataclass(frozen=True)
class Message:
    direction: str
    kind: str
    size: int
    round: int


class Channel:
    """Simulated link that only counts bytes; the log is the source of truth."""

    def __init__(self):
        self.log: list[Message] = []
        self.uplink_bytes = 0
        self.downlink_bytes = 0

    def send(self, direction: str, kind: str, payload, round_index: int = 0) -> int:
        size = payload if isinstance(payload, int) else len(payload)
        if direction == UPLINK:
            self.uplink_bytes += size
        elif direction == DOWNLINK:
            self.downlink_bytes += size
        else:
            raise ValueError(f"unknown direction {direction!r}")
        self.log.append(Message(direction, kind, size, round_index))
        return size

    @property
    def total_bytes(self) -> int:
        return self.uplink_bytes + self.downlink_bytes

    def bytes_in_round(self, r: int) -> int:
        return sum(m.size for m in self.log if m.round == r)

    def messages(self, kind: Optional[str] = None, direction: Optional[str] = None) -> list[Message]:
        return [m for m in self.log if (kind is None or m.kind == kind)
                and (direction is None or m.direction == direction)]


# ---------------------------------------------------------------------------
# aggregation


def aggregate(a, b, w_cloud: float, w_device: float) -> list[np.ndarray]:
    """Weighted average ``w_cloud * a + w_device * b`` of two parameter lists.

    Computed as ``a + w_device * (b - a)`` so equal inputs come back exactly;
    a zero weight returns an exact copy of the other side.
    """
    if w_cloud < 0 or w_device < 0 or abs(w_cloud + w_device - 1.0) > 1e-12:
        raise ValueError(f"weights must be non-negative and sum to 1, got ({w_cloud}, {w_device})")
    if len(a) != len(b):
        raise ShapeError(f"parameter counts differ: {len(a)} vs {len(b)}")
    out = []
    for x, y in zip(a, b):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ShapeError(f"parameter shapes differ: {x.shape} vs {y.shape}")
        if w_device == 0:
            out.append(x.copy())
        elif w_cloud == 0:
            out.append(y.copy())
        else:
            out.append(x + w_device * (y - x))
    return out


def sample_weights(n_cloud: int, n_device: int) -> tuple[float, float]:
    total = n_cloud + n_device
    return n_cloud / total, n_device / total


# ---------------------------------------------------------------------------
# records


@dataclass
class RoundTrace:
    round: int
    cloud_epochs: int  # cumulative
    device_epochs: int  # cumulative
    accuracy: float
    device_side_accuracy: float
    uplink_bytes: int  # cumulative
    downlink_bytes: int  # cumulative


@dataclass
class MetricsRecord:
    method: str
    seed: int
    status: str = "ok"
    accuracy: float = math.nan  # headline full-test accuracy
    acc_decoupled: float = math.nan
    acc_device_side: float = math.nan
    acc_cloud_only: float = math.nan
    acc_co_only: float = math.nan
    acc_cloud_classes: float = math.nan
    acc_device_classes: float = math.nan
    acc_before_finetune: float = math.nan
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    setup_bytes: int = 0
    per_round_bytes: int = 0
    finetune_bytes: int = 0
    rounds: int = 0
    device_side_params: int = 0
    device_side_flops: int = 0
    cloud_side_params: int = 0
    base_params: int = 0
    base_flops: int = 0
    phase12_digest: str = ""
    wall_seconds: float = math.nan
    error: str = ""


@dataclass
class RunResult:
    metrics: MetricsRecord
    traces: list = field(default_factory=list)
    channel: Channel = field(default_factory=Channel)
    model: object = None  # final model (DecoupledModel or Sequential)


# ---------------------------------------------------------------------------
# data and model resolution


def _data_key(cfg: ExperimentConfig) -> str:
    return json.dumps([cfg.seed, asdict(cfg.data)], sort_keys=True)


_DATA_CACHE: dict = {}
_PHASE_CACHE: dict = {}


def clear_caches() -> None:
    _DATA_CACHE.clear()
    _PHASE_CACHE.clear()


def build_partition(cfg: ExperimentConfig) -> PartitionedDataset:
    key = _data_key(cfg)
    if key not in _DATA_CACHE:
        d = cfg.data
        if d.train_path is not None:
            train, test = load_dataset(d.train_path), load_dataset(d.test_path)
        else:
            train, test = make_splits(d.num_classes, d.samples_per_class, d.test_per_class, d.image_size,
                                      d.channels, d.noise_std, cfg.seed, d.max_shift)
        _DATA_CACHE[key] = partition_by_class(train, d.resolved_device_classes(), d.augment_fraction,
                                              seed=cfg.seed, test=test)
    return _DATA_CACHE[key]


def resolve_spec(entry, cfg: ExperimentConfig) -> ModelSpec:
    """Turn a config model entry (preset name or mapping) into a :class:`ModelSpec`."""
    d = cfg.data
    k = d.num_classes
    if isinstance(entry, str):
        entry = {"preset": entry}
    if not isinstance(entry, dict):
        raise ValueError(f"cannot interpret model entry {entry!r}")
    entry = dict(entry)
    if "layers" in entry:
        layers = tuple(LayerSpec(**l) for l in entry.pop("layers"))
        shape = tuple(entry.pop("input_shape", (d.channels, d.image_size, d.image_size)))
        return ModelSpec(layers, shape, k)
    name = entry.pop("preset", "desk")
    if name == "feasibility_reference":  # the reference per-part rows come from the same base CNN
        name = "feasibility_cnn"
    if name not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; known: {', '.join(PRESETS)}")
    if name == "desk":
        entry.setdefault("channels", d.channels)
        entry.setdefault("image_size", d.image_size)
        if "widths" in entry:
            entry["widths"] = tuple(entry["widths"])
    return PRESETS[name](num_classes=k, **entry)


def base_spec(cfg: ExperimentConfig) -> ModelSpec:
    m = cfg.model
    return resolve_spec(m.cloud if m.heterogeneous else m.base, cfg)


def build_decoupled(cfg: ExperimentConfig) -> DecoupledModel:
    m = cfg.model
    if m.heterogeneous:
        return build_heterogeneous(resolve_spec(m.cloud, cfg), resolve_spec(m.co, cfg), cfg.seed)
    if m.base == "feasibility_reference":
        return build_from_parts(feasibility_reference_parts(cfg.data.num_classes), (3, 32, 32),
                                cfg.data.num_classes, cfg.seed)
    return split_model(resolve_spec(m.base, cfg), m.split(), cfg.seed)


def params_digest(*chains) -> str:
    h = hashlib.sha256()
    for c in chains:
        for p in c.parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _seed(cfg: ExperimentConfig, *tags: int) -> list[int]:
    return [cfg.seed, *tags]


# tags for derived training streams
_T_CLOUD, _T_DISTILL, _T_ROUND, _T_FINETUNE, _T_BASE, _T_CHAIN = 10, 11, 12, 13, 14, 15


def prepared_model(cfg: ExperimentConfig, part: PartitionedDataset) -> tuple[DecoupledModel, dict]:
    """Decoupled model after phases 1 and 2 (memoized; a fresh copy is returned)."""
    m, t = cfg.model, cfg.training
    key = json.dumps([_data_key(cfg), asdict(m), t.cloud, t.distill], sort_keys=True)
    if key not in _PHASE_CACHE:
        dm = build_decoupled(cfg)
        info = {}
        if m.cloud_checkpoint:
            loaded = load_checkpoint(m.cloud_checkpoint)
            src = loaded.cloud if isinstance(loaded, DecoupledModel) else loaded
            dm.cloud.load_state(src.state())
            if isinstance(loaded, DecoupledModel) and not dm.heterogeneous:
                dm.encoder.load_state(loaded.encoder.state())
            dm.freeze("encoder", "cloud")
            dm.stage = 1
            info["cloud_curve"] = []
        else:
            info["cloud_curve"] = T.train_cloud_submodel(dm, part.cloud_train, t.phase("cloud"),
                                                         _seed(cfg, _T_CLOUD))
        info["distill_curve"] = T.distill_control(dm, part.cloud_train, t.phase("distill"),
                                                  _seed(cfg, _T_DISTILL))
        info["digest"] = params_digest(dm.encoder, dm.cloud, dm.control)
        _PHASE_CACHE[key] = (dm, info)
    dm, info = _PHASE_CACHE[key]
    return dm.copy(), dict(info)


# ---------------------------------------------------------------------------
# helpers shared by runners


def _sizes(metrics: MetricsRecord, cfg: ExperimentConfig, dm: Optional[DecoupledModel], chain=None):
    base = build_model(base_spec(cfg))
    metrics.base_params = count_params(base)
    metrics.base_flops = count_flops(base)
    if dm is not None:
        enc, co, ctl = dm.encoder, dm.co, dm.control
        metrics.device_side_params = count_params(enc) + count_params(co) + count_params(ctl)
        metrics.device_side_flops = count_flops(enc) + count_flops(co) + count_flops(ctl)
        metrics.cloud_side_params = count_params(enc) + count_params(dm.cloud) + count_params(co)
    elif chain is not None:
        metrics.device_side_params = metrics.cloud_side_params = count_params(chain)
        metrics.device_side_flops = count_flops(chain)


def _eval_decoupled(metrics: MetricsRecord, dm: DecoupledModel, part: PartitionedDataset, headline="decoupled"):
    test = part.test
    acc = T.evaluate_modes(dm, test, ("decoupled", "device_side", "cloud_only", "co_only"))
    for mode, value in acc.items():
        setattr(metrics, f"acc_{mode}", value)
    dev = sorted(part.device_classes)
    cloud = sorted(set(range(dm.num_classes)) - set(dev))
    metrics.acc_device_classes = T.per_class_accuracy(dm, test, dev, headline)
    metrics.acc_cloud_classes = T.per_class_accuracy(dm, test, cloud, headline)
    metrics.accuracy = getattr(metrics, f"acc_{headline}")


def _eval_chain(metrics: MetricsRecord, chain: Sequential, part: PartitionedDataset):
    test = part.test
    metrics.accuracy = T.evaluate(chain, test)
    dev = sorted(part.device_classes)
    cloud = sorted(set(range(test.num_classes)) - set(dev))
    metrics.acc_device_classes = T.per_class_accuracy(chain, test, dev)
    metrics.acc_cloud_classes = T.per_class_accuracy(chain, test, cloud)


def _finish_bytes(metrics: MetricsRecord, ch: Channel, rounds: int):
    metrics.uplink_bytes = ch.uplink_bytes
    metrics.downlink_bytes = ch.downlink_bytes
    metrics.setup_bytes = sum(m.size for m in ch.messages() if m.kind.startswith("setup"))
    metrics.finetune_bytes = sum(m.size for m in ch.messages() if m.kind.startswith("finetune"))
    metrics.per_round_bytes = ch.bytes_in_round(1) if rounds >= 1 else 0
    metrics.rounds = rounds


def _classifier_payload(chain: Sequential) -> bytes:
    return serialize_params([p.data for p in chain.classifier.params])


def _finetune(cfg, ch, target, cloud_feats: T.FeatureSet, device_feats: T.FeatureSet, with_reference: bool,
              round_index: int):
    """Run classifier finetuning on the configured side, charging the feature transfer."""
    chain = target.co if isinstance(target, DecoupledModel) else target
    if cfg.training.finetune_on == "cloud":
        ch.send(UPLINK, "finetune_features", device_feats.payload(with_reference), round_index)
        feats = cloud_feats.concat(device_feats)
    else:
        ch.send(DOWNLINK, "finetune_features", cloud_feats.payload(with_reference), round_index)
        feats = device_feats.concat(cloud_feats)
    T.finetune_classifier(target, feats, cfg.training.phase("classifier"), _seed(cfg, _T_FINETUNE))
    back = UPLINK if cfg.training.finetune_on == "device" else DOWNLINK
    ch.send(back, "finetune_classifier", _classifier_payload(chain), round_index)


# ---------------------------------------------------------------------------
# DC-CCL and its ablations


def run_dc_ccl(cfg: ExperimentConfig) -> RunResult:
    """Full DC-CCL pipeline; also runs the no-control and no-finetune ablations."""
    if cfg.method not in ("DC-CCL", "DC-CCL-no-control", "DC-CCL-no-finetune"):
        raise UnknownMethodError(f"run_dc_ccl cannot run {cfg.method!r}")
    t = cfg.training
    use_control = cfg.method != "DC-CCL-no-control"
    finetune = cfg.method != "DC-CCL-no-finetune"
    ref = "control" if use_control else None
    part = build_partition(cfg)
    cloud_dm, info = prepared_model(cfg, part)
    metrics = MetricsRecord(cfg.method, cfg.seed, phase12_digest=info["digest"])
    ch = Channel()

    # one-time setup: the device needs the encoder, the control model (if used) and the initial co-submodel
    device_dm = cloud_dm.device_view()
    if len(cloud_dm.encoder):
        ch.send(DOWNLINK, "setup_encoder", model_payload(cloud_dm.encoder), 0)
    if use_control:
        ch.send(DOWNLINK, "setup_control", model_payload(cloud_dm.control), 0)
    ch.send(DOWNLINK, "setup_co", model_payload(cloud_dm.co), 0)

    w_cloud, w_device = sample_weights(len(part.cloud_train), len(part.device_train))
    hp = t.phase("co")
    traces = []
    for r in range(1, t.rounds + 1):
        T.local_train_co(cloud_dm, part.cloud_train, hp, t.cloud_epochs_per_round, _seed(cfg, _T_ROUND, r, 0), ref)
        T.local_train_co(device_dm, part.device_train, hp, t.device_epochs_per_round,
                         _seed(cfg, _T_ROUND, r, 1), ref)
        ch.send(UPLINK, "co", model_payload(device_dm.co), r)
        merged = aggregate(cloud_dm.co.state(), device_dm.co.state(), w_cloud, w_device)
        cloud_dm.co.load_state(merged)
        ch.send(DOWNLINK, "co", model_payload(cloud_dm.co), r)
        device_dm.co.load_state(merged)
        acc = T.evaluate_modes(cloud_dm, part.test, ("decoupled", "device_side"))
        traces.append(RoundTrace(r, r * t.cloud_epochs_per_round, r * t.device_epochs_per_round,
                                 acc["decoupled"], acc["device_side"], ch.uplink_bytes, ch.downlink_bytes))

    metrics.acc_before_finetune = T.evaluate(cloud_dm, part.test, "decoupled")
    if finetune and t.rounds > 0:
        cloud_feats = T.extract_features(cloud_dm, part.cloud_train, ref)
        device_feats = T.extract_features(device_dm, part.device_train, ref)
        _finetune(cfg, ch, cloud_dm, cloud_feats, device_feats, use_control, t.rounds + 1)
        device_dm.co.load_state(cloud_dm.co.state())

    _eval_decoupled(metrics, cloud_dm, part)
    _sizes(metrics, cfg, cloud_dm)
    _finish_bytes(metrics, ch, t.rounds)
    return RunResult(metrics, traces, ch, cloud_dm)


def run_ablation(cfg: ExperimentConfig) -> RunResult:
    if cfg.method not in ("DC-CCL-no-control", "DC-CCL-no-finetune"):
        raise UnknownMethodError(f"unknown ablation {cfg.method!r}")
    return run_dc_ccl(cfg)


# ---------------------------------------------------------------------------
# baselines


def _train_base(cfg: ExperimentConfig, data: LabeledDataset) -> Sequential:
    model = build_model(base_spec(cfg), seed=[cfg.seed, _T_BASE])
    T.train_chain(model, data, cfg.training.phase("cloud"), cfg.training.budget_epochs,
                  seed=_seed(cfg, _T_BASE))
    return model


def _small_chain(cfg: ExperimentConfig) -> Sequential:
    """Encoder + co-submodel layers as one freshly initialized chain (the small-model baselines)."""
    return encoder_plus(build_decoupled(cfg), "co", seed=[cfg.seed, _T_CHAIN])


def small_model_rounds(cfg: ExperimentConfig) -> int:
    """Rounds for the small-model baselines: as many cloud epochs as DC-CCL's phases 1 and 3 combined."""
    t = cfg.training
    per = max(t.cloud_epochs_per_round, 1)
    return -(-t.phase("cloud").epochs // per) + t.rounds


def _run_distr_d(cfg, part, dm, metrics, ch) -> tuple[DecoupledModel, list]:
    t = cfg.training
    names = ("encoder", "cloud", "co")
    chains = lambda m: [m.parts()[n] for n in names]  # noqa: E731
    device_dm = dm.copy()
    ch.send(DOWNLINK, "setup_decoupled", models_payload(chains(dm)), 0)
    w_cloud, w_device = sample_weights(len(part.cloud_train), len(part.device_train))
    hp = t.phase("co")
    traces = []
    for r in range(1, t.rounds + 1):
        T.train_decoupled_joint(dm, part.cloud_train, hp, t.cloud_epochs_per_round, _seed(cfg, _T_ROUND, r, 0))
        T.train_decoupled_joint(device_dm, part.device_train, hp, t.device_epochs_per_round,
                                _seed(cfg, _T_ROUND, r, 1))
        ch.send(UPLINK, "decoupled", models_payload(chains(device_dm)), r)
        for a, b in zip(chains(dm), chains(device_dm)):
            merged = aggregate(a.state(), b.state(), w_cloud, w_device)
            a.load_state(merged)
            b.load_state(merged)
        ch.send(DOWNLINK, "decoupled", models_payload(chains(dm)), r)
        acc = T.evaluate(dm, part.test, "decoupled")
        traces.append(RoundTrace(r, r * t.cloud_epochs_per_round, r * t.device_epochs_per_round, acc,
                                 math.nan, ch.uplink_bytes, ch.downlink_bytes))
    dm.freeze("encoder", "cloud")
    device_dm.freeze("encoder", "cloud")
    metrics.acc_before_finetune = T.evaluate(dm, part.test, "decoupled")
    if t.rounds > 0:
        _finetune(cfg, ch, dm, T.extract_features(dm, part.cloud_train, "cloud"),
                  T.extract_features(device_dm, part.device_train, "cloud"), True, t.rounds + 1)
    return dm, traces


def _run_distr_s(cfg, part, chain, metrics, ch) -> list:
    t = cfg.training
    rounds = small_model_rounds(cfg)
    device_chain = Sequential(chain.specs, chain.input_shape, name=chain.name)
    device_chain.load_state(chain.state())
    ch.send(DOWNLINK, "setup_small", model_payload(chain), 0)
    w_cloud, w_device = sample_weights(len(part.cloud_train), len(part.device_train))
    hp = t.phase("co")
    traces = []
    for r in range(1, rounds + 1):
        T.train_chain(chain, part.cloud_train, hp, t.cloud_epochs_per_round, _seed(cfg, _T_ROUND, r, 0))
        T.train_chain(device_chain, part.device_train, hp, t.device_epochs_per_round, _seed(cfg, _T_ROUND, r, 1))
        ch.send(UPLINK, "small", model_payload(device_chain), r)
        merged = aggregate(chain.state(), device_chain.state(), w_cloud, w_device)
        chain.load_state(merged)
        device_chain.load_state(merged)
        ch.send(DOWNLINK, "small", model_payload(chain), r)
        traces.append(RoundTrace(r, r * t.cloud_epochs_per_round, r * t.device_epochs_per_round,
                                 T.evaluate(chain, part.test), math.nan, ch.uplink_bytes, ch.downlink_bytes))
    metrics.acc_before_finetune = T.evaluate(chain, part.test)
    if rounds > 0:
        _finetune(cfg, ch, chain, T.chain_features(chain, part.cloud_train),
                  T.chain_features(device_chain, part.device_train), False, rounds + 1)
    return traces


def _run_incr_s(cfg, part, chain, metrics, ch) -> None:
    t = cfg.training
    hp = t.phase("co")
    rounds = small_model_rounds(cfg)
    T.train_chain(chain, part.cloud_train, hp, rounds * t.cloud_epochs_per_round, _seed(cfg, _T_CHAIN, 0))
    ch.send(DOWNLINK, "setup_small", model_payload(chain), 0)
    T.train_chain(chain, part.device_train, hp, t.rounds * t.device_epochs_per_round, _seed(cfg, _T_CHAIN, 1))
    metrics.acc_before_finetune = T.evaluate(chain, part.test)
    if rounds > 0:
        # the device now holds the only copy; it uploads the model so the cloud can extract its features
        ch.send(UPLINK, "incremental_model", model_payload(chain), 1)
        _finetune(cfg, ch, chain, T.chain_features(chain, part.cloud_train),
                  T.chain_features(chain, part.device_train), False, 2)


def run_baseline(cfg: ExperimentConfig) -> RunResult:
    method = cfg.method
    part = build_partition(cfg)
    metrics = MetricsRecord(method, cfg.seed)
    ch = Channel()
    traces: list = []
    t = cfg.training
    if method in ("Central-B", "Cloud-B"):
        data = part.full_train if method == "Central-B" else part.cloud_train
        model = _train_base(cfg, data)
        _eval_chain(metrics, model, part)
        _sizes(metrics, cfg, None, model)
        _finish_bytes(metrics, ch, 0)
        return RunResult(metrics, traces, ch, model)

    if method in ("Distr-S", "Incr-S"):
        chain = _small_chain(cfg)
        if method == "Distr-S":
            traces = _run_distr_s(cfg, part, chain, metrics, ch)
        else:
            _run_incr_s(cfg, part, chain, metrics, ch)
        _eval_chain(metrics, chain, part)
        _sizes(metrics, cfg, None, chain)
        _finish_bytes(metrics, ch, small_model_rounds(cfg) if method == "Distr-S" else 0)
        return RunResult(metrics, traces, ch, chain)

    dm, info = prepared_model(cfg, part)
    metrics.phase12_digest = info["digest"]
    if method == "Central-D":
        T.local_train_co(dm, part.full_train, t.phase("co"), t.stage_two_epochs,
                         _seed(cfg, _T_CHAIN, 2), reference="cloud")
        metrics.acc_before_finetune = math.nan
        _eval_decoupled(metrics, dm, part)
        _sizes(metrics, cfg, dm)
        _finish_bytes(metrics, ch, 0)
        return RunResult(metrics, traces, ch, dm)
    if method == "Distr-D":
        dm, traces = _run_distr_d(cfg, part, dm, metrics, ch)
        _eval_decoupled(metrics, dm, part)
        _sizes(metrics, cfg, dm)
        _finish_bytes(metrics, ch, t.rounds)
        return RunResult(metrics, traces, ch, dm)
    raise UnknownMethodError(f"unknown baseline {method!r}")


def run_method(cfg: ExperimentConfig) -> RunResult:
    """Dispatch on ``cfg.method`` and time the run."""
    start = time.perf_counter()
    if cfg.method == "DC-CCL":
        res = run_dc_ccl(cfg)
    elif cfg.method.startswith("DC-CCL-"):
        res = run_ablation(cfg)
    else:
        res = run_baseline(cfg)
    res.metrics.wall_seconds = time.perf_counter() - start
    return res
