"""The four local training procedures plus the shared loss helpers.

1. cloud training of shared encoder + cloud submodel (CE on cloud logits)
2. control-model distillation (MSE between control and cloud logits, Adam)
3. one party's co-submodel training under the frozen control model
   (CE on control logits + co logits)
4. co-classifier finetuning over cached high-level features
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import LabeledDataset
from .model import DecoupledModel, Sequential
from .optim import Optimizer
from .tensor import ShapeError, Tensor, mse_loss, softmax_cross_entropy

EVAL_BATCH = 256


class EmptyDatasetError(ValueError):
    pass


class PhaseOrderError(RuntimeError):
    pass


class ContractViolationError(RuntimeError):
    pass


@dataclass
class PhaseHyperparams:
    learning_rate: float
    epochs: int
    batch_size: int = 32
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class FeatureSet:
    """High-level co-submodel features with the frozen reference logits cached beside them."""

    features: np.ndarray  # [N, D]
    reference_logits: np.ndarray  # [N, K]; zeros when no reference model participates
    labels: np.ndarray  # [N]

    def __len__(self) -> int:
        return len(self.labels)

    def concat(self, other: "FeatureSet") -> "FeatureSet":
        return FeatureSet(np.concatenate([self.features, other.features]),
                          np.concatenate([self.reference_logits, other.reference_logits]),
                          np.concatenate([self.labels, other.labels]))

    def payload(self, with_reference: bool = True) -> bytes:
        """Wire form: float64 features, optional float64 reference logits, u32 labels."""
        parts = [self.features.astype("<f8").tobytes()]
        if with_reference:
            parts.append(self.reference_logits.astype("<f8").tobytes())
        parts.append(self.labels.astype("<u4").tobytes())
        return b"".join(parts)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _fit(params, hp: PhaseHyperparams, n: int, loss_fn, seed, epochs: Optional[int] = None) -> list[float]:
    """Minibatch loop; returns the sample-weighted mean loss of every epoch."""
    opt = Optimizer(params, hp.optimizer, hp.learning_rate)
    rng = np.random.default_rng(seed)
    curve = []
    for _ in range(hp.epochs if epochs is None else epochs):
        total = 0.0
        for idx in _batches(n, hp.batch_size, rng):
            opt.zero_grad()
            loss = loss_fn(idx)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        curve.append(total / n)
    opt.zero_grad()
    return curve


def _batched(fn, x: np.ndarray) -> np.ndarray:
    return np.concatenate([fn(x[i:i + EVAL_BATCH]) for i in range(0, len(x), EVAL_BATCH)])


def _require(data, what="dataset"):
    if data is None or len(data) == 0:
        raise EmptyDatasetError(f"empty {what}")


def summed_logit_loss(reference: np.ndarray, co_logits: Tensor, labels) -> Tensor:
    """CE(reference + co, y); ``reference`` is a constant (frozen model output)."""
    return softmax_cross_entropy(co_logits + Tensor(reference), labels)


# ---------------------------------------------------------------------------
# phase 1


def train_cloud_submodel(dm: DecoupledModel, cloud_train: LabeledDataset, hp: PhaseHyperparams,
                         seed=0) -> list[float]:
    """Train shared encoder + cloud submodel on cloud data, then freeze both."""
    _require(cloud_train)
    dm.unfreeze("encoder", "cloud")
    x, y = cloud_train.images, cloud_train.labels
    params = dm.params("encoder", "cloud")

    def loss(idx):
        return softmax_cross_entropy(dm.cloud(dm.encoder(x[idx])), y[idx])

    curve = _fit(params, hp, len(y), loss, seed)
    dm.freeze("encoder", "cloud")
    dm.stage = max(dm.stage, 1)
    return curve


# ---------------------------------------------------------------------------
# phase 2


def encode_all(dm: DecoupledModel, x: np.ndarray) -> np.ndarray:
    return _batched(lambda b: dm.encoder(b).data, x)


def distill_control(dm: DecoupledModel, cloud_train: LabeledDataset, hp: PhaseHyperparams,
                    seed=0) -> list[float]:
    """Fit the control model to the frozen cloud submodel's logits (MSE)."""
    if dm.stage < 1:
        raise PhaseOrderError("distillation needs a trained cloud submodel (run phase 1 first)")
    _require(cloud_train)
    dm.freeze("encoder", "cloud")
    dm.unfreeze("control")
    h = encode_all(dm, cloud_train.images)
    target = _batched(lambda b: dm.cloud(b).data, h)

    def loss(idx):
        return mse_loss(dm.control(h[idx]), Tensor(target[idx]))

    curve = _fit(dm.params("control"), hp, len(h), loss, seed)
    dm.freeze("control")
    dm.stage = max(dm.stage, 2)
    return curve


def distillation_loss(dm: DecoupledModel, data: LabeledDataset) -> float:
    """Mean over samples of the per-sample MSE between cloud and control logits."""
    h = encode_all(dm, data.images)
    cl = _batched(lambda b: dm.cloud(b).data, h)
    ct = _batched(lambda b: dm.control(b).data, h)
    return float(((cl - ct) ** 2).mean(axis=1).mean())


# ---------------------------------------------------------------------------
# phase 3


def reference_logits(dm: DecoupledModel, h: np.ndarray, reference: Optional[str]) -> np.ndarray:
    if reference is None:
        return np.zeros((len(h), dm.num_classes))
    return _batched(lambda b: dm.head(reference, b).data, h)


def local_train_co(dm: DecoupledModel, local: LabeledDataset, hp: PhaseHyperparams, epochs: int,
                   seed=0, reference: Optional[str] = "control") -> list[np.ndarray]:
    """Train only the co-submodel on ``local`` and return its parameter delta.

    ``reference`` names the frozen head whose logits are added to the
    co-submodel's: ``"control"`` (default), ``"cloud"`` (ideal centralized
    variant) or ``None`` (no correction at all).
    """
    frozen = dm.params("encoder") + (dm.params(reference) if reference else [])
    if any(not p.frozen for p in frozen):
        raise ContractViolationError(f"encoder and {reference} model must be frozen during co-submodel training")
    if reference == "control" and dm.stage < 2:
        raise PhaseOrderError("co-submodel training needs a distilled control model")
    before = dm.co.state()
    if epochs == 0:
        return [np.zeros_like(a) for a in before]
    _require(local)
    dm.unfreeze("co")
    h = encode_all(dm, local.images)
    ref = reference_logits(dm, h, reference)
    y = local.labels

    def loss(idx):
        return summed_logit_loss(ref[idx], dm.co(h[idx]), y[idx])

    _fit(dm.params("co"), hp, len(y), loss, seed, epochs=epochs)
    return [a - b for a, b in zip(dm.co.state(), before)]


def train_decoupled_joint(dm: DecoupledModel, local: LabeledDataset, hp: PhaseHyperparams, epochs: int,
                          seed=0) -> list[float]:
    """Train encoder, cloud and co together on CE(cloud + co): the Distr-D local step."""
    _require(local)
    dm.unfreeze("encoder", "cloud", "co")
    x, y = local.images, local.labels

    def loss(idx):
        h = dm.encoder(x[idx])
        return softmax_cross_entropy(dm.cloud(h) + dm.co(h), y[idx])

    return _fit(dm.params("encoder", "cloud", "co"), hp, len(y), loss, seed, epochs=epochs)


def train_chain(model: Sequential, data: LabeledDataset, hp: PhaseHyperparams, epochs: Optional[int] = None,
                seed=0) -> list[float]:
    """Plain CE training of a single chain (base model or encoder + co)."""
    _require(data)
    model.unfreeze()
    x, y = data.images, data.labels
    return _fit(model.parameters(), hp, len(y), lambda idx: softmax_cross_entropy(model(x[idx]), y[idx]),
                seed, epochs=epochs)


# ---------------------------------------------------------------------------
# phase 4


def extract_features(dm: DecoupledModel, data: LabeledDataset, reference: Optional[str] = "control") -> FeatureSet:
    h = encode_all(dm, data.images)
    feats = _batched(lambda b: dm.co.features(b).data, h)
    return FeatureSet(feats, reference_logits(dm, h, reference), data.labels.copy())


def chain_features(model: Sequential, data: LabeledDataset) -> FeatureSet:
    feats = _batched(lambda b: model.features(b).data, data.images)
    k = model.classifier.spec.out
    return FeatureSet(feats, np.zeros((len(feats), k)), data.labels.copy())


def finetune_classifier(target, features: FeatureSet, hp: PhaseHyperparams, seed=0) -> list[float]:
    """Retrain only the final fc layer of ``target`` (a DecoupledModel's co-submodel or a chain)."""
    chain = target.co if isinstance(target, DecoupledModel) else target
    clf = chain.classifier
    if features.features.ndim != 2 or features.features.shape[1] != clf.in_shape[0]:
        raise ShapeError(f"features of width {features.features.shape[1:]} do not match the "
                         f"classifier input width {clf.in_shape[0]}")
    _require(features, "feature set")
    for p in chain.parameters():
        p.freeze()
    for p in clf.params:
        p.unfreeze()
    f, ref, y = features.features, features.reference_logits, features.labels

    def loss(idx):
        return summed_logit_loss(ref[idx], clf(Tensor(f[idx])), y[idx])

    curve = _fit(clf.params, hp, len(y), loss, seed)
    chain.unfreeze()
    return curve


# ---------------------------------------------------------------------------
# evaluation


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def evaluate(model, test: LabeledDataset, mode: str = "decoupled") -> float:
    """Top-1 accuracy; ``mode`` picks which logits are summed for a DecoupledModel."""
    _require(test, "test set")
    if isinstance(model, DecoupledModel):
        logits = _batched(lambda b: model.logits(b, mode), test.images)
    else:
        logits = _batched(lambda b: model(b).data, test.images)
    return accuracy_from_logits(logits, test.labels)


_MODE_HEADS = {"decoupled": ("cloud", "co"), "device_side": ("control", "co"),
               "cloud_only": ("cloud",), "co_only": ("co",)}


def evaluate_modes(dm: DecoupledModel, test: LabeledDataset, modes: Sequence[str]) -> dict:
    """Accuracy in several modes from one encoder pass and one pass per needed head."""
    _require(test, "test set")
    unknown = [m for m in modes if m not in _MODE_HEADS]
    if unknown:
        raise ValueError(f"unknown evaluation mode {unknown[0]!r}")
    h = encode_all(dm, test.images)
    heads = {n for m in modes for n in _MODE_HEADS[m]}
    out = {n: _batched(lambda b, n=n: dm.head(n, b).data, h) for n in heads}
    return {m: accuracy_from_logits(sum(out[n] for n in _MODE_HEADS[m]), test.labels) for m in modes}


def per_class_accuracy(model, test: LabeledDataset, classes: Sequence[int], mode: str = "decoupled") -> float:
    mask = np.isin(test.labels, list(classes))
    if not mask.any():
        raise EmptyDatasetError("no test samples in the requested classes")
    return evaluate(model, test.subset(np.flatnonzero(mask)), mode)
