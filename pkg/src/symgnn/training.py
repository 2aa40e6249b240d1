"""Training loop, RMSE evaluation and the ablation harness."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from symgnn import diffcore as dc
from symgnn.base_model import BaseConfig, BaseModel
from symgnn.graph_data import GraphData
from symgnn.layers import ConfigError, ModelInputs
from symgnn.lowrank_model import LowRankConfig, LowRankModel

logger = logging.getLogger(__name__)

ModelConfig = Union[BaseConfig, LowRankConfig]
Model = Union[BaseModel, LowRankModel]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_rows: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    patience: int = 30
    model: str = "lowrank"
    knn_k: int = 10
    normalize_loss: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_rows < 1:
            raise ConfigError("batch_rows must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.model not in ("base", "lowrank", "sylvester"):
            raise ConfigError(f"unknown model {self.model!r}")


@dataclass
class RunReport:
    model: str
    seed: int
    train_loss: List[float] = field(default_factory=list)
    val_rmse: List[float] = field(default_factory=list)
    best_val_rmse: float = float("nan")
    best_epoch: int = 0
    test_rmse: float = float("nan")
    epochs_run: int = 0
    wall_seconds: float = 0.0
    param_count: int = 0
    peak_activation_elems: int = 0

    def summary(self) -> dict:
        keys = ("model", "seed", "epochs_run", "best_val_rmse", "test_rmse", "param_count",
                "peak_activation_elems", "wall_seconds")
        return {k: getattr(self, k) for k in keys}

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# configs


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    kind = d.pop("model", "lowrank")
    if kind == "base":
        return BaseConfig(**d)
    if kind == "lowrank":
        return LowRankConfig(**d)
    raise ConfigError(f"unknown model discriminator {kind!r}")


def load_model_config(path) -> ModelConfig:
    with open(path) as f:
        return model_config_from_dict(json.load(f))


def build_model(config: ModelConfig, data: GraphData, seed: int = 0) -> Model:
    n1, n2 = data.shape
    d1, d2 = data.net1.d, data.net2.d
    train = data.split.train_mask.astype(bool)
    mean = float(data.prior.h[train].mean()) if train.any() else 0.0
    if isinstance(config, BaseConfig):
        return BaseModel(config, n1, n2, d1, d2, seed=seed, rating_mean=mean)
    if isinstance(config, LowRankConfig):
        return LowRankModel(config, n1, n2, d1, d2, len(data.prior.classes), seed=seed, rating_mean=mean)
    raise ConfigError(f"unsupported model config {type(config).__name__}")


# ---------------------------------------------------------------------------
# evaluation


def predict(model: Model, inputs: ModelInputs, rows=None, clip: bool = True) -> np.ndarray:
    pred = model.forward(inputs, rows).value
    if clip:
        pred = np.clip(pred, min(inputs.classes), max(inputs.classes))
    return pred


def evaluate_rmse(model: Model, data: GraphData, mask: np.ndarray,
                  inputs: Optional[ModelInputs] = None) -> float:
    """RMSE of clipped predictions over the entries selected by ``mask``."""
    sel = mask.astype(bool)
    if not sel.any():
        raise ValueError("RMSE over an empty mask")
    inputs = ModelInputs.from_data(data) if inputs is None else inputs
    rows = np.flatnonzero(sel.any(axis=1))
    pred = predict(model, inputs, rows)
    truth = data.prior.h[rows]
    m = sel[rows]
    return float(np.sqrt(np.mean((truth[m] - pred[m]) ** 2)))


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def epoch_loss(model: Model, inputs: ModelInputs, batch_rows: int, order=None,
               normalizer: Optional[float] = None) -> float:
    """Training loss at the current parameters, summed over row batches.

    Squared errors of all batches are pooled into one ``math.fsum`` so the
    result is independent of the batching.
    """
    n1 = inputs.shape[0]
    order = np.arange(n1) if order is None else np.asarray(order)
    normalizer = float(inputs.mask.sum()) if normalizer is None else normalizer
    sq = []
    for rows in _batches(order, batch_rows):
        pred = model.forward(inputs, rows).value
        m = inputs.mask[rows].astype(bool)
        sq.append(((inputs.h[rows] - pred)[m]) ** 2)
    return math.fsum(np.concatenate(sq).tolist()) / normalizer


# ---------------------------------------------------------------------------
# training


def train(data: GraphData, model_config: ModelConfig, cfg: TrainConfig,
          log: Optional[Callable[[dict], None]] = None, model: Optional[Model] = None
          ) -> Tuple[Model, RunReport]:
    """Mini-batch Adam on user-row batches with early stopping on validation RMSE.

    The best-validation parameters are restored before the test RMSE is
    computed.  Deterministic for a fixed ``cfg.seed``.
    """
    start = time.perf_counter()
    model = build_model(model_config, data, seed=cfg.seed) if model is None else model
    params = model.params
    inputs = ModelInputs.from_data(data)
    split = data.split
    rng = np.random.default_rng(cfg.seed + 1)
    state = dc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    n_train = float(split.train_mask.sum())
    if n_train == 0:
        raise ValueError("the split has no training entries")
    normalizer = n_train if cfg.normalize_loss else 1.0
    has_val = bool(split.val_mask.any())
    report = RunReport(model=model.kind, seed=cfg.seed, param_count=params.count())

    def validate():
        return evaluate_rmse(model, data, split.val_mask if has_val else split.train_mask, inputs)

    best = validate()
    best_params = params.snapshot()
    report.best_val_rmse = best
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(model.n1)
        sq_total = []
        for batch, rows in enumerate(_batches(order, cfg.batch_rows)):
            m = inputs.mask[rows]
            if not m.any():
                continue
            with dc.Tape() as tape:
                pred = model.forward(inputs, rows)
                loss = dc.masked_mse(pred, inputs.h[rows], m, normalizer)
            report.peak_activation_elems = max(report.peak_activation_elems, tape.elements)
            value = loss.value[0, 0]
            if not np.isfinite(value):
                snapshot = {"epoch": epoch, "batch": batch, "loss": float(value),
                            "param_norms": {k: float(np.linalg.norm(p.value)) for k, p in params.items()}}
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {batch}", snapshot)
            sq_total.append(value)
            grads = dc.backward(loss)
            dc.adam_step(params, grads, state)
        report.train_loss.append(math.fsum(sq_total))
        report.epochs_run = epoch
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        score = validate()
        if score < best:
            best, best_params, stale = score, params.snapshot(), 0
            report.best_epoch = epoch
        else:
            stale += cfg.eval_every
        report.val_rmse.append(score)
        if log is not None:
            log({"event": "epoch", "epoch": epoch, "train_loss": report.train_loss[-1],
                 "val_rmse": score, "best_val_rmse": best})
        if stale >= cfg.patience:
            logger.info("early stop at epoch %d (best %.4f at %d)", epoch, best, report.best_epoch)
            break
    params.load(best_params)
    report.best_val_rmse = best
    if split.test_mask.any():
        report.test_rmse = evaluate_rmse(model, data, split.test_mask, inputs)
    report.wall_seconds = time.perf_counter() - start
    if log is not None:
        log({"event": "done", **report.summary()})
    return model, report


def train_repeats(data: GraphData, model_config: ModelConfig, cfg: TrainConfig, seeds: Sequence[int],
                  log=None) -> Tuple[float, List[RunReport]]:
    reports = []
    for seed in seeds:
        _, rep = train(data, model_config, replace(cfg, seed=seed), log=log)
        reports.append(rep)
    return float(np.mean([r.test_rmse for r in reports])), reports


# ---------------------------------------------------------------------------
# ablation

VARIANTS = ("full", "G", "A")


def variant_config(config: ModelConfig, variant: str) -> ModelConfig:
    """``G`` keeps only graph (CGE) aggregation; ``A`` keeps only attention aggregation.

    The low-rank prior branch is not an aggregation over the input networks
    and stays enabled in every variant.
    """
    if variant == "full":
        return config
    if isinstance(config, BaseConfig):
        keep = {"G": ("cge", "prior"), "A": ("attention", "cross", "prior")}[variant]
        channels = tuple(c for c in config.channels if c in keep)
        if not channels:
            raise ConfigError(f"variant {variant} leaves no channel enabled")
        return replace(config, channels=channels)
    if isinstance(config, LowRankConfig):
        keep = {"G": ("cge", "prior"), "A": ("attention", "cross", "prior")}[variant]
        return replace(config, branches=tuple(b for b in config.branches if b in keep))
    raise ConfigError(f"unsupported model config {type(config).__name__}")


@dataclass
class AblationReport:
    reports: Dict[str, RunReport]

    def rows(self) -> List[dict]:
        return [{"variant": v, "test_rmse": r.test_rmse, "best_val_rmse": r.best_val_rmse,
                 "peak_activation_elems": r.peak_activation_elems, "param_count": r.param_count}
                for v, r in self.reports.items()]

    def table(self) -> str:
        lines = [f"{'variant':<8} {'test_rmse':>10} {'val_rmse':>10} {'peak_act':>12} {'params':>10}"]
        for row in self.rows():
            lines.append(f"{row['variant']:<8} {row['test_rmse']:10.4f} {row['best_val_rmse']:10.4f} "
                         f"{row['peak_activation_elems']:12d} {row['param_count']:10d}")
        return "\n".join(lines)


def run_ablation(data: GraphData, model_config: ModelConfig, cfg: TrainConfig,
                 variants: Sequence[str] = VARIANTS, log=None,
                 known: Optional[Dict[str, RunReport]] = None) -> AblationReport:
    """Train each variant with the same seed and config; ``known`` reuses finished runs."""
    out = {}
    for v in variants:
        if known and v in known:
            out[v] = known[v]
            continue
        _, out[v] = train(data, variant_config(model_config, v), cfg, log=log)
    return AblationReport(out)


# ---------------------------------------------------------------------------
# gradient checks on small instances


def gradcheck_config(kind: str, hidden_dim: int = 3) -> ModelConfig:
    """Every channel or branch enabled, small enough for per-entry differences."""
    if kind == "base":
        return BaseConfig(hidden_dim=hidden_dim, cge_levels=2, channels=("cge", "attention", "prior", "cross"),
                          binarize_prior=True)
    if kind == "lowrank":
        return LowRankConfig(hidden_dim=hidden_dim, cge_layers=2)
    raise ConfigError(f"no gradient check for model {kind!r}")


def gradcheck_model(data: GraphData, model_config: ModelConfig, seed: int = 0, eps: float = 1e-6,
                    tolerance: float = 1e-4, jitter: float = 0.1) -> dc.GradCheckReport:
    """Central differences of the full-batch training loss w.r.t. every parameter.

    Parameters are perturbed by ``jitter`` Gaussian noise first.  At the
    initial zero biases dead ReLU units give exactly-zero embedding rows,
    which put later ReLUs on their kink where one-sided slopes differ.
    """
    model = build_model(model_config, data, seed=seed)
    rng = np.random.default_rng(seed + 7)
    for p in model.params.values():
        p.value = p.value + jitter * rng.standard_normal(p.shape)
    inputs = ModelInputs.from_data(data)

    def loss_fn():
        return dc.masked_mse(model.forward(inputs), inputs.h, inputs.mask)

    return dc.finite_diff_check(loss_fn, model.params.values(), eps=eps, tolerance=tolerance)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model):
    """Parameters go to ``path``; the model config to ``path + '.json'``."""
    dc.save_archive(path, model.params.snapshot())
    with open(f"{path}.json", "w") as f:
        json.dump(model.config.to_dict(), f, indent=2)


def load_checkpoint(path, data: GraphData, model_config: Optional[ModelConfig] = None) -> Model:
    if model_config is None:
        model_config = load_model_config(f"{path}.json")
    model = build_model(model_config, data)
    arrays = dc.load_archive(path)
    missing = set(model.params) ^ set(arrays)
    if missing:
        raise ConfigError(f"checkpoint does not match the model; differing names: {sorted(missing)}")
    model.params.load(arrays)
    return model
