"""Base model: four n1 x n2 association channels fused per user row.

Channels
--------
cge        sum over levels i of act(A1^i U1 W_i W_i^T U2^T (A2^i)^T)
attention  act(B1 U1 W_a U2^T B2^T), B = within-network attention
prior      act(U1 (U1^T H U2) U2^T), binary H only
cross      act((C U2) U2^T), C = user-to-item attention

``A^i`` above is the CGE adjacency with learnable self-loop weights; powers
are applied to the embeddings one step at a time and never formed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from symgnn import diffcore as dc
from symgnn.diffcore import ParameterSet, Tensor
from symgnn.layers import (ConfigError, ModelInputs, cge_apply, encoder_dims, init_mlp,
                           mlp_forward, rows_or_all, squash)

CHANNELS = ("cge", "attention", "prior", "cross")


@dataclass
class BaseConfig:
    hidden_dim: int = 32
    cge_levels: int = 3
    channels: Sequence[str] = ("cge", "attention", "cross")
    encoder_layers: int = 2
    encoder_activation: str = "relu"
    channel_activation: str = "relu"
    fusion_activation: str = "linear"
    prior_embeddings: str = "shared"
    binarize_prior: bool = False
    output_map: str = "affine"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.cge_levels < 1:
            raise ConfigError("cge_levels must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if not self.channels:
            raise ConfigError("at least one channel must be enabled")
        unknown = set(self.channels) - set(CHANNELS)
        if unknown:
            raise ConfigError(f"unknown channels {sorted(unknown)}; choose from {CHANNELS}")
        # keep a canonical order so fusion columns are stable
        self.channels = tuple(c for c in CHANNELS if c in self.channels)
        if self.prior_embeddings not in ("shared", "identity"):
            raise ConfigError("prior_embeddings must be 'shared' or 'identity'")
        if self.output_map not in ("affine", "none"):
            raise ConfigError("output_map must be 'affine' or 'none'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["model"] = "base"
        return d


# ---------------------------------------------------------------------------
# channels


def cge_channel(a1, a2, u1: Tensor, u2: Tensor, sigma1: Tensor, sigma2: Tensor,
                factors: Sequence[Tensor], act: str = "relu", rows=None) -> Tensor:
    rows = rows_or_all(rows, u1.shape[0])
    p1, p2 = u1, u2
    terms = []
    for w in factors:
        p1 = cge_apply(a1, sigma1, p1)
        p2 = cge_apply(a2, sigma2, p2)
        # W^(c) = W' W'^T, so the bilinear form splits into two projections
        left = dc.matmul(dc.take_rows(p1, rows), w)
        right = dc.matmul(p2, w)
        terms.append(dc.activation(dc.matmul(left, dc.transpose(right)), act))
    return terms[0] if len(terms) == 1 else dc.add_n(terms)


def attention_channel(u1: Tensor, u2: Tensor, w_att: Tensor, act: str = "relu", rows=None) -> Tensor:
    rows = rows_or_all(rows, u1.shape[0])
    b1 = dc.row_softmax_gram(dc.take_rows(u1, rows), u1)
    b2 = dc.row_softmax_gram(u2, u2)
    left = dc.matmul(dc.matmul(b1, u1), w_att)
    right = dc.matmul(b2, u2)
    return dc.activation(dc.matmul(left, dc.transpose(right)), act)


def prior_channel(u1: Optional[Tensor], u2: Optional[Tensor], h: np.ndarray, act: str = "relu",
                  rows=None) -> Tensor:
    """``act(U1 (U1^T H U2) U2^T)``; pass ``u1 = u2 = None`` for identity embeddings."""
    if not np.isin(h, (0.0, 1.0)).all():
        raise ConfigError("the prior channel needs a binary H; enable binarize_prior for rating data")
    if u1 is None:
        rows = rows_or_all(rows, h.shape[0])
        return dc.activation(dc.Tensor(h[rows]), act)
    rows = rows_or_all(rows, u1.shape[0])
    core = dc.matmul(dc.transpose(u1), dc.const_matmul(h, u2))
    left = dc.matmul(dc.take_rows(u1, rows), core)
    return dc.activation(dc.matmul(left, dc.transpose(u2)), act)


def cross_attention_channel(u1: Tensor, u2: Tensor, act: str = "relu", rows=None) -> Tensor:
    rows = rows_or_all(rows, u1.shape[0])
    c = dc.row_softmax_gram(dc.take_rows(u1, rows), u2)
    return dc.activation(dc.matmul(dc.matmul(c, u2), dc.transpose(u2)), act)


def fuse_channels(stack: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Row ``i`` of the result is ``sum_k stack[k][i, :] * weights[i, k]``."""
    if weights.shape != (stack[0].shape[0], len(stack)):
        raise dc.ShapeError(f"fusion weights {weights.shape} do not fit {len(stack)} channels "
                            f"of {stack[0].shape}")
    terms = [dc.mul_col(x, dc.take_cols(weights, k)) for k, x in enumerate(stack)]
    return terms[0] if len(terms) == 1 else dc.add_n(terms)


# ---------------------------------------------------------------------------
# model


class BaseModel:
    kind = "base"

    def __init__(self, config: BaseConfig, n1: int, n2: int, d1: int, d2: int,
                 seed: int = 0, rating_mean: float = 0.0):
        self.config = config
        self.n1, self.n2 = n1, n2
        rng = np.random.default_rng(seed)
        r = config.hidden_dim
        p = self.params = ParameterSet()
        init_mlp(p, "mlp1", rng, encoder_dims(d1, r, config.encoder_layers))
        init_mlp(p, "mlp2", rng, encoder_dims(d2, r, config.encoder_layers))
        if "cge" in config.channels:
            p.add("sigma1_raw", np.zeros((n1, 1)), decay=False)
            p.add("sigma2_raw", np.zeros((n2, 1)), decay=False)
            for i in range(config.cge_levels):
                p.add(f"cge.w{i}", dc.glorot_uniform(rng, r, r))
        if "attention" in config.channels:
            p.add("att.w", dc.glorot_uniform(rng, r, r))
        c = len(config.channels)
        p.add("fusion", np.full((n1, c), 1.0 / c))
        if config.output_map == "affine":
            p.add("out.scale", np.ones((1, 1)), decay=False)
            p.add("out.bias", np.full((1, 1), rating_mean), decay=False)

    def embeddings(self, inputs: ModelInputs):
        cfg = self.config
        u1 = mlp_forward(self.params, "mlp1", inputs.f1, cfg.encoder_layers, cfg.encoder_activation)
        u2 = mlp_forward(self.params, "mlp2", inputs.f2, cfg.encoder_layers, cfg.encoder_activation)
        return u1, u2

    def prior_matrix(self, inputs: ModelInputs) -> np.ndarray:
        if self.config.binarize_prior:
            return inputs.mask.astype(np.float64)
        return inputs.h

    def channel_stack(self, inputs: ModelInputs, rows=None) -> List[Tensor]:
        cfg, p = self.config, self.params
        act = cfg.channel_activation
        u1, u2 = self.embeddings(inputs)
        stack = []
        for name in cfg.channels:
            if name == "cge":
                factors = [p[f"cge.w{i}"] for i in range(cfg.cge_levels)]
                stack.append(cge_channel(inputs.a1, inputs.a2, u1, u2, squash(p["sigma1_raw"]),
                                         squash(p["sigma2_raw"]), factors, act, rows))
            elif name == "attention":
                stack.append(attention_channel(u1, u2, p["att.w"], act, rows))
            elif name == "prior":
                h = self.prior_matrix(inputs)
                if cfg.prior_embeddings == "identity":
                    stack.append(prior_channel(None, None, h, act, rows))
                else:
                    stack.append(prior_channel(u1, u2, h, act, rows))
            elif name == "cross":
                stack.append(cross_attention_channel(u1, u2, act, rows))
        return stack

    def fused(self, inputs: ModelInputs, rows=None) -> Tensor:
        rows = rows_or_all(rows, self.n1)
        stack = self.channel_stack(inputs, rows)
        x = fuse_channels(stack, dc.take_rows(self.params["fusion"], rows))
        return dc.activation(x, self.config.fusion_activation)

    def forward(self, inputs: ModelInputs, rows=None) -> Tensor:
        """Unclipped rating predictions for ``rows`` (default: every user) x all items."""
        x = self.fused(inputs, rows)
        if self.config.output_map == "affine":
            x = dc.affine_scalar(x, self.params["out.scale"], self.params["out.bias"])
        return x
