"""Low-rank model: per-network embeddings, predictions by dot product.

Each side gets up to four branches on top of its encoder output ``U_h``:
stacked CGE layers, within-network attention, one prior aggregator per
rating class, and cross-network attention.  Branch outputs are added to
``U_h`` and the prediction is ``a * U1 U2^T + b``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from symgnn import diffcore as dc
from symgnn.diffcore import ParameterSet, Tensor
from symgnn.layers import (ConfigError, ModelInputs, cge_apply, encoder_dims, init_mlp,
                           mlp_forward, rows_or_all, squash)

BRANCHES = ("cge", "attention", "prior", "cross")
SIDES = ("u", "v")


@dataclass
class LowRankConfig:
    hidden_dim: int = 32
    cge_layers: int = 2
    branches: Sequence[str] = BRANCHES
    encoder_layers: int = 2
    encoder_activation: str = "relu"
    branch_activation: str = "relu"
    prior_norm: str = "row"
    output_map: str = "affine"

    def __post_init__(self):
        self.branches = tuple(b for b in BRANCHES if b in tuple(self.branches))
        if self.cge_layers < 1:
            raise ConfigError("cge_layers must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.prior_norm not in ("row", "none"):
            raise ConfigError("prior_norm must be 'row' or 'none'")
        if self.output_map not in ("affine", "none"):
            raise ConfigError("output_map must be 'affine' or 'none'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = list(self.branches)
        d["model"] = "lowrank"
        return d


def cge_embed(a, u0: Tensor, sigma: Tensor, weights: Sequence[Tensor], act: str = "relu") -> Tensor:
    u = u0
    for w in weights:
        u = dc.activation(cge_apply(a, sigma, dc.matmul(u, w)), act)
    return u


def attention_embed(u: Tensor, w_att: Tensor, act: str = "relu", rows=None) -> Tensor:
    rows = rows_or_all(rows, u.shape[0])
    b = dc.row_softmax_gram(dc.take_rows(u, rows), u)
    return dc.activation(dc.matmul(dc.matmul(b, u), w_att), act)


def class_indicator_matrices(h: np.ndarray, mask: np.ndarray, classes: Sequence[float],
                             norm: str = "row") -> List[sp.csr_matrix]:
    """Sparse per-class indicators ``H_i``, optionally divided by each row's observed count."""
    h = np.asarray(h)
    obs = mask.astype(bool)
    if obs.any() and not np.isin(h[obs], classes).all():
        bad = h[obs][~np.isin(h[obs], classes)][0]
        raise ValueError(f"rating {bad} is not one of the declared classes {tuple(classes)}")
    scale = np.ones(h.shape[0])
    if norm == "row":
        counts = obs.sum(axis=1).astype(np.float64)
        scale = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out = []
    for c in classes:
        ind = sp.csr_matrix(((h == c) & obs).astype(np.float64))
        out.append((sp.diags(scale) @ ind).tocsr())
    return out


def class_prior_embed(indicators: Sequence, u_other: Tensor, thetas: Sequence[Tensor],
                      concat_w: Tensor, concat_b: Tensor, act: str = "relu") -> Tensor:
    """``Linear([act(H_1 U Theta_1) || ... || act(H_K U Theta_K)])``."""
    parts = [dc.activation(dc.matmul(dc.const_matmul(hi, u_other), th), act)
             for hi, th in zip(indicators, thetas)]
    cat = parts[0] if len(parts) == 1 else dc.concat_cols(parts)
    return dc.add_row(dc.matmul(cat, concat_w), concat_b)


def cross_attention_embed(u_self: Tensor, u_other: Tensor, theta: Tensor, act: str = "relu",
                          rows=None) -> Tensor:
    rows = rows_or_all(rows, u_self.shape[0])
    c = dc.row_softmax_gram(dc.take_rows(u_self, rows), u_other)
    return dc.activation(dc.matmul(dc.matmul(c, u_other), theta), act)


def fuse_and_predict(u_h1: Tensor, branches1: Sequence[Tensor], u_h2: Tensor,
                     branches2: Sequence[Tensor]) -> Tuple[Tensor, Tensor, Tensor]:
    u1 = dc.add_n([u_h1, *branches1]) if branches1 else u_h1
    u2 = dc.add_n([u_h2, *branches2]) if branches2 else u_h2
    return u1, u2, dc.matmul(u1, dc.transpose(u2))


class LowRankModel:
    kind = "lowrank"

    def __init__(self, config: LowRankConfig, n1: int, n2: int, d1: int, d2: int, n_classes: int,
                 seed: int = 0, rating_mean: float = 0.0):
        self.config = config
        self.n1, self.n2 = n1, n2
        self.n_classes = n_classes
        self._indicator_cache: Dict[int, tuple] = {}
        rng = np.random.default_rng(seed)
        r = config.hidden_dim
        p = self.params = ParameterSet()
        init_mlp(p, "mlp1", rng, encoder_dims(d1, r, config.encoder_layers))
        init_mlp(p, "mlp2", rng, encoder_dims(d2, r, config.encoder_layers))
        for s, n in zip(SIDES, (n1, n2)):
            if "cge" in config.branches:
                p.add(f"{s}.sigma_raw", np.zeros((n, 1)), decay=False)
                for layer in range(config.cge_layers):
                    p.add(f"{s}.cge.w{layer}", dc.glorot_uniform(rng, r, r))
            if "attention" in config.branches:
                p.add(f"{s}.att.w", dc.glorot_uniform(rng, r, r))
            if "prior" in config.branches:
                for k in range(n_classes):
                    p.add(f"{s}.prior.theta{k}", dc.glorot_uniform(rng, r, r))
                p.add(f"{s}.prior.concat_w", dc.glorot_uniform(rng, n_classes * r, r))
                p.add(f"{s}.prior.concat_b", np.zeros((1, r)), decay=False)
            if "cross" in config.branches:
                p.add(f"{s}.cross.theta", dc.glorot_uniform(rng, r, r))
        if config.output_map == "affine":
            p.add("out.scale", np.ones((1, 1)), decay=False)
            p.add("out.bias", np.full((1, 1), rating_mean), decay=False)

    def indicators(self, inputs: ModelInputs):
        key = id(inputs)
        cached = self._indicator_cache.get(key)
        if cached is None or cached[0] is not inputs:
            users = class_indicator_matrices(inputs.h, inputs.mask, inputs.classes, self.config.prior_norm)
            items = class_indicator_matrices(inputs.h.T, inputs.mask.T, inputs.classes, self.config.prior_norm)
            cached = (inputs, users, items)
            self._indicator_cache = {key: cached}
        return cached[1], cached[2]

    def _side(self, side: str, a, u_h: Tensor, u_other: Tensor, indicators, rows) -> List[Tensor]:
        cfg, p = self.config, self.params
        act = cfg.branch_activation
        out = []
        if "cge" in cfg.branches:
            weights = [p[f"{side}.cge.w{k}"] for k in range(cfg.cge_layers)]
            out.append(dc.take_rows(cge_embed(a, u_h, squash(p[f"{side}.sigma_raw"]), weights, act), rows))
        if "attention" in cfg.branches:
            out.append(attention_embed(u_h, p[f"{side}.att.w"], act, rows))
        if "prior" in cfg.branches:
            thetas = [p[f"{side}.prior.theta{k}"] for k in range(self.n_classes)]
            sel = [hi[rows] for hi in indicators] if len(rows) != u_h.shape[0] else indicators
            out.append(class_prior_embed(sel, u_other, thetas, p[f"{side}.prior.concat_w"],
                                         p[f"{side}.prior.concat_b"], act))
        if "cross" in cfg.branches:
            out.append(cross_attention_embed(u_h, u_other, p[f"{side}.cross.theta"], act, rows))
        return out

    def embed(self, inputs: ModelInputs, rows=None) -> Tuple[Tensor, Tensor]:
        """Final user embeddings for ``rows`` and item embeddings for all items."""
        cfg = self.config
        rows = rows_or_all(rows, self.n1)
        all_items = np.arange(self.n2)
        u_h = mlp_forward(self.params, "mlp1", inputs.f1, cfg.encoder_layers, cfg.encoder_activation)
        v_h = mlp_forward(self.params, "mlp2", inputs.f2, cfg.encoder_layers, cfg.encoder_activation)
        ind_u, ind_v = self.indicators(inputs)
        user_branches = self._side("u", inputs.a1, u_h, v_h, ind_u, rows)
        item_branches = self._side("v", inputs.a2, v_h, u_h, ind_v, all_items)
        u1, u2, _ = fuse_and_predict(dc.take_rows(u_h, rows), user_branches, v_h, item_branches)
        return u1, u2

    def scores(self, inputs: ModelInputs, rows=None) -> Tensor:
        """Raw dot products ``U1 U2^T`` before the rating map."""
        u1, u2 = self.embed(inputs, rows)
        return dc.matmul(u1, dc.transpose(u2))

    def forward(self, inputs: ModelInputs, rows=None) -> Tensor:
        x = self.scores(inputs, rows)
        if self.config.output_map == "affine":
            x = dc.affine_scalar(x, self.params["out.scale"], self.params["out.bias"])
        return x

    def export_embeddings(self, inputs: ModelInputs, path):
        """Write the final ``U1`` and ``U2`` to a named-matrix archive."""
        u1, u2 = self.embed(inputs)
        dc.save_archive(path, {"users": u1.value, "items": u2.value})
