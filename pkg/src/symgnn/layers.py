"""Building blocks shared by the base and low-rank models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from symgnn import diffcore as dc
from symgnn.diffcore import Parameter, ParameterSet, Tensor
from symgnn.graph_data import GraphData


class ConfigError(ValueError):
    pass


@dataclass
class ModelInputs:
    """Constant inputs of one forward pass.

    ``h`` and ``mask`` hold only the ratings the model may look at (the
    training entries); everything else is zero.
    """

    a1: sp.csr_matrix
    a2: sp.csr_matrix
    f1: object
    f2: object
    h: np.ndarray
    mask: np.ndarray
    classes: tuple

    @classmethod
    def from_data(cls, data: GraphData) -> "ModelInputs":
        mask = data.split.train_mask
        return cls(data.net1.norm_adjacency, data.net2.norm_adjacency,
                   data.net1.features, data.net2.features,
                   data.prior.h * mask, mask, data.prior.classes)

    @property
    def shape(self):
        return self.h.shape


def cge_adjacency(a, sigma) -> Tensor:
    """Dense ``diag(sigma) + (I - diag(sigma)) A`` for an n x 1 ``sigma``."""
    a = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=np.float64)
    sigma = dc._as_tensor(sigma)
    n = a.shape[0]
    # literal form keeps A_hat - diag(s) == (I - diag(s)) A bit for bit
    keep = dc.sub(dc.Tensor(np.ones((n, 1))), sigma)
    return dc.add(dc.mul_col(dc.Tensor(np.eye(n)), sigma), dc.mul_col(dc.Tensor(a), keep))


def cge_apply(a, sigma: Tensor, x: Tensor) -> Tensor:
    """``(diag(sigma) + (I - diag(sigma)) A) @ x`` without forming the matrix."""
    ax = dc.const_matmul(a, x)
    return dc.add(ax, dc.mul_col(dc.sub(x, ax), sigma))


def squash(raw: Tensor) -> Tensor:
    return dc.activation(raw, "sigmoid")


def init_mlp(params: ParameterSet, prefix: str, rng, dims: Sequence[int]):
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params.add(f"{prefix}.w{k}", dc.glorot_uniform(rng, fan_in, fan_out))
        params.add(f"{prefix}.b{k}", np.zeros((1, fan_out)), decay=False)


def mlp_forward(params: ParameterSet, prefix: str, x, n_layers: int, act: str) -> Tensor:
    """Affine layers with ``act`` between them; the last layer is linear.

    ``x`` may be a constant (dense or sparse features) or a tensor.
    ``n_layers == 0`` is the identity map.
    """
    if n_layers == 0:
        return x if isinstance(x, Tensor) else Tensor(x.toarray() if sp.issparse(x) else x)
    out = None
    for k in range(n_layers):
        w, b = params[f"{prefix}.w{k}"], params[f"{prefix}.b{k}"]
        if out is None and not isinstance(x, Tensor):
            out = dc.const_matmul(x, w)
        else:
            out = dc.matmul(x if out is None else out, w)
        out = dc.add_row(out, b)
        if k < n_layers - 1:
            out = dc.activation(out, act)
    return out


def encoder_dims(d: int, r: int, n_layers: int) -> List[int]:
    if n_layers == 0:
        if d != r:
            raise ConfigError(f"identity encoder needs hidden_dim == feature dim, got r={r}, d={d}")
        return [d]
    return [d] + [r] * n_layers


def rows_or_all(rows: Optional[np.ndarray], n: int) -> np.ndarray:
    return np.arange(n) if rows is None else np.asarray(rows, dtype=np.intp)
