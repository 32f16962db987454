"""Parameter initialisers and functional building blocks over flat ``name -> Tensor`` dicts."""
from __future__ import annotations

import math

import numpy as np

from .numerics import (
    Rng,
    Tensor,
    conv2d,
    group_norm,
    matmul,
    reshape,
    silu,
    softmax_rows,
    transpose,
)

Params = dict[str, Tensor]

MASK_BIAS = -1e9


def init_conv(P: Params, rng: Rng, name: str, cin: int, cout: int, k: int, zero: bool = False) -> None:
    scale = 0.0 if zero else 1.0 / math.sqrt(cin * k * k)
    P[f"{name}.w"] = Tensor(rng.normal((cout, cin, k, k), scale) if not zero else np.zeros((cout, cin, k, k)),
                            name=f"{name}.w")
    P[f"{name}.b"] = Tensor(np.zeros(cout), name=f"{name}.b")


def init_dense(P: Params, rng: Rng, name: str, din: int, dout: int, bias: bool = True,
               scale: float | None = None) -> None:
    s = 1.0 / math.sqrt(din) if scale is None else scale
    P[f"{name}.w"] = Tensor(rng.normal((din, dout), s), name=f"{name}.w")
    if bias:
        P[f"{name}.b"] = Tensor(np.zeros(dout), name=f"{name}.b")


def init_norm(P: Params, name: str, c: int) -> None:
    P[f"{name}.g"] = Tensor(np.ones(c), name=f"{name}.g")
    P[f"{name}.b"] = Tensor(np.zeros(c), name=f"{name}.b")


def conv(P: Params, name: str, x: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    w = P[f"{name}.w"]
    pad = (w.shape[-1] - 1) // 2 if padding is None else padding
    return conv2d(x, w, P[f"{name}.b"], stride, pad)


def dense(P: Params, name: str, x: Tensor) -> Tensor:
    y = matmul(x, P[f"{name}.w"])
    b = P.get(f"{name}.b")
    return y if b is None else y + b


def norm(P: Params, name: str, x: Tensor, groups: int) -> Tensor:
    return group_norm(x, groups, P[f"{name}.g"], P[f"{name}.b"])


def init_resblock(P: Params, rng: Rng, name: str, cin: int, cout: int, time_dim: int) -> None:
    init_norm(P, f"{name}.n1", cin)
    init_conv(P, rng, f"{name}.c1", cin, cout, 3)
    init_dense(P, rng, f"{name}.t", time_dim, cout)
    init_norm(P, f"{name}.n2", cout)
    init_conv(P, rng, f"{name}.c2", cout, cout, 3)
    if cin != cout:
        init_conv(P, rng, f"{name}.skip", cin, cout, 1)


def resblock(P: Params, name: str, x: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = conv(P, f"{name}.c1", silu(norm(P, f"{name}.n1", x, groups)))
    tproj = dense(P, f"{name}.t", silu(temb))
    h = h + reshape(tproj, tproj.shape + (1, 1))
    h = conv(P, f"{name}.c2", silu(norm(P, f"{name}.n2", h, groups)))
    skip = conv(P, f"{name}.skip", x, padding=0) if f"{name}.skip.w" in P else x
    return skip + h


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention; ``key_mask`` is True on keys to ignore."""
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(q.shape[-1]))
    bias = None
    if key_mask is not None:
        bias = np.where(key_mask, MASK_BIAS, 0.0)[..., None, :]
    return matmul(softmax_rows(scores, bias), v)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def copy_params(P: Params, prefixes: tuple[str, ...] | None = None) -> Params:
    return {k: Tensor(v.data.copy(), name=k) for k, v in P.items()
            if prefixes is None or k.split(".")[0] in prefixes}


def set_trainable(P: Params, flag: bool) -> None:
    for t in P.values():
        t.requires_grad = flag
        t.grad = None
