"""Style controller: frozen image encoder, 4-token projection, per-site image key/value weights."""
from __future__ import annotations

import numpy as np

from .denoiser import ATTN_SITES, StyleCondition, UNetConfig
from .layers import Params, conv, init_conv, init_norm
from .numerics import DimensionError, Rng, Tensor, layer_norm, matmul, reshape, silu
from .vision import Image

N_TOKENS = 4
EMBED_DIM = 64
_ENCODER_STAGES = ((3, 16, 2), (16, 32, 2), (32, 64, 2), (64, 64, 1))


class StyleEncoder:
    """Fixed random conv stack -> global average pool, width 64. Never trained."""

    def __init__(self, seed: int = 1234, image_size: int = 32):
        self.seed = seed
        self.image_size = image_size
        rng = Rng(seed)
        self.params: Params = {}
        for i, (cin, cout, _) in enumerate(_ENCODER_STAGES):
            k = 4 if _ENCODER_STAGES[i][2] == 2 else 3
            init_conv(self.params, rng, f"s{i}", cin, cout, k)
            self.params[f"s{i}.w"].data *= 1.7
            self.params[f"s{i}.b"].data = rng.normal((cout,), 0.1)

    def encode_batch(self, x: np.ndarray) -> Tensor:
        """``x`` is B×3×H×W in [0, 1]; returns B×64."""
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3] or x.shape[2] != self.image_size:
            raise ValueError(f"style image must be 3×{self.image_size}×{self.image_size}, got {x.shape[1:]}")
        h = Tensor(2.0 * x - 1.0)
        for i, (_, _, stride) in enumerate(_ENCODER_STAGES):
            h = silu(conv(self.params, f"s{i}", h, stride=stride, padding=1))
        # tape-free: encoder parameters never require grad
        return Tensor(h.data.mean(axis=(2, 3)))

    def encode(self, img: Image) -> Tensor:
        if img.channels != 3:
            raise ValueError("style image must have 3 channels")
        return reshape(self.encode_batch(img.data.transpose(2, 0, 1)[None]), (EMBED_DIM,))


def encode_style(img: Image, encoder: StyleEncoder) -> Tensor:
    return encoder.encode(img)


def init_adapter(cfg: UNetConfig, rng: Rng, base: Params | None = None) -> Params:
    """Projection, token layer norm and one (W_k, W_v) pair per cross-attention site.

    When ``base`` is given the image key/value weights start as copies of the
    base's text key/value weights at the same site.
    """
    d = cfg.text_dim
    P: Params = {"proj.w": Tensor(rng.normal((EMBED_DIM, N_TOKENS * d), 1.0 / np.sqrt(EMBED_DIM))),
                 "proj.b": Tensor(np.zeros(N_TOKENS * d))}
    init_norm(P, "ln", d)
    c2 = cfg.channels[1]
    for site in ATTN_SITES:
        for kind in ("k", "v"):
            src = None if base is None else base[f"{site}.attn.{kind}.w"].data
            data = src.copy() if src is not None else rng.normal((d, c2), 1.0 / np.sqrt(d))
            P[f"{site}.{kind}"] = Tensor(data)
    for k, t in P.items():
        t.name = k
    return P


def project_tokens(g: Tensor, P: Params) -> Tensor:
    """g (64,) or (B, 64) -> layer-normalised tokens (4, d) or (B, 4, d)."""
    if g.shape[-1] != P["proj.w"].shape[0]:
        raise DimensionError(f"embedding width {g.shape[-1]} != projection input {P['proj.w'].shape[0]}")
    d = P["ln.g"].shape[0]
    flat = matmul(reshape(g, (-1, g.shape[-1])), P["proj.w"]) + P["proj.b"]
    tokens = layer_norm(reshape(flat, (-1, N_TOKENS, d)), P["ln.g"], P["ln.b"])
    return reshape(tokens, (N_TOKENS, d)) if g.ndim == 1 else tokens


def style_kv(c_i: Tensor, layer: str, P: Params) -> tuple[Tensor, Tensor]:
    if f"{layer}.k" not in P:
        raise KeyError(f"no image key/value weights for layer {layer!r}")
    return matmul(c_i, P[f"{layer}.k"]), matmul(c_i, P[f"{layer}.v"])


def style_condition(g: Tensor, P: Params) -> StyleCondition:
    tokens = project_tokens(g, P)
    if tokens.ndim == 2:
        tokens = reshape(tokens, (1,) + tokens.shape)
    return StyleCondition(tokens=tokens, kv={s: (P[f"{s}.k"], P[f"{s}.v"]) for s in ATTN_SITES})
