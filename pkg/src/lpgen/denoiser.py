"""Pixel-space U-Net noise predictor with decoupled text/image cross-attention."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    Params,
    attention,
    conv,
    dense,
    init_conv,
    init_dense,
    init_norm,
    init_resblock,
    norm,
    resblock,
    timestep_embedding,
)
from .numerics import (
    DimensionError,
    Rng,
    Tensor,
    as_tensor,
    concat,
    matmul,
    reshape,
    silu,
    transpose,
    upsample_nearest2x,
)
from .schedule import linear_alpha_bar

ATTN_SITES = ("enc2", "mid", "dec2")
OUTPUTS = ("v", "eps")
# controller residuals land on these base activations
RESIDUAL_SITES = ("enc1", "enc2", "mid")


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple[int, int] = (32, 64)
    time_dim: int = 64
    text_dim: int = 64
    groups: int = 8
    image_size: int = 32
    in_channels: int = 3
    T: int = 50
    # "v": the network output F is mixed as sqrt(abar) F + sqrt(1 - abar) x_t; "eps": F is the noise
    output: str = "v"

    def __post_init__(self):
        if self.output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}, got {self.output!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class StyleCondition:
    """Image tokens c_i (B×4×d) and the per-site key/value projections that read them."""

    tokens: Tensor
    kv: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)


def decoupled_attention(
    z: Tensor,
    w_q: Tensor,
    text_kv: tuple[Tensor, Tensor],
    image_kv: tuple[Tensor, Tensor] | None = None,
    lam: float | Tensor = 1.0,
    text_mask: np.ndarray | None = None,
) -> Tensor:
    """``Attention(Q, K_t, V_t) + lam * Attention(Q, K_i, V_i)`` with ``Q = z @ w_q``.

    The image branch is not evaluated at all when ``image_kv`` is None or ``lam``
    is the number 0, so the result is then bit-identical to text-only attention.
    """
    if z.shape[-1] != w_q.shape[0]:
        raise DimensionError(f"query features {z.shape} do not match W_q {w_q.shape}")
    q = matmul(z, w_q)
    kt, vt = text_kv
    if kt.shape[-1] != q.shape[-1] or kt.shape[-2] != vt.shape[-2]:
        raise DimensionError(f"text keys {kt.shape} / values {vt.shape} incompatible with queries {q.shape}")
    out = attention(q, kt, vt, text_mask)
    if image_kv is None or (not isinstance(lam, Tensor) and lam == 0):
        return out
    ki, vi = image_kv
    if ki.shape[-1] != q.shape[-1] or ki.shape[-2] != vi.shape[-2]:
        raise DimensionError(f"image keys {ki.shape} / values {vi.shape} incompatible with queries {q.shape}")
    return out + attention(q, ki, vi) * lam


def init_attn(P: Params, rng: Rng, name: str, c: int, text_dim: int) -> None:
    init_norm(P, f"{name}.norm", c)
    init_dense(P, rng, f"{name}.q", c, c, bias=False)
    init_dense(P, rng, f"{name}.k", text_dim, c, bias=False)
    init_dense(P, rng, f"{name}.v", text_dim, c, bias=False)
    init_dense(P, rng, f"{name}.o", c, c)


def attn_block(P: Params, name: str, h: Tensor, text: Tensor, text_mask, groups: int,
               style: StyleCondition | None = None, site: str | None = None, lam=1.0) -> Tensor:
    b, c, hh, ww = h.shape
    z = transpose(reshape(norm(P, f"{name}.norm", h, groups), (b, c, hh * ww)), (0, 2, 1))
    text_kv = (matmul(text, P[f"{name}.k.w"]), matmul(text, P[f"{name}.v.w"]))
    image_kv = None
    if style is not None and site in style.kv:
        wk, wv = style.kv[site]
        image_kv = (matmul(style.tokens, wk), matmul(style.tokens, wv))
    a = decoupled_attention(z, P[f"{name}.q.w"], text_kv, image_kv, lam, text_mask)
    a = dense(P, f"{name}.o", a)
    return h + reshape(transpose(a, (0, 2, 1)), (b, c, hh, ww))


def init_denoiser(cfg: UNetConfig, rng: Rng) -> Params:
    c1, c2 = cfg.channels
    P: Params = {}
    init_dense(P, rng, "time.l1", cfg.time_dim, cfg.time_dim)
    init_dense(P, rng, "time.l2", cfg.time_dim, cfg.time_dim)
    init_conv(P, rng, "conv_in", cfg.in_channels, c1, 3)
    init_resblock(P, rng, "enc1", c1, c1, cfg.time_dim)
    init_conv(P, rng, "down", c1, c2, 4)
    init_resblock(P, rng, "enc2", c2, c2, cfg.time_dim)
    init_attn(P, rng, "enc2.attn", c2, cfg.text_dim)
    init_resblock(P, rng, "mid", c2, c2, cfg.time_dim)
    init_attn(P, rng, "mid.attn", c2, cfg.text_dim)
    init_resblock(P, rng, "dec2", 2 * c2, c2, cfg.time_dim)
    init_attn(P, rng, "dec2.attn", c2, cfg.text_dim)
    init_conv(P, rng, "up", c2, c1, 3)
    init_resblock(P, rng, "dec1", 2 * c1, c1, cfg.time_dim)
    init_norm(P, "out.norm", c1)
    init_conv(P, rng, "out.conv", c1, cfg.in_channels, 3)
    # input-to-output 1×1 path; lets the head pass the noisy input's scale through the norms
    init_conv(P, rng, "out.skip", cfg.in_channels, cfg.in_channels, 1, zero=True)
    return P


def time_mlp(P: Params, t: np.ndarray, dim: int) -> Tensor:
    emb = Tensor(timestep_embedding(t, dim))
    return dense(P, "time.l2", silu(dense(P, "time.l1", emb)))


def encoder_stages(P: Params, cfg: UNetConfig, h: Tensor, temb: Tensor, text: Tensor, text_mask,
                   style: StyleCondition | None = None, lam=1.0) -> dict[str, Tensor]:
    """Encoder and middle blocks from the stem output; shared by the base and its replica."""
    g = cfg.groups
    s1 = resblock(P, "enc1", h, temb, g)
    d = conv(P, "down", s1, stride=2, padding=1)
    s2 = attn_block(P, "enc2.attn", resblock(P, "enc2", d, temb, g), text, text_mask, g, style, "enc2", lam)
    m = attn_block(P, "mid.attn", resblock(P, "mid", s2, temb, g), text, text_mask, g, style, "mid", lam)
    return {"enc1": s1, "enc2": s2, "mid": m}


def eps_forward(
    P: Params,
    cfg: UNetConfig,
    x_t,
    t,
    text: Tensor,
    text_mask: np.ndarray | None = None,
    style: StyleCondition | None = None,
    lam: float | Tensor = 1.0,
    residuals: dict[str, Tensor] | None = None,
) -> Tensor:
    """Predict the noise in ``x_t`` (B×3×H×W) at integer timesteps ``t`` (B,).

    With ``cfg.output == "v"`` the U-Net output is blended with ``x_t`` using the
    model's own schedule, which keeps the sampler stable near pure noise.
    """
    x_t = as_tensor(x_t)
    if x_t.ndim != 4 or x_t.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected B×{cfg.in_channels}×H×W input, got {x_t.shape}")
    if x_t.shape[2] % 2 or x_t.shape[3] % 2:
        raise DimensionError(f"spatial size {x_t.shape[2:]} must be even")
    t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
    if np.any(t < 0) or np.any(t >= cfg.T):
        raise ValueError(f"timestep out of range [0, {cfg.T})")
    g = cfg.groups
    temb = time_mlp(P, t, cfg.time_dim)
    h = conv(P, "conv_in", x_t)
    st = encoder_stages(P, cfg, h, temb, text, text_mask, style, lam)
    if residuals is not None:
        for site in RESIDUAL_SITES:
            r = residuals.get(site)
            if r is None:
                continue
            if r.shape != st[site].shape:
                raise DimensionError(f"residual for {site} has shape {r.shape}, expected {st[site].shape}")
            st[site] = st[site] + r
    u = resblock(P, "dec2", concat([st["mid"], st["enc2"]], axis=1), temb, g)
    u = attn_block(P, "dec2.attn", u, text, text_mask, g, style, "dec2", lam)
    u = conv(P, "up", upsample_nearest2x(u))
    u = resblock(P, "dec1", concat([u, st["enc1"]], axis=1), temb, g)
    out = conv(P, "out.conv", silu(norm(P, "out.norm", u, g))) + conv(P, "out.skip", x_t, padding=0)
    if cfg.output == "eps":
        return out
    # at high noise the prediction leans on x_t itself, so errors in F are damped by sqrt(abar)
    ab = linear_alpha_bar(cfg.T)[t].reshape(-1, 1, 1, 1)
    return out * np.sqrt(ab) + x_t * np.sqrt(1.0 - ab)
