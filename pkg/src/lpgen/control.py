"""Structure controller: trainable encoder replica fed the edge map through zero convolutions.

Per-stage outputs pass through output zero convolutions and are added to the
frozen base network's skip connections and middle block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import RESIDUAL_SITES, UNetConfig, encoder_stages, eps_forward, time_mlp
from .layers import Params, conv, copy_params, init_conv
from .numerics import DimensionError, Rng, Tensor, as_tensor, silu

REPLICA_PREFIXES = ("time", "conv_in", "enc1", "down", "enc2", "mid")
STEM_WIDTH = 16


class ConfigurationError(ValueError):
    pass


def init_controller(base: Params, cfg: UNetConfig, rng: Rng) -> Params:
    """Replica of the base encoder+middle, an edge stem, and all-zero input/output convolutions."""
    c1, c2 = cfg.channels
    P = copy_params(base, REPLICA_PREFIXES)
    init_conv(P, rng, "stem.0", 1, STEM_WIDTH, 3)
    init_conv(P, rng, "stem.1", STEM_WIDTH, STEM_WIDTH, 3)
    init_conv(P, rng, "stem.2", STEM_WIDTH, c1, 3)
    init_conv(P, rng, "zin", c1, c1, 1, zero=True)
    for site, c in zip(RESIDUAL_SITES, (c1, c2, c2)):
        init_conv(P, rng, f"zout.{site}", c, c, 1, zero=True)
    for k, t in P.items():
        t.name = k
    return P


def control_forward(P: Params, cfg: UNetConfig, x_t, t, edge, text: Tensor,
                    text_mask: np.ndarray | None = None, use_text: bool = True) -> dict[str, Tensor]:
    """Residuals ``Z(F(x + Z(stem(edge), θ_z1), θ_c), θ_z2)`` for each injection site."""
    x_t, edge = as_tensor(x_t), as_tensor(edge)
    if edge.ndim != 4 or edge.shape[1] != 1 or edge.shape[2:] != x_t.shape[2:]:
        raise DimensionError(f"edge condition {edge.shape} does not match image {x_t.shape}")
    t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
    temb = time_mlp(P, t, cfg.time_dim)
    e = silu(conv(P, "stem.0", edge))
    e = silu(conv(P, "stem.1", e))
    e = conv(P, "stem.2", e)
    h = conv(P, "conv_in", x_t) + conv(P, "zin", e, padding=0)
    if not use_text:
        text = text * 0.0
    stages = encoder_stages(P, cfg, h, temb, text, text_mask)
    return {site: conv(P, f"zout.{site}", stages[site], padding=0) for site in RESIDUAL_SITES}


@dataclass
class ControlledPredictor:
    """Frozen base plus structure controller; callable like ``eps_forward`` with an edge map."""

    base: Params
    controller: Params
    cfg: UNetConfig
    use_text: bool = True

    def __post_init__(self):
        for k in REPLICA_PREFIXES:
            for name, t in self.base.items():
                if name.split(".")[0] == k and (name not in self.controller or
                                                self.controller[name].shape != t.shape):
                    raise ConfigurationError(f"controller replica lacks a parameter matching base {name} {t.shape}")
        for t in self.base.values():
            t.requires_grad = False

    def residuals(self, x_t, t, edge, text, text_mask=None):
        return control_forward(self.controller, self.cfg, x_t, t, edge, text, text_mask, self.use_text)

    def __call__(self, x_t, t, text, text_mask=None, style=None, lam=1.0, edge=None):
        res = None if edge is None else self.residuals(x_t, t, edge, text, text_mask)
        return eps_forward(self.base, self.cfg, x_t, t, text, text_mask, style, lam, res)


def attach(base: Params, controller: Params, cfg: UNetConfig) -> ControlledPredictor:
    return ControlledPredictor(base, controller, cfg)
