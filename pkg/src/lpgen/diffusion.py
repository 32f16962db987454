"""Noise schedule, training objective with condition omission, guidance and ancestral sampling."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .control import control_forward
from .dataprep import DatasetManifest
from .denoiser import UNetConfig, eps_forward
from .layers import Params, set_trainable
from .numerics import Adam, NumericError, Rng, Tensor, gather_rows, mse, mul
from .schedule import NoiseSchedule
from .style import StyleEncoder, style_condition
from .text import TextEmbedTable, ids_array, null_tokens, tokenize
from .vision import load_edge_map, load_png

PHASES = ("base", "structure", "style")


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be per-sample."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    ab = sched.alpha_bar[t]
    x0 = np.asarray(x0, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)


@dataclass
class TrainConfig:
    phase: str = "base"
    lr: float = 1e-4
    batch: int = 16
    steps: int = 500
    drop_text_p: float = 0.1
    drop_style_p: float = 0.1
    drop_both_p: float = 0.05
    seed: int = 0
    T: int = 50

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for name in ("drop_text_p", "drop_style_p", "drop_both_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")
        if self.drop_text_p + self.drop_style_p + self.drop_both_p >= 1.0:
            raise ValueError("dropout probabilities must sum to less than 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Models:
    cfg: UNetConfig
    base: Params
    text: TextEmbedTable
    encoder: StyleEncoder
    controller: Params | None = None
    adapter: Params | None = None

    def null_ids(self) -> tuple[np.ndarray, np.ndarray]:
        ts = null_tokens(self.text.vocab)
        return np.array(ts.ids), np.array(ts.pad_mask)


@dataclass
class ConditionBundle:
    """Per-sample conditions for a batch of B images.

    ``style_emb`` is the frozen encoder output (B×64); ``edge`` is B×1×H×W.
    Dropped text becomes the null-token sequence, a dropped style embedding
    becomes the zero vector.
    """

    text_ids: np.ndarray
    text_mask: np.ndarray
    style_emb: np.ndarray | None = None
    edge: np.ndarray | None = None
    drop_text: np.ndarray | None = None
    drop_style: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.text_ids.shape[0]

    @classmethod
    def from_prompts(cls, prompts: list[str], vocab, style_emb=None, edge=None) -> "ConditionBundle":
        ids, mask = ids_array([tokenize(p, vocab) for p in prompts])
        return cls(ids, mask, style_emb, edge)

    def unconditional(self) -> "ConditionBundle":
        b = self.batch
        return ConditionBundle(self.text_ids, self.text_mask,
                               None if self.style_emb is None else np.zeros_like(self.style_emb),
                               None, np.ones(b, bool), None)


def predict(models: Models, x_t, t, cond: ConditionBundle, lam: float | Tensor = 1.0,
            use_control: bool = True, use_style: bool = True) -> Tensor:
    """Noise prediction for a condition bundle; applies the bundle's drop flags."""
    ids, mask = cond.text_ids, cond.text_mask
    if cond.drop_text is not None and cond.drop_text.any():
        nid, nmask = models.null_ids()
        ids = np.where(cond.drop_text[:, None], nid[None, :], ids)
        mask = np.where(cond.drop_text[:, None], nmask[None, :], mask)
    text = mul(gather_rows(models.text.table, ids), (~mask)[..., None].astype(np.float64))

    style = None
    if use_style and models.adapter is not None and cond.style_emb is not None:
        g = cond.style_emb
        if cond.drop_style is not None and cond.drop_style.any():
            g = np.where(cond.drop_style[:, None], 0.0, g)
        style = style_condition(Tensor(g), models.adapter)

    residuals = None
    if use_control and models.controller is not None and cond.edge is not None:
        residuals = control_forward(models.controller, models.cfg, x_t, t, cond.edge, text, mask)
    return eps_forward(models.base, models.cfg, x_t, t, text, mask, style, lam, residuals)


def combine_guidance(eps_cond, eps_uncond, w: float, form: str = "affine"):
    """``w*cond + (1-w)*uncond`` ("affine") or ``(1+w)*cond - w*uncond`` ("standard")."""
    if form == "affine":
        return w * eps_cond + (1.0 - w) * eps_uncond
    if form == "standard":
        return (1.0 + w) * eps_cond - w * eps_uncond
    raise ValueError(f"unknown guidance form {form!r}")


def guided_eps(models: Models, x_t, t, cond: ConditionBundle, w: float, lam: float = 1.0,
               form: str = "affine", use_control: bool = True) -> np.ndarray:
    """Two predictor calls: conditional, then null text / zero style / no residuals."""
    if w < 0:
        raise ValueError("guidance weight must be non-negative")
    e_c = predict(models, x_t, t, cond, lam, use_control).data
    e_u = predict(models, x_t, t, cond.unconditional(), lam, use_control=False).data
    return combine_guidance(e_c, e_u, w, form)


def sample(models: Models, cond: ConditionBundle, sched: NoiseSchedule, w: float = 2.0,
           lam: float = 1.0, seed: int | list[int] = 0, form: str = "affine",
           use_control: bool = True, eps_fn: Callable | None = None) -> np.ndarray:
    """Ancestral reverse chain from pure noise; returns B×3×H×W in [0, 1].

    ``seed`` may be one seed per batch element; each element then draws its own
    starting noise and per-step noise.
    """
    if eps_fn is None and sched.T != models.cfg.T:
        raise ValueError(f"schedule has T={sched.T} but the model was built for T={models.cfg.T}")
    b = cond.batch
    if isinstance(seed, (int, np.integer)):
        rngs = [Rng(int(seed)).child(i) for i in range(b)]
    else:
        if len(seed) != b:
            raise ValueError("need one seed per batch element")
        rngs = [Rng(int(x)) for x in seed]
    s = models.cfg.image_size
    shape = (models.cfg.in_channels, s, s)
    x = np.stack([r.normal(shape) for r in rngs])
    fn = eps_fn or (lambda xt, tt: guided_eps(models, xt, tt, cond, w, lam, form, use_control))
    for t in reversed(range(sched.T)):
        eps = fn(x, np.full(b, t))
        coef = sched.beta[t] / math.sqrt(1.0 - sched.alpha_bar[t])
        x = (x - coef * eps) / math.sqrt(sched.alpha[t])
        if t > 0:
            x = x + math.sqrt(sched.beta[t]) * np.stack([r.normal(shape) for r in rngs])
        if not np.all(np.isfinite(x)):
            raise NumericError(f"sampler diverged at step {t}")
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainingSet:
    images: np.ndarray            # N×3×S×S in [0, 1]
    edges: np.ndarray             # N×1×S×S in {0, 1}
    captions: list[list[np.ndarray]]  # per record, per caption: (ids, mask)
    categories: list[str]
    style_emb: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_manifest(cls, path, vocab, encoder: StyleEncoder | None = None) -> "TrainingSet":
        path = Path(path)
        m = DatasetManifest.read(path)
        root = path.parent
        imgs, edges, caps, cats = [], [], [], []
        for r in m.records:
            img = load_png(root / r.image_path)
            data = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
            imgs.append(data.transpose(2, 0, 1))
            edges.append(load_edge_map(root / r.canny_path).mask[None].astype(np.float64))
            seqs = [tokenize(c, vocab) for c in r.captions]
            caps.append([(np.array(s.ids), np.array(s.pad_mask)) for s in seqs])
            cats.append(r.category)
        s = m.image_size
        ts = cls(np.array(imgs).reshape(-1, 3, s, s), np.array(edges).reshape(-1, 1, s, s), caps, cats)
        if encoder is not None:
            ts.attach_style(encoder)
        return ts

    def attach_style(self, encoder: StyleEncoder) -> None:
        self.style_emb = np.concatenate(
            [encoder.encode_batch(self.images[i : i + 64]).data for i in range(0, len(self), 64)], axis=0)


@dataclass
class Batch:
    x0: np.ndarray
    cond: ConditionBundle


def draw_batch(data: TrainingSet, idx: np.ndarray, rng: Rng) -> Batch:
    picks = [data.captions[i][int(rng.integers(0, len(data.captions[i])))] for i in idx]
    ids = np.stack([p[0] for p in picks])
    mask = np.stack([p[1] for p in picks])
    style = None if data.style_emb is None else data.style_emb[idx]
    return Batch(2.0 * data.images[idx] - 1.0, ConditionBundle(ids, mask, style, data.edges[idx]))


def trainable_params(models: Models, phase: str) -> list[Tensor]:
    if phase == "base":
        return list(models.base.values()) + [models.text.table]
    if phase == "structure":
        return list(models.controller.values())
    return list(models.adapter.values())


def _freeze_all_but(models: Models, phase: str) -> list[Tensor]:
    for group in (models.base, models.controller or {}, models.adapter or {}):
        set_trainable(group, False)
    models.text.table.requires_grad = False
    params = trainable_params(models, phase)
    for p in params:
        p.requires_grad = True
    return params


def phase_loss(models: Models, batch: Batch, phase: str, t: np.ndarray, eps: np.ndarray,
               drop_text: np.ndarray, drop_style: np.ndarray, sched: NoiseSchedule) -> Tensor:
    """Mean squared noise-prediction error for one phase with the dropout already drawn."""
    x_t = q_sample(batch.x0, t, eps, sched)
    c = batch.cond
    cond = ConditionBundle(c.text_ids, c.text_mask, c.style_emb, c.edge, drop_text, drop_style)
    if phase == "base":
        pred = predict(models, x_t, t, cond, lam=0.0, use_control=False, use_style=False)
    elif phase == "structure":
        pred = predict(models, x_t, t, cond, lam=0.0, use_control=True, use_style=False)
    else:
        pred = predict(models, x_t, t, cond, lam=1.0, use_control=False, use_style=True)
    return mse(pred, Tensor(eps))


def draw_noise(rng: Rng, batch: Batch, cfg: TrainConfig, sched: NoiseSchedule):
    b = batch.x0.shape[0]
    t = rng.integers(0, sched.T, b)
    eps = rng.normal(batch.x0.shape)
    u = rng.random(b)
    both = u < cfg.drop_both_p
    text_only = (u >= cfg.drop_both_p) & (u < cfg.drop_both_p + cfg.drop_text_p)
    lo = cfg.drop_both_p + cfg.drop_text_p
    style_only = (u >= lo) & (u < lo + cfg.drop_style_p)
    drop_text = both | text_only
    drop_style = both | style_only
    if cfg.phase == "base":
        drop_style = np.zeros(b, bool)
    return t, eps, drop_text, drop_style


class Trainer:
    """One phase of training over a fixed data set; deterministic under ``cfg.seed``."""

    def __init__(self, models: Models, data: TrainingSet, cfg: TrainConfig):
        if cfg.phase == "structure" and models.controller is None:
            raise ValueError("structure phase needs controller parameters")
        if cfg.phase == "style" and (models.adapter is None or data.style_emb is None):
            raise ValueError("style phase needs adapter parameters and style embeddings")
        if cfg.T != models.cfg.T:
            raise ValueError(f"training T={cfg.T} differs from the model's T={models.cfg.T}")
        self.models, self.data, self.cfg = models, data, cfg
        self.sched = NoiseSchedule.linear(cfg.T)
        self.params = _freeze_all_but(models, cfg.phase)
        self.opt = Adam(self.params, lr=cfg.lr)
        self.rng = Rng(cfg.seed)
        self.losses: list[float] = []

    def step(self) -> float:
        n = len(self.data)
        b = min(self.cfg.batch, n)
        idx = np.sort(self.rng.permutation(n)[:b])
        batch = draw_batch(self.data, idx, self.rng)
        t, eps, dt, ds = draw_noise(self.rng, batch, self.cfg, self.sched)
        return self.train_step(batch, t, eps, dt, ds)

    def train_step(self, batch: Batch, t, eps, drop_text, drop_style) -> float:
        self.opt.zero_grad()
        loss = phase_loss(self.models, batch, self.cfg.phase, t, eps, drop_text, drop_style, self.sched)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {len(self.losses)} ({self.cfg.phase} phase)")
        loss.backward()
        self.opt.step()
        self.losses.append(value)
        return value

    def run(self, steps: int | None = None, log_every: int = 0, log=print) -> list[float]:
        for i in range(steps if steps is not None else self.cfg.steps):
            v = self.step()
            if log_every and (i + 1) % log_every == 0:
                log(f"[{self.cfg.phase}] step {i + 1}: loss {v:.4f}")
        return self.losses


def write_loss_csv(path, losses: list[float]) -> None:
    lines = ["step,loss"] + [f"{i},{v:.10g}" for i, v in enumerate(losses, start=1)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_train_config(path) -> dict:
    return json.loads(Path(path).read_text())
