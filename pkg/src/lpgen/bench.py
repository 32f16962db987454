"""Desk-scale training run and directional controllability benchmark on synthetic paintings."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import STYLES
from .control import init_controller
from .dataprep import synth_dataset
from .denoiser import UNetConfig, init_denoiser
from .diffusion import ConditionBundle, Models, NoiseSchedule, TrainConfig, Trainer, TrainingSet, sample
from .metrics import FeatureExtractor, bhattacharyya, chamfer, gram_distance, hausdorff
from .numerics import Rng
from .style import StyleEncoder, init_adapter
from .text import TextEmbedTable
from .vision import EdgeMap, Image, canny, load_edge_map, load_png, rgb_histogram

log = logging.getLogger(__name__)

# carries no category words, so style can only come from the reference image
NEUTRAL_PROMPT = "a landscape painting of layered mountains"


@dataclass
class BenchConfig:
    size: int = 16
    channels: tuple[int, int] = (16, 32)
    n_train: int = 64
    n_heldout: int = 20
    data_seed: int = 0
    heldout_seed: int = 1
    model_seed: int = 0
    batch: int = 16
    T: int = 50
    base: TrainConfig = field(default_factory=lambda: TrainConfig(phase="base", steps=500, lr=1e-3))
    structure: TrainConfig = field(default_factory=lambda: TrainConfig(phase="structure", steps=300, lr=1e-3))
    style: TrainConfig = field(default_factory=lambda: TrainConfig(phase="style", steps=300, lr=1e-3))
    # the first 500 base steps are the progress check; the rest continue the same run
    base_extra_steps: int = 1000
    w: float = 2.0
    sample_seed: int = 100

    def unet(self) -> UNetConfig:
        return UNetConfig(channels=self.channels, image_size=self.size, T=self.T)

    def phase_config(self, phase: str) -> TrainConfig:
        """The phase's training config with the shared batch size and T filled in."""
        return replace(getattr(self, phase), batch=self.batch, T=self.T)

    def to_json(self) -> dict:
        return asdict(self)


def build_models(cfg: UNetConfig, seed: int) -> Models:
    rng = Rng(seed)
    base = init_denoiser(cfg, rng.child(1))
    text = TextEmbedTable.init(rng.child(2), width=cfg.text_dim)
    return Models(cfg, base, text, StyleEncoder(image_size=cfg.image_size))


def init_component(models: Models, phase: str, seed: int) -> None:
    rng = Rng(seed)
    if phase == "structure" and models.controller is None:
        models.controller = init_controller(models.base, models.cfg, rng.child(3))
    if phase == "style" and models.adapter is None:
        models.adapter = init_adapter(models.cfg, rng.child(5), models.base)


def train_phase(models: Models, data: TrainingSet, tc: TrainConfig, seed: int,
                hook: tuple[int, Callable] | None = None, extra_steps: int = 0) -> list[float]:
    """Initialise the phase's trainable component if absent, then run it.

    ``hook = (k, fn)`` calls ``fn(models)`` once after the first ``k`` steps.
    ``extra_steps`` continues the same optimiser run past ``tc.steps``.
    """
    init_component(models, tc.phase, seed)
    t0 = time.time()
    trainer = Trainer(models, data, tc)
    if hook is not None:
        k, fn = hook
        trainer.run(min(k, tc.steps), log_every=100, log=log.info)
        fn(models)
        trainer.run(tc.steps - min(k, tc.steps), log_every=100, log=log.info)
    else:
        trainer.run(tc.steps, log_every=100, log=log.info)
    if extra_steps:
        trainer.run(extra_steps, log_every=100, log=log.info)
    log.info("%s phase: %d steps in %.1fs", tc.phase, len(trainer.losses), time.time() - t0)
    return trainer.losses


@dataclass
class TrainedPipeline:
    models: Models
    data: TrainingSet
    losses: dict[str, list[float]]
    seconds: dict[str, float]


def train_pipeline(bc: BenchConfig, workdir, phases=("base", "structure", "style"),
                   hooks: dict[str, tuple[int, Callable]] | None = None) -> TrainedPipeline:
    workdir = Path(workdir)
    synth_dataset(workdir / "train", bc.n_train, bc.size, bc.data_seed)
    models = build_models(bc.unet(), bc.model_seed)
    data = TrainingSet.from_manifest(workdir / "train" / "manifest.json", models.text.vocab, models.encoder)
    losses, seconds = {}, {}
    for ph in phases:
        tc = bc.phase_config(ph)
        t0 = time.time()
        extra = bc.base_extra_steps if ph == "base" else 0
        losses[ph] = train_phase(models, data, tc, bc.model_seed, (hooks or {}).get(ph), extra)
        seconds[ph] = time.time() - t0
    return TrainedPipeline(models, data, losses, seconds)


@dataclass
class HeldOut:
    edges: list[EdgeMap]           # targets, one per held-out painting
    refs: dict[str, Image]         # one style reference per category


def heldout_set(bc: BenchConfig, workdir) -> HeldOut:
    """Edge maps from ``n_heldout`` fresh paintings plus one fresh reference per style."""
    root = Path(workdir) / "heldout"
    synth_dataset(root, bc.n_heldout + len(STYLES), bc.size, bc.heldout_seed)
    names = sorted((root / "images").glob("*.png"))
    edges = [load_edge_map(root / "canny" / p.name) for p in names[: bc.n_heldout]]
    refs = {}
    for p in names[bc.n_heldout :]:
        refs[p.stem.split("_", 1)[1]] = load_png(p)
    return HeldOut(edges, refs)


def _generate(models: Models, edges, ref_imgs, bc: BenchConfig, use_control: bool, use_style: bool):
    n = len(edges)
    s = bc.size
    style = None
    if use_style:
        stack = np.stack([r.data.transpose(2, 0, 1) for r in ref_imgs])
        style = models.encoder.encode_batch(stack).data
    edge = np.stack([e.mask[None].astype(np.float64) for e in edges]) if use_control else None
    cond = ConditionBundle.from_prompts([NEUTRAL_PROMPT] * n, models.text.vocab, style, edge)
    seeds = [bc.sample_seed + i for i in range(n)]
    out = sample(models, cond, NoiseSchedule.linear(bc.T), w=bc.w, lam=1.0 if use_style else 0.0,
                 seed=seeds, use_control=use_control)
    return [Image(np.round(x.transpose(1, 2, 0) * 255) / 255) for x in out.reshape(n, 3, s, s)]


def _structure_scores(imgs, edges):
    diag = float(np.hypot(*edges[0].mask.shape))
    ch, hd = [], []
    for img, e in zip(imgs, edges):
        g = canny(img)
        if not g.mask.any():
            ch.append(diag)
            hd.append(diag)
            continue
        ch.append(chamfer(g, e))
        hd.append(hausdorff(g, e))
    return float(np.mean(ch)), float(np.mean(hd))


def _style_scores(imgs, refs, fx):
    gm = [gram_distance(i, r, fx) for i, r in zip(imgs, refs)]
    hs = [bhattacharyya(rgb_histogram(i), rgb_histogram(r)) for i, r in zip(imgs, refs)]
    return float(np.mean(gm)), float(np.mean(hs))


def directional_benchmark(models: Models, held: HeldOut, bc: BenchConfig) -> dict[str, dict[str, float]]:
    """Full model against a text-only and a mismatched-style baseline on every (edge, style) pair.

    All three variants share per-pair sampling seeds.
    """
    pairs = [(e, cat) for cat in STYLES for e in held.edges]
    edges = [e for e, _ in pairs]
    refs = [held.refs[c] for _, c in pairs]
    # each pair's wrong reference is the style two places along
    wrong = [held.refs[STYLES[(STYLES.index(c) + 2) % len(STYLES)]] for _, c in pairs]
    fx = FeatureExtractor()
    results = {}
    for name, ctrl, sty, style_in in (("full", True, True, refs), ("text_only", False, False, refs),
                                      ("mismatched_style", True, True, wrong)):
        t0 = time.time()
        imgs = _generate(models, edges, style_in, bc, ctrl, sty)
        ch, hd = _structure_scores(imgs, edges)
        gm, hs = _style_scores(imgs, refs, fx)
        results[name] = {"chamfer": ch, "hausdorff": hd, "gram": gm, "hist": hs}
        log.info("%s: %s (%.1fs)", name, results[name], time.time() - t0)
    return results


def directional_verdict(res: dict[str, dict[str, float]]) -> dict[str, bool]:
    full, txt, mis = res["full"], res["text_only"], res["mismatched_style"]
    return {
        "chamfer_below_text_only": full["chamfer"] < txt["chamfer"],
        "hausdorff_below_text_only": full["hausdorff"] < txt["hausdorff"],
        "gram_below_mismatched": full["gram"] < mis["gram"],
        "hist_below_mismatched": full["hist"] < mis["hist"],
    }
