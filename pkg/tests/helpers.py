"""Small model configurations shared by the model-level tests."""
import numpy as np

from lpgen.control import init_controller
from lpgen.denoiser import UNetConfig, init_denoiser
from lpgen.diffusion import ConditionBundle, Models
from lpgen.numerics import Rng
from lpgen.style import StyleEncoder, init_adapter
from lpgen.text import TextEmbedTable, ids_array, tokenize

TINY = UNetConfig(channels=(8, 16), time_dim=16, text_dim=8, groups=4, image_size=8, T=10)


def tiny_models(seed=0, cfg=TINY, controller=True, adapter=True, perturb_zero=False) -> Models:
    rng = Rng(seed)
    base = init_denoiser(cfg, rng.child(1))
    text = TextEmbedTable.init(rng.child(2), width=cfg.text_dim)
    m = Models(cfg, base, text, StyleEncoder(seed=7, image_size=cfg.image_size))
    if controller:
        m.controller = init_controller(base, cfg, rng.child(3))
        if perturb_zero:
            r = rng.child(4)
            for k, t in m.controller.items():
                if k.startswith(("zin", "zout")):
                    t.data = r.normal(t.shape, 0.3)
    if adapter:
        m.adapter = init_adapter(cfg, rng.child(5), base)
    return m


def random_bundle(models: Models, b=2, seed=0, style=True, edge=True) -> ConditionBundle:
    rng = np.random.default_rng(seed)
    s = models.cfg.image_size
    prompts = ["ink wash landscape", "golden splendor hills"] * b
    ids, mask = ids_array([tokenize(p, models.text.vocab) for p in prompts[:b]])
    style_emb = models.encoder.encode_batch(rng.random((b, 3, s, s))).data if style else None
    edges = (rng.random((b, 1, s, s)) > 0.7).astype(float) if edge else None
    return ConditionBundle(ids, mask, style_emb, edges)
