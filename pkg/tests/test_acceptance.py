"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that ``conftest.py`` prints in the terminal
summary, then asserts. The trained-model criteria share one module-scoped
training run with the benchmark configuration.
"""
import dataclasses
import re
import time
from types import SimpleNamespace

import numpy as np
import pytest

from lpgen.bench import (
    BenchConfig,
    build_models,
    directional_benchmark,
    directional_verdict,
    heldout_set,
    init_component,
    train_phase,
)
from lpgen.cli import main, save_base
from lpgen.control import init_controller
from lpgen.dataprep import ASPECT_LIMIT, crop_plan, preprocess, synth_dataset
from lpgen.diffusion import (
    ConditionBundle,
    NoiseSchedule,
    TrainConfig,
    Trainer,
    TrainingSet,
    draw_batch,
    guided_eps,
    phase_loss,
    predict,
    sample,
    trainable_params,
)
from lpgen.metrics import (
    FeatureExtractor,
    MetricReport,
    bhattacharyya,
    chamfer,
    contour_match,
    gram_distance,
    gram_matrix,
    hausdorff,
    lpips,
)
from lpgen.numerics import Rng, grad_check, save_checkpoint
from lpgen.text import tokenize
from lpgen.vision import Image, canny, rgb_histogram, save_png

from helpers import tiny_models

BC = BenchConfig()
N_SEEDS = 10


def _ckpt_bytes(path, component, params):
    save_checkpoint(path, component, params, {})
    return path.read_bytes()


def _base_bytes(path, models):
    save_base(path, models, {})
    return path.read_bytes()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    work = tmp_path_factory.mktemp("bench")
    synth_dataset(work / "train", BC.n_train, BC.size, BC.data_seed)
    models = build_models(BC.unet(), BC.model_seed)
    data = TrainingSet.from_manifest(work / "train" / "manifest.json", models.text.vocab, models.encoder)
    ns = SimpleNamespace(models=models, data=data, work=work, snap={}, seconds={})

    t0 = time.time()

    def base_500(_):
        ns.seconds["base_500"] = time.time() - t0

    ns.base_losses = train_phase(models, data, BC.phase_config("base"), BC.model_seed,
                                 hook=(500, base_500), extra_steps=BC.base_extra_steps)
    ns.seconds["base"] = time.time() - t0
    ns.snap["base_trained"] = _base_bytes(work / "b0.ckpt", models)

    def after_structure(m):
        ns.snap["base_after_structure"] = _base_bytes(work / "b1.ckpt", m)

    t0 = time.time()
    train_phase(models, data, BC.phase_config("structure"), BC.model_seed, hook=(100, after_structure))
    ns.seconds["structure"] = time.time() - t0

    init_component(models, "style", BC.model_seed)
    adapter_init = {k: v.data.copy() for k, v in models.adapter.items()}
    controller_before = _ckpt_bytes(work / "c0.ckpt", "structure_controller", models.controller)

    def after_style(m):
        ns.snap["base_after_style"] = _base_bytes(work / "b2.ckpt", m)
        ns.snap["controller_unchanged"] = (
            _ckpt_bytes(work / "c1.ckpt", "structure_controller", m.controller) == controller_before)
        ns.snap["adapter_changed"] = {k for k, v in m.adapter.items() if not np.array_equal(v.data, adapter_init[k])}
        ns.snap["adapter_names"] = set(m.adapter)

    t0 = time.time()
    train_phase(models, data, BC.phase_config("style"), BC.model_seed, hook=(100, after_style))
    ns.seconds["style"] = time.time() - t0
    ns.held = heldout_set(BC, work)
    return ns


def _bench_bundle(models, held, n, style=True, edge=True):
    refs = [held.refs[k] for k in sorted(held.refs)]
    style_emb = None
    if style:
        stack = np.stack([refs[i % len(refs)].data.transpose(2, 0, 1) for i in range(n)])
        style_emb = models.encoder.encode_batch(stack).data
    edges = None
    if edge:
        edges = np.stack([held.edges[i % len(held.edges)].mask[None].astype(np.float64) for i in range(n)])
    return ConditionBundle.from_prompts(["a landscape painting of layered mountains"] * n,
                                        models.text.vocab, style_emb, edges)


# -- 1: zero-initialised controller leaves sampling unchanged ---

def test_criterion_01_zero_init_identity(trained, acceptance_line):
    m = trained.models
    fresh = dataclasses.replace(m, controller=init_controller(m.base, m.cfg, Rng(99).child(3)), adapter=None)
    base_only = dataclasses.replace(m, controller=None, adapter=None)
    cond = _bench_bundle(m, trained.held, N_SEEDS, style=False)
    sched = NoiseSchedule.linear(BC.T)
    seeds = list(range(1000, 1000 + N_SEEDS))
    t0 = time.time()
    a = sample(fresh, cond, sched, w=BC.w, seed=seeds)
    b = sample(base_only, cond, sched, w=BC.w, seed=seeds)
    secs = time.time() - t0
    ok = np.array_equal(a, b) and secs < 30
    acceptance_line(1, ok, f"zero-init identity: {N_SEEDS} seeds bit-identical={np.array_equal(a, b)}, "
                           f"{secs:.1f}s (< 30s)")
    assert ok


# -- 2: lambda = 0 equals the style branch switched off ---

def test_criterion_02_lambda_degeneracy(trained, acceptance_line):
    m = trained.models
    cond = _bench_bundle(m, trained.held, N_SEEDS)
    plain = dataclasses.replace(cond, style_emb=None)
    sched = NoiseSchedule.linear(BC.T)
    seeds = list(range(2000, 2000 + N_SEEDS))
    a = sample(m, cond, sched, w=BC.w, lam=0.0, seed=seeds)
    b = sample(m, plain, sched, w=BC.w, lam=0.0, seed=seeds)
    styled = sample(m, cond, sched, w=BC.w, lam=1.0, seed=seeds)
    ok = np.array_equal(a, b)
    acceptance_line(2, ok, f"lambda=0 vs style disabled: {N_SEEDS} seeds bit-identical={ok} "
                           f"(lambda=1 differs: {not np.array_equal(styled, b)})")
    assert ok and not np.array_equal(styled, b)


# -- 3: guidance endpoints ---

def test_criterion_03_guidance_endpoints(trained, acceptance_line):
    m = trained.models
    r = np.random.default_rng(3)
    s = m.cfg.image_size
    bad = 0
    for i in range(100):
        x = r.normal(size=(1, 3, s, s))
        t = r.integers(0, BC.T, 1)
        cond = ConditionBundle.from_prompts(["ink wash mountains"], m.text.vocab,
                                            m.encoder.encode_batch(r.random((1, 3, s, s))).data,
                                            (r.random((1, 1, s, s)) > 0.8).astype(np.float64))
        c = predict(m, x, t, cond).data
        u = predict(m, x, t, cond.unconditional(), use_control=False).data
        bad += not np.array_equal(guided_eps(m, x, t, cond, 1.0), c)
        bad += not np.array_equal(guided_eps(m, x, t, cond, 0.0), u)
    acceptance_line(3, bad == 0, f"guidance endpoints: w=1 -> conditional, w=0 -> unconditional, "
                                 f"{200 - bad}/200 exact on 100 random inputs")
    assert bad == 0


# -- 4: gradients against central differences ---

def _tiny_data(m, n=1, seed=0):
    r = np.random.default_rng(seed)
    ts = tokenize("ink wash mountains", m.text.vocab)
    data = TrainingSet(r.random((n, 3, 8, 8)), (r.random((n, 1, 8, 8)) > 0.7).astype(float),
                       [[(np.array(ts.ids), np.array(ts.pad_mask))] for _ in range(n)], ["ink_wash"] * n)
    data.attach_style(m.encoder)
    return data


def test_criterion_04_gradient_check(acceptance_line):
    t0 = time.time()
    errs = {}
    for phase in ("base", "structure", "style"):
        m = tiny_models(seed=1, perturb_zero=True)
        data = _tiny_data(m)
        tr = Trainer(m, data, TrainConfig(phase=phase, batch=1, T=m.cfg.T))
        batch = draw_batch(data, np.array([0]), Rng(2))
        eps = Rng(3).normal(batch.x0.shape)
        no = np.zeros(1, bool)
        errs[phase] = grad_check(lambda: phase_loss(m, batch, phase, np.array([6]), eps, no, no, tr.sched),
                                 trainable_params(m, phase), max_coords=10, seed=4)
    secs = time.time() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and secs < 120
    acceptance_line(4, ok, "gradient check 8x8: " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
                    + f" (max < 1e-4), {secs:.1f}s (< 120s)")
    assert ok


# -- 5: earlier phases stay frozen ---

def test_criterion_05_freezing(trained, acceptance_line):
    snap = trained.snap
    base_ok = snap["base_trained"] == snap["base_after_structure"] == snap["base_after_style"]
    allowed = {n for n in snap["adapter_names"]
               if n.startswith(("proj.", "ln.")) or n.endswith((".k", ".v"))}
    only_allowed = snap["adapter_changed"] <= allowed and snap["adapter_names"] == allowed
    trained_something = bool(snap["adapter_changed"])
    ok = base_ok and snap["controller_unchanged"] and only_allowed and trained_something
    acceptance_line(5, ok, f"freezing: base bytes unchanged after 100 structure + 100 style steps={base_ok}, "
                           f"controller unchanged in style phase={snap['controller_unchanged']}, "
                           f"changed adapter params {sorted(snap['adapter_changed'])}")
    assert ok


# -- 6: base phase makes progress ---

def test_criterion_06_training_progress(trained, acceptance_line):
    losses = trained.base_losses[:500]
    lead, trail = np.mean(losses[:50]), np.mean(losses[450:500])
    secs = trained.seconds["base_500"]
    ok = len(losses) == 500 and trail < 0.7 * lead and secs < 600
    acceptance_line(6, ok, f"training progress: trailing/leading 50-step loss {trail:.4f}/{lead:.4f} "
                           f"= {trail / lead:.3f} (< 0.7), {secs:.0f}s (< 600s)")
    assert ok


# -- 7: directional controllability ---

def test_criterion_07_directional_benchmark(trained, acceptance_line):
    t0 = time.time()
    res = directional_benchmark(trained.models, trained.held, BC)
    secs = time.time() - t0
    verdict = directional_verdict(res)
    f, t, mis = res["full"], res["text_only"], res["mismatched_style"]
    ok = all(verdict.values()) and secs < 900
    train_secs = sum(trained.seconds[k] for k in ("base", "structure", "style"))
    acceptance_line(7, ok, f"directional benchmark ({len(trained.held.edges)} edges x 4 styles): "
                           f"chamfer {f['chamfer']:.3f} < {t['chamfer']:.3f}, "
                           f"hausdorff {f['hausdorff']:.3f} < {t['hausdorff']:.3f}, "
                           f"gram {f['gram']:.4e} < {mis['gram']:.4e}, hist {f['hist']:.4f} < {mis['hist']:.4f}; "
                           f"{secs:.0f}s (< 900s) after {train_secs:.0f}s training")
    assert ok, verdict


# -- 8: metric oracles ---

def _brute_chamfer(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(1).mean() + d.min(0).mean(), max(d.min(1).max(), d.min(0).max())


def test_criterion_08_metric_oracles(acceptance_line):
    exact = 0
    brute_close = 0
    for seed in range(200):
        r = np.random.default_rng(seed)
        n, k = r.integers(1, 301, size=2)
        a, b = r.random((n, 2)) * 100, r.random((k, 2)) * 100
        exact += chamfer(a, b) == chamfer(a, b, accelerated=False) and hausdorff(a, b) == hausdorff(
            a, b, accelerated=False)
        c, h = _brute_chamfer(a, b)
        brute_close += abs(chamfer(a, b) - c) < 1e-9 and abs(hausdorff(a, b) - h) < 1e-12

    bc_same = bhattacharyya([0.25, 0.75], [0.25, 0.75])
    bc_case = bhattacharyya([0.5, 0.5], [0.9, 0.1])
    gram = gram_matrix(np.array([[1.0, 2.0], [3.0, 4.0]]), normalize=False)

    fx = FeatureExtractor()
    r = np.random.default_rng(8)
    img = np.zeros((16, 16, 3))
    img[3:13, 4:11] = r.random(3) * 0.5 + 0.5
    img = Image(np.round(img * 255) / 255)
    edges = canny(img)
    zeros = {
        "lpips": lpips(img, img, fx),
        "gram": gram_distance(img, img, fx),
        "hist": bhattacharyya(rgb_histogram(img), rgb_histogram(img)),
        "chamfer": chamfer(edges, edges),
        "hausdorff": hausdorff(edges, edges),
        "contour": contour_match(img, img),
    }
    checks = {
        "accelerated == brute force (200 sets)": exact == 200,
        "independent O(nm) oracle": brute_close == 200,
        "bhattacharyya identical = 0": bc_same == 0.0,
        "bhattacharyya [.5,.5] vs [.9,.1] = 0.1116": abs(bc_case - 0.1116) < 1e-4
        and abs(bc_case + np.log(np.sqrt(0.45) + np.sqrt(0.05))) < 1e-6,
        "gram [[5,11],[11,25]]": np.array_equal(gram, [[5, 11], [11, 25]]),
        "six metrics zero on identical inputs": all(v == 0.0 for v in zeros.values()),
    }
    ok = all(checks.values())
    acceptance_line(8, ok, "metric oracles: " + "; ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
                    + f" (bhattacharyya case {bc_case:.6f})")
    assert ok, (checks, zeros)


# -- 9: preprocessing crop plan ---

def test_criterion_09_preprocessing(acceptance_line):
    r = np.random.default_rng(9)
    failures = []
    for _ in range(500):
        w, h = (int(v) for v in r.integers(1, 400, 2))
        s = int(r.integers(1, 96))
        crops = preprocess(Image(r.random((h, w, 3))), s)
        (sw, sh), corners = crop_plan(w, h, s)
        long_len = max(sw, sh)
        along = [c[0] if sw >= sh else c[1] for c in corners]
        centre = (long_len - s) // 2
        shifted_fit = centre - s // 2 >= 0 and centre + s // 2 + s <= long_len
        want = 3 if max(w, h) / min(w, h) > ASPECT_LIMIT and shifted_fit else 1
        if any(c.data.shape != (s, s, 3) for c in crops) or len(crops) != want or len(corners) != want:
            failures.append((w, h, s, len(crops), want))
        elif want == 3 and sorted(along) != [centre - s // 2, centre, centre + s // 2]:
            failures.append((w, h, s, along))
    (sw, sh), corners = crop_plan(1024, 512, 512)
    centres = sorted(x + 256 for x, _ in corners)
    ok = not failures and centres == [256, 512, 768] and (sw, sh) == (1024, 512)
    acceptance_line(9, ok, f"preprocessing: 500 random sizes, {len(failures)} violations; "
                           f"1024x512 at s=512 crop centres {centres}")
    assert ok, failures[:5]


# -- 10: report table ---

def test_criterion_10_report_table(tmp_path, capsys, acceptance_line):
    r = np.random.default_rng(10)
    for sub in ("gen", "ref", "edge"):
        (tmp_path / sub).mkdir()
    for i in range(3):
        ref = np.zeros((16, 16, 3))
        ref[2 + i : 12, 3:12 + i] = r.random(3) * 0.5 + 0.5
        gen = np.clip(ref + r.normal(0, 0.05, ref.shape), 0, 1)
        ref_img, gen_img = Image(np.round(ref * 255) / 255), Image(np.round(gen * 255) / 255)
        save_png(ref_img, tmp_path / "ref" / f"{i}.png")
        save_png(gen_img, tmp_path / "gen" / f"{i}.png")
        save_png(canny(ref_img), tmp_path / "edge" / f"{i}.png")
    code = main(["evaluate", "--generated", str(tmp_path / "gen"), "--reference", str(tmp_path / "ref"),
                 "--edges", str(tmp_path / "edge"), "--out", str(tmp_path / "rep.json"), "--table"])
    header, row = capsys.readouterr().out.splitlines()[:2]
    cells = row.split()
    means = MetricReport.read(tmp_path / "rep.json").means
    order = ("lpips", "gram", "hist", "chamfer", "hausdorff", "contour")
    expect = [f"{means[k]:.2e}" if k == "gram" else f"{means[k]:.2f}" for k in order]
    fmt_ok = all(re.fullmatch(r"-?\d+\.\d{2}e[+-]\d{2}" if k == "gram" else r"-?\d+\.\d{2}", c)
                 for k, c in zip(order, cells[1:]))
    ok = (code == 0 and header.split() == ["Model", "LPIPS", "GM", "HS", "CMS-I", "HD", "CMS-II"]
          and cells[1:] == expect and fmt_ok and means["gram"] > 0)
    acceptance_line(10, ok, f"report table: header {header.split()[1:]}, row {cells[1:]}")
    assert ok
