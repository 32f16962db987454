"""Style and structure evaluation measures and their report in the six-column table layout."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataprep import worker_count
from .layers import Params, conv, init_conv
from .numerics import Rng, Tensor, silu
from .vision import EdgeMap, Image, canny, load_edge_map, load_png, rgb_histogram, trace_contours

BC_FLOOR = 1e-12
METRIC_KEYS = ("lpips", "gram", "hist", "chamfer", "hausdorff", "contour")
TABLE_COLUMNS = ("LPIPS", "GM", "HS", "CMS-I", "HD", "CMS-II")
_STAGES = ((3, 16, 1), (16, 32, 2), (32, 64, 2))


class EmptyEdgeError(ValueError):
    """A point set or contour needed by a structure metric is empty."""


class EvaluationError(ValueError):
    pass


# -- feature-space metrics ---------------------------------------------------------

class FeatureExtractor:
    """Fixed-seed three-stage conv stack; ``features`` returns one C×H×W map per stage."""

    def __init__(self, seed: int = 4321, weights: tuple[float, ...] = (1.0, 1.0, 1.0)):
        if len(weights) != len(_STAGES):
            raise ValueError(f"need {len(_STAGES)} layer weights")
        self.seed = seed
        self.weights = tuple(float(w) for w in weights)
        rng = Rng(seed)
        self.params: Params = {}
        for i, (cin, cout, stride) in enumerate(_STAGES):
            init_conv(self.params, rng, f"f{i}", cin, cout, 3 if stride == 1 else 4)
            self.params[f"f{i}.b"].data = rng.normal((cout,), 0.1)

    def features(self, img: Image) -> list[np.ndarray]:
        data = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
        h = Tensor(2.0 * data.transpose(2, 0, 1)[None] - 1.0)
        out = []
        for i, (_, _, stride) in enumerate(_STAGES):
            h = silu(conv(self.params, f"f{i}", h, stride=stride, padding=1))
            out.append(h.data[0].copy())
        return out


def _check_same_size(a: Image, b: Image) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(f"image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def unit_normalize(f: np.ndarray) -> np.ndarray:
    """Scale each spatial position's channel vector to unit length."""
    return f / (np.sqrt((f * f).sum(axis=0, keepdims=True)) + 1e-10)


def lpips(a: Image, b: Image, fx: FeatureExtractor) -> float:
    _check_same_size(a, b)
    total = 0.0
    for w, fa, fb in zip(fx.weights, fx.features(a), fx.features(b)):
        d = w * (unit_normalize(fa) - unit_normalize(fb))
        total += float((d * d).sum(axis=0).mean())
    return total


def gram_matrix(f: np.ndarray, normalize: bool = True) -> np.ndarray:
    """``F F^T`` for a C×N (or C×H×W) feature map, optionally divided by the map's element count."""
    flat = f.reshape(f.shape[0], -1)
    g = flat @ flat.T
    return g / f.size if normalize else g


def gram_distance(a: Image, b: Image, fx: FeatureExtractor) -> float:
    _check_same_size(a, b)
    per_layer = [float(np.mean((gram_matrix(fa) - gram_matrix(fb)) ** 2))
                 for fa, fb in zip(fx.features(a), fx.features(b))]
    return float(np.mean(per_layer))


def bhattacharyya(p: np.ndarray, q: np.ndarray, tol: float = 1e-6) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    for h in (p, q):
        if np.any(h < 0) or abs(h.sum() - 1.0) > tol:
            raise ValueError("histograms must be non-negative and sum to 1")
    bc = min(max(float(np.sum(np.sqrt(p * q))), BC_FLOOR), 1.0)
    return -math.log(bc)


# -- point-set metrics --------------------------------------------------------------

def _as_points(a) -> np.ndarray:
    pts = a.points() if isinstance(a, EdgeMap) else np.asarray(a, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyEdgeError("edge point set is empty")
    return pts


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    return np.sqrt(dx * dx + dy * dy)


def nearest_brute(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a`` the distance to its nearest point of ``b``, O(|a|·|b|)."""
    return _dist(a[:, None, :], b[None, :, :]).min(axis=1)


def nearest_tree(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same values as ``nearest_brute``; the tree only picks the neighbour."""
    _, idx = cKDTree(b).query(a, k=1)
    return _dist(a, b[idx])


def directed(a, b, accelerated: bool = True) -> tuple[np.ndarray, np.ndarray]:
    pa, pb = _as_points(a), _as_points(b)
    nn = nearest_tree if accelerated else nearest_brute
    return nn(pa, pb), nn(pb, pa)


def chamfer(a, b, accelerated: bool = True) -> float:
    dab, dba = directed(a, b, accelerated)
    return float(dab.mean() + dba.mean())


def hausdorff(a, b, accelerated: bool = True) -> float:
    dab, dba = directed(a, b, accelerated)
    return float(max(dab.max(), dba.max()))


# -- contour shape descriptors ---------------------------------------------------------

def _hu_from_points(pts: list[tuple[int, int]]) -> np.ndarray:
    """Seven invariant moments of a set of integer pixel positions, unit mass each."""
    n = len(pts)
    sx = sum(x for x, _ in pts)
    sy = sum(y for _, y in pts)

    # n^k * central moment, kept in exact integer arithmetic
    def mu(p: int, q: int) -> float:
        s = sum((n * x - sx) ** p * (n * y - sy) ** q for x, y in pts)
        return s / n ** (p + q)

    def eta(p: int, q: int) -> float:
        return mu(p, q) / n ** (1 + (p + q) / 2)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    a, b = n30 + n12, n21 + n03
    h = np.array([
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11**2,
        (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2,
        a**2 + b**2,
        (n30 - 3 * n12) * a * (a**2 - 3 * b**2) + (3 * n21 - n03) * b * (3 * a**2 - b**2),
        (n20 - n02) * (a**2 - b**2) + 4 * n11 * a * b,
        (3 * n21 - n03) * a * (a**2 - 3 * b**2) - (n30 - 3 * n12) * b * (3 * a**2 - b**2),
    ])
    h[np.abs(h) < 1e-12] = 0.0
    return h


def log_scale(h: np.ndarray) -> np.ndarray:
    return np.sign(h) * np.log10(np.abs(h) + 1e-30)


def shape_descriptor(x: Image | EdgeMap) -> np.ndarray:
    """Log-scaled invariant moments of the largest outer contour."""
    em = x if isinstance(x, EdgeMap) else canny(x)
    contours = trace_contours(em)
    if not contours:
        raise EmptyEdgeError("no contour found")
    return log_scale(_hu_from_points(sorted(set(contours[0].points))))


def descriptor_distance(da: np.ndarray, db: np.ndarray) -> float:
    # |A|+|B| keeps each term non-negative for the negative log-scaled values
    den = np.abs(da) + np.abs(db)
    num = (da - db) ** 2
    safe = np.where(den > 0, den, 1.0)
    return float(np.sum(np.where(den > 0, num / safe, 0.0)))


def contour_match(a: Image | EdgeMap, b: Image | EdgeMap) -> float:
    return descriptor_distance(shape_descriptor(a), shape_descriptor(b))


# -- report -------------------------------------------------------------------------

@dataclass
class PairScores:
    name: str
    lpips: float
    gram: float
    hist: float
    chamfer: float
    hausdorff: float
    contour: float


@dataclass
class MetricReport:
    model: str
    per_pair: list[PairScores]
    skipped: list[str] = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return len(self.per_pair)

    @property
    def means(self) -> dict[str, float]:
        if not self.per_pair:
            return {k: float("nan") for k in METRIC_KEYS}
        return {k: math.fsum(getattr(p, k) for p in self.per_pair) / self.n_pairs for k in METRIC_KEYS}

    def to_json(self) -> dict:
        return {"model": self.model, "n_pairs": self.n_pairs,
                "per_pair": [asdict(p) for p in self.per_pair],
                "means": self.means, "skipped": list(self.skipped)}

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        return cls(d["model"], [PairScores(**p) for p in d["per_pair"]], list(d.get("skipped", [])))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path) -> "MetricReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def format_row(model: str, means: dict[str, float], width: int = 10) -> str:
    cells = [f"{means['lpips']:.2f}", f"{means['gram']:.2e}", f"{means['hist']:.2f}",
             f"{means['chamfer']:.2f}", f"{means['hausdorff']:.2f}", f"{means['contour']:.2f}"]
    return f"{model:<{width}}" + "".join(f" {c:>10}" for c in cells)


def render_table(reports: list[MetricReport]) -> str:
    width = max([len("Model")] + [len(r.model) for r in reports])
    header = f"{'Model':<{width}}" + "".join(f" {c:>10}" for c in TABLE_COLUMNS)
    return "\n".join([header] + [format_row(r.model, r.means, width) for r in reports]) + "\n"


@dataclass
class EvalSettings:
    fx: FeatureExtractor = field(default_factory=FeatureExtractor)
    hist_bins: int = 8
    empty_penalty: float | None = None  # None: image diagonal


def score_pair(name: str, gen: Image, ref: Image, target: EdgeMap, st: EvalSettings) -> PairScores:
    """Style scores against the reference, structure scores between canny(gen) and the target."""
    gen_edges = canny(gen)
    penalty = st.empty_penalty if st.empty_penalty is not None else math.hypot(gen.width, gen.height)
    try:
        ch, hd = chamfer(gen_edges, target), hausdorff(gen_edges, target)
    except EmptyEdgeError:
        both_empty = not gen_edges.mask.any() and not target.mask.any()
        ch = hd = 0.0 if both_empty else penalty
    try:
        da = shape_descriptor(gen_edges)
    except EmptyEdgeError:
        da = np.zeros(7)
    try:
        db = shape_descriptor(target)
    except EmptyEdgeError:
        db = np.zeros(7)
    return PairScores(
        name=name,
        lpips=lpips(gen, ref, st.fx),
        gram=gram_distance(gen, ref, st.fx),
        hist=bhattacharyya(rgb_histogram(_rgb(gen), st.hist_bins), rgb_histogram(_rgb(ref), st.hist_bins)),
        chamfer=ch,
        hausdorff=hd,
        contour=descriptor_distance(da, db),
    )


def _rgb(img: Image) -> Image:
    return img if img.channels == 3 else Image(np.repeat(img.data, 3, axis=2))


def evaluate(gen_dir, ref_dir, edge_dir, settings: EvalSettings | None = None,
             model: str = "LPGen", warn=None) -> MetricReport:
    """Score every PNG in ``gen_dir`` that has same-named counterparts in the other two directories."""
    st = settings or EvalSettings()
    gen_dir, ref_dir, edge_dir = Path(gen_dir), Path(ref_dir), Path(edge_dir)
    names, skipped = [], []
    for p in sorted(gen_dir.glob("*.png")):
        missing = [str(d / p.name) for d in (ref_dir, edge_dir) if not (d / p.name).is_file()]
        if missing:
            skipped.append(p.name)
            if warn:
                warn(f"skipping {p.name}: missing {', '.join(missing)}")
        else:
            names.append(p.name)
    if not names:
        raise EvaluationError(f"no aligned pairs between {gen_dir}, {ref_dir} and {edge_dir}")

    def one(name: str) -> PairScores:
        return score_pair(name, load_png(gen_dir / name), load_png(ref_dir / name),
                          load_edge_map(edge_dir / name), st)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        scores = list(pool.map(one, names))
    return MetricReport(model, scores, skipped)
