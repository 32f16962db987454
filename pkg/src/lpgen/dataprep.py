"""Dataset curation: size statistics, resize/crop rules, caption pairing, manifests.

Also hosts the procedural layered-ridge generator used as stand-in training data.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from . import STYLES
from .numerics import Rng
from .vision import Image, canny, crop, load_png, resize_bilinear, save_png

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ASPECT_LIMIT = 1.5

STYLE_PHRASES = {
    "azure_green": "azure green",
    "golden_splendor": "golden splendor",
    "ink_wash": "ink wash",
    "light_vermilion": "light vermilion",
}

DEFAULT_TEMPLATES = {
    cat: [
        "a {style} landscape painting of layered mountains",
        "{style} style painting with distant ridges and mist",
        "traditional {style} landscape with rolling hills under the sky",
    ]
    for cat in STYLES
}


class ManifestError(ValueError):
    pass


@dataclass
class ImageRecord:
    image_path: str
    captions: list[str]
    category: str
    canny_path: str

    def __post_init__(self):
        if self.category not in STYLES:
            raise ManifestError(f"unknown category {self.category!r}; expected one of {', '.join(STYLES)}")
        if not self.captions:
            raise ManifestError("a record needs at least one caption")

    def to_json(self) -> dict:
        return {"image": self.image_path, "canny": self.canny_path,
                "captions": list(self.captions), "category": self.category}

    @classmethod
    def from_json(cls, d: dict) -> "ImageRecord":
        return cls(image_path=d["image"], captions=list(d["captions"]),
                   category=d["category"], canny_path=d["canny"])


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    image_size: int
    format_version: int = FORMAT_VERSION

    def to_json(self) -> dict:
        return {"format_version": self.format_version, "image_size": self.image_size,
                "records": [r.to_json() for r in self.records]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            if d.get("format_version") != FORMAT_VERSION:
                raise ManifestError(f"unsupported manifest format_version {d.get('format_version')}")
            return cls(records=[ImageRecord.from_json(r) for r in d["records"]],
                       image_size=int(d["image_size"]), format_version=d["format_version"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{path}: malformed manifest ({exc})") from exc

    def validate(self, root) -> None:
        root = Path(root)
        missing = [p for r in self.records for p in (r.image_path, r.canny_path) if not (root / p).is_file()]
        if missing:
            raise ManifestError(f"{len(missing)} referenced files missing, e.g. {missing[0]}")


@dataclass
class SizeStats:
    below: int = 0
    equal: int = 0
    above: int = 0
    skipped: int = 0
    skipped_files: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.below + self.equal + self.above


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LPGEN_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


def size_stats(directory, s: int) -> SizeStats:
    """Classify every decodable image under ``directory`` by short side versus ``s``."""
    stats = SizeStats()
    for path in sorted(p for p in Path(directory).rglob("*") if p.is_file()):
        try:
            with PILImage.open(path) as im:
                w, h = im.size
        except (UnidentifiedImageError, OSError):
            log.warning("skipping undecodable file %s", path)
            stats.skipped += 1
            stats.skipped_files.append(str(path))
            continue
        short = min(w, h)
        if short < s:
            stats.below += 1
        elif short == s:
            stats.equal += 1
        else:
            stats.above += 1
    return stats


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def crop_plan(w: int, h: int, s: int) -> tuple[tuple[int, int], list[tuple[int, int]]]:
    """Scaled size and the top-left corners of the s×s crops to take.

    The short side is scaled to ``s``. Images with aspect ratio above 1.5 get two
    extra crops whose centres sit ``s/2`` either side of the centre along the long
    axis; a shifted window that leaves the image is discarded.
    """
    if w < 1 or h < 1:
        raise ValueError(f"degenerate image size {w}×{h}")
    if s < 1:
        raise ValueError("crop size must be positive")
    if w <= h:
        sw, sh = s, max(s, _round_half_up(h * s / w))
    else:
        sw, sh = max(s, _round_half_up(w * s / h)), s
    cx, cy = (sw - s) // 2, (sh - s) // 2
    corners = [(cx, cy)]
    if max(w, h) / min(w, h) > ASPECT_LIMIT:
        shift = s // 2
        long_len = max(sw, sh)
        base = cx if sw >= sh else cy
        shifted = [base - shift, base + shift]
        if all(0 <= o and o + s <= long_len for o in shifted):
            corners += [(o, cy) if sw >= sh else (cx, o) for o in shifted]
    return (sw, sh), corners


def preprocess(img: Image, s: int) -> list[Image]:
    (sw, sh), corners = crop_plan(img.width, img.height, s)
    scaled = resize_bilinear(img, sw, sh)
    out = []
    for x0, y0 in corners:
        piece = crop(scaled, x0, y0, s, s)
        if piece.width != s or piece.height != s:
            continue
        out.append(piece)
    return out


def _captions_for(category: str, templates: dict[str, list[str]]) -> list[str]:
    forms = templates.get(category) or DEFAULT_TEMPLATES[category]
    return [t.format(style=STYLE_PHRASES[category]) for t in forms]


def _ensure_rgb(img: Image) -> Image:
    return img if img.channels == 3 else Image(np.repeat(img.data, 3, axis=2))


def build_manifest(in_dir, out_dir, s: int, caption_templates: dict[str, list[str]] | None = None) -> DatasetManifest:
    """Preprocess ``in_dir/<category>/*`` into crops, edge maps and ``manifest.json``."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    templates = caption_templates or DEFAULT_TEMPLATES
    subdirs = sorted(p for p in in_dir.iterdir() if p.is_dir()) if in_dir.is_dir() else []
    bad = [p.name for p in subdirs if p.name not in STYLES]
    if bad:
        raise ManifestError(f"unknown category director{'y' if len(bad) == 1 else 'ies'} "
                            f"{', '.join(bad)}; legal names are {', '.join(STYLES)}")
    jobs = [(d.name, f) for d in subdirs for f in sorted(d.iterdir()) if f.is_file()]

    def work(job):
        cat, path = job
        try:
            img = _ensure_rgb(load_png(path))
        except (UnidentifiedImageError, OSError):
            log.warning("skipping undecodable file %s", path)
            return []
        recs = []
        for k, piece in enumerate(preprocess(img, s)):
            rel_img = Path("images") / cat / f"{path.stem}_{k}.png"
            rel_edge = Path("canny") / cat / f"{path.stem}_{k}.png"
            (out_dir / rel_img).parent.mkdir(parents=True, exist_ok=True)
            (out_dir / rel_edge).parent.mkdir(parents=True, exist_ok=True)
            save_png(piece, out_dir / rel_img)
            save_png(canny(piece), out_dir / rel_edge)
            recs.append(ImageRecord(rel_img.as_posix(), _captions_for(cat, templates), cat, rel_edge.as_posix()))
        return recs

    out_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        records = [r for recs in pool.map(work, jobs) for r in recs]
    manifest = DatasetManifest(records=records, image_size=s)
    manifest.write(out_dir / "manifest.json")
    return manifest


# -- procedural stand-in data ------------------------------------------------------

# sky top, sky bottom, far ridge, near ridge
PALETTES = {
    "azure_green": [(0.86, 0.93, 0.92), (0.72, 0.86, 0.84), (0.38, 0.66, 0.72), (0.08, 0.38, 0.33)],
    "golden_splendor": [(0.99, 0.94, 0.74), (0.95, 0.82, 0.52), (0.84, 0.62, 0.22), (0.52, 0.33, 0.08)],
    "ink_wash": [(0.96, 0.96, 0.96), (0.88, 0.88, 0.88), (0.58, 0.58, 0.58), (0.12, 0.12, 0.12)],
    "light_vermilion": [(0.98, 0.91, 0.87), (0.94, 0.80, 0.74), (0.84, 0.52, 0.42), (0.52, 0.24, 0.18)],
}


def ridge_painting(category: str, size: int, rng: Rng) -> Image:
    """Two to four noisy ridgelines rendered as filled silhouettes, far to near."""
    sky_top, sky_bot, far, near = (np.array(c) for c in PALETTES[category])
    jitter = rng.uniform(None, -0.04, 0.04)
    t = np.linspace(0.0, 1.0, size)[:, None, None]
    img = np.broadcast_to(sky_top * (1 - t) + sky_bot * t, (size, size, 3)).copy()
    x = np.arange(size) / size
    n = int(rng.integers(2, 5))
    for j in range(n):
        depth = j / max(n - 1, 1)
        base = size * (0.35 + 0.45 * (j + rng.uniform(None, 0.0, 0.6)) / n)
        line = np.full(size, base)
        for _ in range(3):
            freq = rng.uniform(None, 0.8, 3.5)
            amp = size * rng.uniform(None, 0.03, 0.12)
            line += amp * np.sin(2 * np.pi * freq * x + rng.uniform(None, 0, 2 * np.pi))
        colour = np.clip(far * (1 - depth) + near * depth + jitter, 0.0, 1.0)
        below = np.arange(size)[:, None] >= line[None, :]
        img[below] = colour
    return Image(np.clip(img, 0.0, 1.0))


def synth_dataset(out_dir, count: int, size: int, seed: int,
                  caption_templates: dict[str, list[str]] | None = None) -> DatasetManifest:
    """Write ``count`` procedural paintings (categories assigned round-robin) plus manifest."""
    if count < 1:
        raise ValueError("count must be at least 1")
    out_dir = Path(out_dir)
    templates = caption_templates or DEFAULT_TEMPLATES
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "canny").mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    records = []
    for i in range(count):
        cat = STYLES[i % len(STYLES)]
        img = ridge_painting(cat, size, root.child(i))
        name = f"{i:05d}_{cat}.png"
        save_png(img, out_dir / "images" / name)
        # edges of the stored 8-bit image, so they match what a loader sees
        save_png(canny(load_png(out_dir / "images" / name)), out_dir / "canny" / name)
        records.append(ImageRecord(f"images/{name}", _captions_for(cat, templates), cat, f"canny/{name}"))
    manifest = DatasetManifest(records=records, image_size=size)
    manifest.write(out_dir / "manifest.json")
    return manifest
