"""Foreground/background datasets: a synthetic shapes generator and image-folder loading."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .networks import SUPPORTED_RESOLUTIONS, ConfigError
from .numerics import rng_stream

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_COVERAGE, MAX_COVERAGE = 0.10, 0.40
MIN_COLOR_GAP = 0.45


class DataError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"           # "synthetic" | "folders"
    root: str | None = None           # folders: <root>/foreground, <root>/background, <root>/masks
    resolution: int = 64
    size: int = 1000
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}, got {self.resolution}")
        if self.kind == "synthetic":
            if self.size < 1:
                raise ConfigError("synthetic dataset size must be >= 1")
        elif self.kind == "folders":
            if not self.root:
                raise ConfigError("folders dataset needs a root directory")
        else:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        return self

    @classmethod
    def parse(cls, text: str, resolution: int = 64) -> "DatasetSpec":
        """``synthetic://<seed>/<size>`` or a folder path."""
        m = re.fullmatch(r"synthetic://(\d+)/(\d+)", text)
        if m:
            return cls("synthetic", None, resolution, int(m.group(2)), int(m.group(1)))
        if text.startswith("synthetic://"):
            raise ConfigError(f"malformed synthetic dataset address {text!r}")
        return cls("folders", text, resolution)


@dataclass
class Sample:
    fg: np.ndarray                     # 3 x H x W
    bg: np.ndarray                     # 3 x H x W
    gt_mask: np.ndarray | None = None  # H x W, binary


# --------------------------------------------------------------------------
# synthetic shapes

def _lowfreq_noise(rng, res, cells=4):
    grid = rng.standard_normal((3, cells + 1, cells + 1))
    t = np.linspace(0, cells, res)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = grid[:, i] * (1 - f)[None, :, None] + grid[:, i + 1] * f[None, :, None]
    return rows[:, :, i] * (1 - f)[None, None, :] + rows[:, :, i + 1] * f[None, None, :]


def _background(rng, res):
    c1, c2 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:res, 0:res] / (res - 1)
    t = (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) / np.sqrt(0.5) + 0.5
    t = np.clip(t, 0, 1)
    img = c1[:, None, None] * (1 - t) + c2[:, None, None] * t
    img = img + 0.04 * _lowfreq_noise(rng, res)
    return np.clip(img, 0, 1), (c1, c2)


def _ellipse(rng, res, margin):
    cy, cx = rng.uniform(margin + res * 0.15, res - margin - res * 0.15, 2)
    ry, rx = rng.uniform(res * 0.10, res * 0.30, 2)
    ang = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    dy, dx = yy - cy, xx - cx
    u = np.cos(ang) * dx + np.sin(ang) * dy
    v = -np.sin(ang) * dx + np.cos(ang) * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1


def _polygon(rng, res, margin):
    n = rng.integers(3, 7)
    cy, cx = rng.uniform(margin + res * 0.15, res - margin - res * 0.15, 2)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(res * 0.12, res * 0.30, n)
    py, px = cy + radii * np.sin(angles), cx + radii * np.cos(angles)
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    inside = np.zeros((res, res), bool)
    # even-odd rule
    for k in range(n):
        y0, x0, y1, x1 = py[k], px[k], py[(k + 1) % n], px[(k + 1) % n]
        crosses = (y0 > yy) != (y1 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xx < xint)
    return inside


def _fg_color(rng, avoid):
    for _ in range(1000):
        c = rng.uniform(0, 1, 3)
        if all(np.linalg.norm(c - a) >= MIN_COLOR_GAP for a in avoid):
            return c
    raise DataError("could not draw a separable foreground colour")


def synth_sample(seed: int, index: int, resolution: int) -> Sample:
    """Deterministic synthetic (foreground image, background image, mask) triple.

    The foreground image is one or two filled ellipses/polygons in a textured
    colour at least ``MIN_COLOR_GAP`` away from both gradient colours, pasted
    on a smooth two-colour gradient background. Shapes cover 10-40% of the
    pixels and stay clear of the outer 1/8 border. ``bg`` is an independent
    background from the same distribution.
    """
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ConfigError(f"unsupported resolution {resolution}")
    rng = rng_stream(seed, "data", 0, index)
    res = resolution
    bg_f, colors = _background(rng, res)
    margin = res / 8
    border = np.zeros((res, res), bool)
    b = int(np.ceil(margin))
    border[:b] = border[-b:] = True
    border[:, :b] = border[:, -b:] = True
    while True:
        mask = np.zeros((res, res), bool)
        for _ in range(rng.integers(1, 3)):
            mask |= (_ellipse if rng.random() < 0.5 else _polygon)(rng, res, margin)
        cover = mask.mean()
        if MIN_COVERAGE <= cover <= MAX_COVERAGE and not (mask & border).any():
            break
    color = _fg_color(rng, colors)
    yy, xx = np.mgrid[0:res, 0:res]
    freq = rng.uniform(0.3, 0.8)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.05 * np.sin(freq * (xx + yy) + phase)
    texture = np.clip(color[:, None, None] + stripes[None] + 0.02 * rng.standard_normal((3, res, res)), 0, 1)
    fg = np.where(mask[None], texture, bg_f)
    bg, _ = _background(rng_stream(seed, "data", 1, index), res)
    return Sample(fg.astype(np.float32), bg.astype(np.float32), mask.astype(np.float32))


# --------------------------------------------------------------------------
# datasets

class Dataset:
    """Independent foreground and background pools plus optional ground-truth masks."""

    def __init__(self, fg: np.ndarray, bg: np.ndarray, masks: np.ndarray | None, spec: DatasetSpec,
                 names: list[str] | None = None):
        self.fg = fg          # (N, 3, H, W) float32
        self.bg = bg          # (M, 3, H, W) float32
        self.masks = masks    # (N, 1, H, W) float32 or None
        self.spec = spec
        self.names = names

    def __len__(self) -> int:
        return len(self.fg)

    @property
    def resolution(self) -> int:
        return self.fg.shape[-1]


def load_synthetic(spec: DatasetSpec) -> Dataset:
    samples = [synth_sample(spec.seed, i, spec.resolution) for i in range(spec.size)]
    fg = np.stack([s.fg for s in samples])
    bg = np.stack([s.bg for s in samples])
    masks = np.stack([s.gt_mask for s in samples])[:, None]
    return Dataset(fg, bg, masks, spec)


def load_image(path, resolution: int, mode: str = "RGB") -> np.ndarray:
    """Decode, center-crop to a square, bilinearly resize; returns C x H x W in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert(mode)
        w, h = im.size
        s = min(w, h)
        left, top = (w - s) // 2, (h - s) // 2
        im = im.crop((left, top, left + s, top + s))
        if s != resolution:
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def _load_dir(directory: Path, resolution: int, mode: str = "RGB"):
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, names = [], []
    for p in files:
        try:
            images.append(load_image(p, resolution, mode))
            names.append(p.name)
        except Exception as exc:  # undecodable files are skipped
            log.warning("skipping undecodable image %s: %s", p, exc)
    return images, names


def load_folder_pairs(spec: DatasetSpec) -> Dataset:
    """Read ``<root>/foreground``, ``<root>/background`` and optional ``<root>/masks``.

    Files are ordered lexicographically by name. Masks are matched to
    foregrounds by file stem and binarised at 0.5.
    """
    spec.validate()
    root = Path(spec.root)
    fg_dir, bg_dir = root / "foreground", root / "background"
    for d in (fg_dir, bg_dir):
        if not d.is_dir():
            raise DataError(f"missing directory {d}")
    fg, names = _load_dir(fg_dir, spec.resolution)
    bg, _ = _load_dir(bg_dir, spec.resolution)
    if not fg or not bg:
        raise DataError(f"no decodable images under {root} (foreground={len(fg)}, background={len(bg)})")
    masks = None
    mask_dir = root / "masks"
    if mask_dir.is_dir():
        by_stem = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        found = [by_stem.get(Path(n).stem) for n in names]
        if all(found):
            masks = np.stack([(load_image(p, spec.resolution, "L") >= 0.5).astype(np.float32)
                              for p in found])
        else:
            log.warning("mask folder present but not every foreground has a mask; ignoring masks")
    return Dataset(np.stack(fg), np.stack(bg), masks, spec, names)


def load_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    return load_synthetic(spec) if spec.kind == "synthetic" else load_folder_pairs(spec)


class BatchSampler:
    """Foregrounds without replacement per epoch, backgrounds i.i.d. uniform.

    All randomness comes from one generator, so the sequence of batches is a
    function of its state; :meth:`state` / :meth:`from_state` round-trip it.
    """

    def __init__(self, n_fg: int, n_bg: int, rng: np.random.Generator):
        self.n_fg, self.n_bg = n_fg, n_bg
        self.rng = rng
        self.perm = np.empty(0, np.int64)
        self.cursor = 0

    def next_indices(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        out = []
        need = batch_size
        while need:
            if self.cursor >= len(self.perm):
                self.perm = self.rng.permutation(self.n_fg)
                self.cursor = 0
            take = self.perm[self.cursor:self.cursor + need]
            self.cursor += len(take)
            need -= len(take)
            out.append(take)
        fg_idx = np.concatenate(out)
        bg_idx = self.rng.integers(0, self.n_bg, batch_size)
        return fg_idx, bg_idx

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(), "cursor": self.cursor}

    def load_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.perm = np.asarray(state["perm"], np.int64)
        self.cursor = int(state["cursor"])


def next_batch(dataset: Dataset, batch_size: int, sampler: BatchSampler):
    """``(fg, bg, gt_masks_or_None, fg_indices)`` for the next batch."""
    fi, bi = sampler.next_indices(batch_size)
    masks = dataset.masks[fi] if dataset.masks is not None else None
    return dataset.fg[fi], dataset.bg[bi], masks, fi
