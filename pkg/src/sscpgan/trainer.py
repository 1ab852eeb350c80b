"""Alternating discriminator/generator training, evaluation, checkpoints and run directories."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .compositing import composite
from .data import BatchSampler, Dataset, DatasetSpec, load_dataset, next_batch
from .losses import (batch_iou, discriminator_loss, generator_loss, lambda_schedule,
                     self_supervised_loss, total_discriminator_loss)
from .metrics import FeatureExtractor, feature_stats, frechet_distance, miou
from .networks import (ArchConfig, ConfigError, dumps_archive, init_network, loads_archive,
                       max_depth)
from .numerics import AdamState, NonFiniteError, Tensor, adam_step
from .pseudolabel import PseudoLabelCache

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "L_D", "L_G", "L_ss", "lambda", "schedule_iou", "proxy_fid", "miou",
                   "fg_iou", "degenerate_frac", "wall_ms")
DEGENERATE_LOW, DEGENERATE_HIGH = 0.02, 0.98
MODES = ("ss-cpgan", "cpgan-baseline")


@dataclass
class TrainConfig:
    dataset: str = "synthetic://0/2000"
    resolution: int = 64
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    total_steps: int = 5000
    eval_every: int = 500
    checkpoint_every: int = 1000
    eval_size: int | None = None
    seed: int = 0
    mode: str = "ss-cpgan"
    invert_target: bool = True
    real_decoder_loss: bool = False
    lambda_override: float | None = None
    gen_width: int = 32
    gen_depth: int = 3
    disc_width: int = 32
    disc_depth: int | None = None       # None: 4, capped by the resolution
    grabcut_iters: int = 5
    extractor_seed: int = 0
    cache_dir: str = "cache"
    runs_dir: str = "runs"
    name: str = "run"

    def validate(self) -> "TrainConfig":
        positive = ("batch_size", "total_steps", "eval_every", "checkpoint_every", "grabcut_iters",
                    "gen_width", "gen_depth", "disc_width")
        for f in positive:
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1, got {getattr(self, f)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_override not in (None, 0.0, 0.1, 0.5):
            raise ConfigError("lambda_override must be null, 0, 0.1 or 0.5")
        if self.eval_size is not None and self.eval_size < 2:
            raise ConfigError("eval_size must be >= 2")
        self.gen_arch()
        self.disc_arch()
        DatasetSpec.parse(self.dataset, self.resolution).validate()
        return self

    def gen_arch(self) -> ArchConfig:
        return ArchConfig(self.resolution, self.gen_width, self.gen_depth).validate()

    def disc_arch(self) -> ArchConfig:
        depth = self.disc_depth if self.disc_depth is not None else min(4, max_depth(self.resolution))
        return ArchConfig(self.resolution, self.disc_width, depth).validate()

    def data_spec(self) -> DatasetSpec:
        return DatasetSpec.parse(self.dataset, self.resolution)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainState:
    gen: object
    disc: object
    adam_g: AdamState
    adam_d: AdamState
    sampler: BatchSampler
    step: int = 0
    schedule_iou: float = float("nan")


@dataclass
class MetricsRecord:
    step: int
    L_D: float
    L_G: float
    L_ss: float
    lam: float
    schedule_iou: float
    proxy_fid: float | None = None
    miou: float | None = None
    fg_iou: float | None = None
    degenerate_frac: float | None = None
    wall_ms: float = 0.0

    def row(self) -> list[str]:
        vals = [self.step, self.L_D, self.L_G, self.L_ss, self.lam, self.schedule_iou, self.proxy_fid,
                self.miou, self.fg_iou, self.degenerate_frac, self.wall_ms]
        return ["" if v is None else (str(v) if isinstance(v, int) else repr(float(v))) for v in vals]


def init_state(config: TrainConfig, n_fg: int, n_bg: int) -> TrainState:
    gen = init_network("generator", config.gen_arch(), config.seed)
    disc = init_network("discriminator", config.disc_arch(), config.seed)
    betas = dict(beta1=config.beta1, beta2=config.beta2)
    return TrainState(gen, disc, AdamState(gen.params, config.lr, **betas),
                      AdamState(disc.params, config.lr, **betas),
                      BatchSampler(n_fg, n_bg, nx.rng_stream(config.seed, "data", 2)))


def _lambda_for(config: TrainConfig, schedule_iou: float) -> float:
    if config.mode == "cpgan-baseline":
        return 0.0
    if config.lambda_override is not None:
        return config.lambda_override
    if math.isnan(schedule_iou):
        return 0.0
    return lambda_schedule(schedule_iou)


def train_step(state: TrainState, config: TrainConfig, fg: np.ndarray, bg: np.ndarray,
               pseudo: np.ndarray, degenerate: np.ndarray, indices=None) -> MetricsRecord:
    """One discriminator update followed by one generator update.

    ``pseudo`` holds the binary pseudo-labels (N x 1 x H x W); samples flagged
    in ``degenerate`` are left out of the self-supervised term.
    """
    gen, disc = state.gen, state.disc
    xf, xb = Tensor(fg), Tensor(bg)
    mask = gen(xf, training=True)

    # discriminator: real foregrounds vs composites with the mask held fixed
    comp = composite(xf, xb, mask.detach())
    real_logits, real_pix = disc(xf, decode=config.real_decoder_loss)
    fake_logits, fake_pix = disc(comp, decode=True)
    l_d = discriminator_loss(real_logits, fake_logits)

    keep = np.flatnonzero(~np.asarray(degenerate, bool))
    target = 1 - pseudo if config.invert_target else pseudo
    if len(keep):
        schedule_iou = float(np.mean(batch_iou(fake_pix.data[keep], target[keep])))
        l_ss = self_supervised_loss(nx.take_rows(fake_pix, keep), pseudo[keep], config.invert_target)
        if config.real_decoder_loss:
            l_ss = l_ss + self_supervised_loss(nx.take_rows(real_pix, keep), pseudo[keep],
                                               config.invert_target)
    else:
        schedule_iou = float("nan")
        l_ss = Tensor(np.float32(0.0))
    lam = _lambda_for(config, schedule_iou)
    l_total = total_discriminator_loss(l_d, l_ss, lam)
    for name, t in (("L_D", l_d), ("L_ss", l_ss), ("L_D_total", l_total)):
        if not np.isfinite(t.data):
            raise NonFiniteError(f"non-finite {name} at step {state.step + 1}; batch indices "
                                 f"{None if indices is None else list(map(int, indices))}")
    disc.zero_grad()
    l_total.backward()
    adam_step(disc.params, disc.grads(), state.adam_d)

    # generator: composites with a live mask through the updated discriminator
    for p in disc.params.values():
        p.requires_grad = False
    try:
        fake_logits_g, _ = disc(composite(xf, xb, mask), decode=False)
        l_g = generator_loss(fake_logits_g)
        if not np.isfinite(l_g.data):
            raise NonFiniteError(f"non-finite L_G at step {state.step + 1}; batch indices "
                                 f"{None if indices is None else list(map(int, indices))}")
        gen.zero_grad()
        l_g.backward()
    finally:
        for p in disc.params.values():
            p.requires_grad = True
    adam_step(gen.params, gen.grads(), state.adam_g)

    state.step += 1
    state.schedule_iou = schedule_iou
    return MetricsRecord(state.step, float(l_d.data), float(l_g.data), float(l_ss.data), lam,
                         schedule_iou)


# --------------------------------------------------------------------------
# evaluation

def predict_masks(gen, images: np.ndarray, batch: int = 64) -> np.ndarray:
    return np.concatenate([gen(Tensor(images[i:i + batch]), training=False).data
                           for i in range(0, len(images), batch)])


def eval_pairing(n_fg: int, n_bg: int, seed: int) -> np.ndarray:
    return nx.rng_stream(seed, "noise", 0).integers(0, n_bg, n_fg)


class Evaluator:
    """Scores a generator on a fixed image set; real-image feature stats are computed once."""

    def __init__(self, dataset: Dataset, extractor_seed: int = 0, seed: int = 0, size: int | None = None):
        n = len(dataset) if size is None else min(size, len(dataset))
        self.fg = dataset.fg[:n]
        self.masks = dataset.masks[:n] if dataset.masks is not None else None
        self.bg = dataset.bg[eval_pairing(n, len(dataset.bg), seed)]
        self.extractor = FeatureExtractor(extractor_seed)
        self.extractor_seed = extractor_seed
        self.real_stats = feature_stats(self.extractor.features(self.fg))

    def __call__(self, gen) -> dict:
        masks = predict_masks(gen, self.fg)
        comps = composite(self.fg, self.bg, masks)
        fid = frechet_distance(self.real_stats, feature_stats(self.extractor.features(comps)))
        means = masks.reshape(len(masks), -1).mean(axis=1)
        degenerate = float(np.mean((means < DEGENERATE_LOW) | (means > DEGENERATE_HIGH)))
        hist, _ = np.histogram(means, bins=10, range=(0.0, 1.0))
        report = {"proxy_fid": fid, "degenerate_frac": degenerate,
                  "mask_mean_hist": hist.tolist(), "n_images": int(len(masks)),
                  "extractor_seed": self.extractor_seed,
                  "miou": None, "fg_iou": None, "inverted_miou": None}
        if self.masks is not None:
            m = miou(masks, self.masks)
            report.update(miou=m.miou, fg_iou=m.fg_iou, inverted_miou=m.inverted_miou)
        return report, masks, comps


def evaluate(checkpoint, dataset_spec: str | DatasetSpec | None = None, extractor_seed: int = 0,
             size: int | None = None, seed: int | None = None) -> dict:
    """Evaluation report for a checkpoint on a dataset (defaults to the training dataset).

    ``seed`` picks the background paired with each foreground; it defaults
    to the training seed stored in the checkpoint.
    """
    state, config, _ = load_checkpoint(checkpoint)
    if dataset_spec is None:
        spec = config.data_spec()
    elif isinstance(dataset_spec, str):
        spec = DatasetSpec.parse(dataset_spec, config.resolution)
    else:
        spec = dataset_spec
    if spec.resolution != config.resolution:
        raise ConfigError(f"checkpoint resolution {config.resolution} != dataset resolution {spec.resolution}")
    dataset = load_dataset(spec)
    pairing_seed = config.seed if seed is None else seed
    report, _, _ = Evaluator(dataset, extractor_seed, pairing_seed, size)(state.gen)
    report.update(checkpoint=str(checkpoint), dataset=str(spec.root if spec.kind == "folders" else
                                                           f"synthetic://{spec.seed}/{spec.size}"))
    return report


# --------------------------------------------------------------------------
# checkpoints

def checkpoint_bytes(state: TrainState, config: TrainConfig) -> bytes:
    arrays = {}
    arrays.update(state.gen.state_arrays("G"))
    arrays.update(state.disc.state_arrays("D"))
    for tag, adam in (("G", state.adam_g), ("D", state.adam_d)):
        arrays.update({f"{tag}/adam_m/{k}": v for k, v in adam.first_moment.items()})
        arrays.update({f"{tag}/adam_v/{k}": v for k, v in adam.second_moment.items()})
    meta = {
        "format": "sscpgan-checkpoint",
        "config": asdict(config),
        "step": state.step,
        "schedule_iou": None if math.isnan(state.schedule_iou) else state.schedule_iou,
        "adam_steps": {"G": state.adam_g.step_count, "D": state.adam_d.step_count},
        "sampler": state.sampler.state(),
        "n_fg": state.sampler.n_fg,
        "n_bg": state.sampler.n_bg,
    }
    return dumps_archive(arrays, meta)


def save_checkpoint(state: TrainState, config: TrainConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state, config))
    tmp.replace(path)


def load_checkpoint(path):
    arrays, meta = loads_archive(Path(path).read_bytes())
    if meta.get("format") != "sscpgan-checkpoint":
        raise ConfigError(f"{path} is not a training checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    state = init_state(config, meta["n_fg"], meta["n_bg"])
    state.gen.load_state_arrays(arrays, "G")
    state.disc.load_state_arrays(arrays, "D")
    for tag, adam in (("G", state.adam_g), ("D", state.adam_d)):
        for k in adam.first_moment:
            adam.first_moment[k] = arrays[f"{tag}/adam_m/{k}"].copy()
            adam.second_moment[k] = arrays[f"{tag}/adam_v/{k}"].copy()
        adam.step_count = meta["adam_steps"][tag]
    state.sampler.load_state(meta["sampler"])
    state.step = meta["step"]
    state.schedule_iou = float("nan") if meta["schedule_iou"] is None else meta["schedule_iou"]
    return state, config, meta


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted(Path(run_dir, "checkpoints").glob("step_*.ckpt"),
                   key=lambda p: int(p.stem.split("_")[1]))
    return ckpts[-1] if ckpts else None


# --------------------------------------------------------------------------
# run loop

def save_sample_grid(path, fg, masks, comps, n: int = 8) -> None:
    """PNG grid: foregrounds on the first row, masks on the second, composites on the third."""
    from PIL import Image

    n = min(n, len(fg))
    rows = [np.concatenate(list(a[:n]), axis=2) for a in (fg, np.repeat(masks, 3, axis=1), comps)]
    grid = np.concatenate(rows, axis=1).transpose(1, 2, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)).save(path)


def _read_rows(path: Path, upto: int) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if int(r[0]) <= upto]


def train(config: TrainConfig, dataset: Dataset | None = None, progress=None) -> Path:
    """Run (or resume) training; returns the run directory.

    The run directory holds ``config.json``, ``metrics.csv`` (one row per
    step), ``checkpoints/step_<n>.ckpt`` and ``samples/step_<n>.png``. An
    existing run with checkpoints is resumed from the latest one.
    """
    config.validate()
    run_dir = Path(config.runs_dir) / config.name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    if dataset is None:
        dataset = load_dataset(config.data_spec())
    if dataset.resolution != config.resolution:
        raise ConfigError(f"dataset resolution {dataset.resolution} != config resolution {config.resolution}")

    metrics_path = run_dir / "metrics.csv"
    ckpt = latest_checkpoint(run_dir)
    if ckpt is not None:
        state, _, _ = load_checkpoint(ckpt)
        kept = _read_rows(metrics_path, state.step) if metrics_path.exists() else []
        log.info("resuming %s from step %d", run_dir, state.step)
    else:
        state = init_state(config, len(dataset.fg), len(dataset.bg))
        kept = []
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        w.writerows(kept)

    cache = PseudoLabelCache(config.cache_dir, config.grabcut_iters)
    evaluator = None
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while state.step < config.total_steps:
            t0 = time.perf_counter()
            fg, bg, _, idx = next_batch(dataset, config.batch_size, state.sampler)
            pseudo, degenerate = cache.batch(fg)
            rec = train_step(state, config, fg, bg, pseudo, degenerate, idx)
            if state.step % config.eval_every == 0 or state.step == config.total_steps:
                if evaluator is None:
                    evaluator = Evaluator(dataset, config.extractor_seed, config.seed, config.eval_size)
                report, masks, comps = evaluator(state.gen)
                rec.proxy_fid = report["proxy_fid"]
                rec.miou, rec.fg_iou = report["miou"], report["fg_iou"]
                rec.degenerate_frac = report["degenerate_frac"]
                save_sample_grid(run_dir / "samples" / f"step_{state.step}.png",
                                 evaluator.fg, masks, comps)
            rec.wall_ms = (time.perf_counter() - t0) * 1000.0
            writer.writerow(rec.row())
            fh.flush()
            if state.step % config.checkpoint_every == 0 or state.step == config.total_steps:
                save_checkpoint(state, config, run_dir / "checkpoints" / f"step_{state.step}.ckpt")
            if progress is not None:
                progress(rec)
    return run_dir


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metrics_digest(path, exclude=("wall_ms",)) -> str:
    """SHA-256 of metrics.csv with timing columns removed (timings are not reproducible)."""
    import hashlib

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, c in enumerate(rows[0]) if c not in exclude]
    text = "\n".join(",".join(r[i] for i in keep) for r in rows)
    return hashlib.sha256(text.encode()).hexdigest()
