"""Pretraining loop, AdamW, warmup+cosine schedule, checkpoints, ablations."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry, loss as losses
from .model import CSCon, ModelConfig, pretrain_views
from .numerics import ParamStore, load_archive, save_archive
from .synthdata import AugmentPolicy, augment_batch

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("inner", "inter", "alignment")
SHARING_MODES = ("shared", "non_shared")
POSITIVE_PAIRS = ("cs", "ss")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(OSError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 32
    base_lr: float = 5e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 10.0
    seed: int = 0
    augment: str = "scale_translate_rotation"
    loss: str = "inner"
    sharing: str = "shared"
    positive_pair: str = "cs"
    symmetric: bool = False
    fps_random_start: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}/{self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"loss must be one of {LOSS_VARIANTS}, got {self.loss!r}")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"sharing must be one of {SHARING_MODES}, got {self.sharing!r}")
        if self.positive_pair not in POSITIVE_PAIRS:
            raise ValueError(f"positive_pair must be one of {POSITIVE_PAIRS}, got {self.positive_pair!r}")
        if self.augment not in {p.value for p in AugmentPolicy}:
            raise ValueError(f"augment must be one of {[p.value for p in AugmentPolicy]}, got {self.augment!r}")

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


DESK_TRAIN = TrainConfig()
PAPER_TRAIN = TrainConfig(epochs=300, warmup_epochs=10, batch_size=128)


# -- schedule & optimizer ------------------------------------------------------


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from base_lr/warmup_steps, then cosine down to min_lr at the last step."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps - 1)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def adamw_update(p, g, m, v, t, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-decay Adam step on arrays; returns (p, m, v). ``t`` counts from 1."""
    b1, b2 = betas
    p = p * (1.0 - lr * wd)
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamW:
    """AdamW over a ParamStore. Vectors (biases, norms, mask tokens) skip weight decay."""

    def __init__(self, params: ParamStore, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8, names=None):
        self.params = params
        self.names = list(names) if names is not None else list(params)
        self.wd = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(params[n].shape, dtype=np.float64) for n in self.names}
        self.v = {n: np.zeros(params[n].shape, dtype=np.float64) for n in self.names}

    def step(self, lr: float) -> None:
        self.t += 1
        for n in self.names:
            t = self.params[n]
            g = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
            wd = self.wd if t.ndim >= 2 else 0.0
            p, self.m[n], self.v[n] = adamw_update(
                t.data.astype(np.float64), g, self.m[n], self.v[n], self.t, lr, wd, self.betas, self.eps
            )
            t.data = p.astype(t.dtype)


def clip_grad_norm(params: ParamStore, max_norm: float, names=None) -> float:
    names = list(names) if names is not None else list(params)
    sq = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            sq += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-6)
        for n in names:
            g = params[n].grad
            if g is not None:
                params[n].grad = (g * s).astype(g.dtype)
    return norm


# -- checkpoints -----------------------------------------------------------------


def _meta_text(config: ModelConfig) -> str:
    return "\n".join(f"{k}={v}" for k, v in config.to_dict().items())


def _parse_meta(text: str) -> ModelConfig:
    raw = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    kinds = {f: type(v) for f, v in ModelConfig().to_dict().items()}
    vals = {}
    for k, v in raw.items():
        if k not in kinds:
            continue
        kind = kinds[k]
        vals[k] = (v == "True") if kind is bool else kind(v)
    return ModelConfig(**vals)


def save_checkpoint(model: CSCon, path) -> Path:
    path = Path(path)
    try:
        save_archive(path, model.state(), _meta_text(model.config))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e.strerror or e}") from e
    return path


def load_checkpoint(path) -> CSCon:
    arrays, meta = load_archive(path)
    model = CSCon(_parse_meta(meta), seed=0)
    model.load_state(arrays)
    return model


# -- pretraining ----------------------------------------------------------------


@dataclass
class TrainTrace:
    steps: list[int] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        e = np.asarray(self.epochs)
        l = np.asarray(self.losses)
        return [float(l[e == i].mean()) for i in np.unique(e)]

    @staticmethod
    def line(step, epoch, lr, value) -> str:
        return f"{step}\t{epoch}\t{lr!r}\t{value!r}\n"

    @classmethod
    def read(cls, path) -> "TrainTrace":
        tr = cls()
        for row in Path(path).read_text().splitlines():
            if not row or row.startswith("#"):
                continue
            s, e, lr, v = row.split("\t")
            tr.steps.append(int(s))
            tr.epochs.append(int(e))
            tr.lrs.append(float(lr))
            tr.losses.append(float(v))
        return tr


@dataclass
class PretrainResult:
    model: CSCon
    trace: TrainTrace
    checkpoint: Path | None


def objective(model: CSCon, views: dict, cfg: TrainConfig):
    tau = model.config.tau
    if cfg.loss == "inner":
        return losses.inner_instance_loss(views["v_c"], views["v_s"], tau, symmetric=cfg.symmetric)
    if cfg.loss == "inter":
        return losses.inter_instance_loss(views["v_c"], views["v_s"], tau)
    full = views["v_full"]
    a = losses.alignment_target_loss(full, views["v_c"])
    b = losses.alignment_target_loss(full, views["v_s"])
    return (a + b) * 0.5


def build_model(model_config: ModelConfig, train_config: TrainConfig) -> CSCon:
    cfg = model_config.replace(shared=train_config.sharing == "shared")
    return CSCon(cfg, seed=train_config.seed)


def make_batch(points: np.ndarray, cfg: TrainConfig, mcfg: ModelConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    pts = augment_batch(points, cfg.augment, rng).astype(np.float32)
    p = pts.shape[1]
    starts = rng.integers(0, p, size=len(pts)) if cfg.fps_random_start else 0
    return geometry.patchify_batch(pts, mcfg.n_patches, mcfg.patch_size, starts)


def pretrain(
    model_config: ModelConfig,
    train_config: TrainConfig,
    points: np.ndarray,
    out_dir=None,
    model: CSCon | None = None,
) -> PretrainResult:
    """Self-supervised pretraining on ``points`` (n, p, 3).

    With ``out_dir`` set, writes ``trace.tsv`` (step, epoch, lr, loss),
    ``timings.tsv``, cadence checkpoints and ``final.cscon``.
    """
    cfg = train_config
    points = np.asarray(points, dtype=np.float32)
    if len(points) == 0:
        raise ValueError("pretrain: empty dataset")
    model = model or build_model(model_config, cfg)
    mcfg = model.config
    rng = np.random.default_rng(cfg.seed)
    n = len(points)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = n // bs
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    opt = AdamW(model.params, cfg.weight_decay, cfg.betas, cfg.eps)
    trace = TrainTrace()

    out = Path(out_dir) if out_dir is not None else None
    trace_f = timing_f = None
    last_good: Path | None = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace_f = open(out / "trace.tsv", "w")
        trace_f.write("# step\tepoch\tlr\tloss\n")
        timing_f = open(out / "timings.tsv", "w")
        timing_f.write("# epoch\tseconds\tmean_loss\n")

    step = 0
    model.training = True
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                batch = points[order[b * bs : (b + 1) * bs]]
                centers, patches = make_batch(batch, cfg, mcfg, rng)
                lr = lr_at(step, total, warmup, cfg.base_lr, cfg.min_lr)
                model.params.zero_grad()
                views = pretrain_views(
                    model, centers, patches, rng, cfg.positive_pair, triplet=cfg.loss == "alignment"
                )
                value = objective(model, views, cfg)
                loss_val = float(value.data)
                if not math.isfinite(loss_val):
                    where = f"; last good checkpoint {last_good}" if last_good else ""
                    raise TrainingDiverged(f"non-finite loss {loss_val} at step {step} (epoch {epoch}){where}")
                value.backward()
                clip_grad_norm(model.params, cfg.clip_norm)
                opt.step(lr)
                trace.steps.append(step)
                trace.epochs.append(epoch)
                trace.lrs.append(lr)
                trace.losses.append(loss_val)
                if trace_f:
                    trace_f.write(TrainTrace.line(step, epoch, lr, loss_val))
                step += 1
            dt = time.perf_counter() - t0
            trace.epoch_seconds.append(dt)
            mean = trace.epoch_means()[-1]
            log.info("epoch %d/%d loss %.4f (%.1fs)", epoch + 1, cfg.epochs, mean, dt)
            if out is not None:
                trace_f.flush()
                timing_f.write(f"{epoch}\t{dt:.3f}\t{mean!r}\n")
                timing_f.flush()
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    last_good = save_checkpoint(model, out / f"ckpt_epoch{epoch + 1:03d}.cscon")
    finally:
        model.training = False
        if trace_f:
            trace_f.close()
            timing_f.close()
    final = save_checkpoint(model, out / "final.cscon") if out is not None else None
    return PretrainResult(model, trace, final)


# -- ablations --------------------------------------------------------------------

# knob -> (config section, field)
KNOBS = {
    "mask_ratio": ("model", "mask_ratio"),
    "tau": ("model", "tau"),
    "augment": ("train", "augment"),
    "sharing": ("train", "sharing"),
    "loss": ("train", "loss"),
    "positive_pair": ("train", "positive_pair"),
}

DEFAULT_GRIDS = {
    "mask_ratio": (0.3, 0.6, 0.9),
    "tau": (0.05, 0.1, 0.5, 1.0, 2.0),
    "augment": tuple(p.value for p in AugmentPolicy),
    "sharing": SHARING_MODES,
    "loss": LOSS_VARIANTS,
    "positive_pair": POSITIVE_PAIRS,
}

RESULTS_HEADER = "name\tvalue\tmean\tstd\tvalues"


@dataclass
class ResultRow:
    name: str
    value: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def line(self) -> str:
        vals = ",".join(f"{a:.6f}" for a in self.accuracies)
        return f"{self.name}\t{self.value}\t{self.mean:.6f}\t{self.std:.6f}\t{vals}"


def write_results(path, rows: Sequence[ResultRow], append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists())
    with open(path, "w" if fresh else "a") as f:
        if fresh:
            f.write(RESULTS_HEADER + "\n")
        for r in rows:
            f.write(r.line() + "\n")


def read_results(path) -> list[ResultRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError(f"{path}: not a results table")
    rows = []
    for line in lines[1:]:
        name, value, _, _, vals = line.split("\t")
        rows.append(ResultRow(name, value, [float(v) for v in vals.split(",") if v]))
    return rows


@dataclass
class SweepSpec:
    knob: str
    values: Sequence = ()
    seeds: Sequence[int] = (0, 1, 2)
    model_config: ModelConfig = field(default_factory=ModelConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.knob not in KNOBS:
            raise ValueError(f"unknown knob {self.knob!r}; valid knobs: {', '.join(KNOBS)}")
        if not self.values:
            self.values = DEFAULT_GRIDS[self.knob]

    def configs(self, value, seed: int) -> tuple[ModelConfig, TrainConfig]:
        section, name = KNOBS[self.knob]
        mc, tc = self.model_config, self.train_config.replace(seed=seed)
        if section == "model":
            mc = mc.replace(**{name: type(getattr(mc, name))(value)})
        else:
            tc = tc.replace(**{name: value})
        return mc, tc


def run_ablation(
    spec: SweepSpec,
    train_points: np.ndarray,
    train_labels: np.ndarray,
    test_points: np.ndarray,
    test_labels: np.ndarray,
    out_dir=None,
    probe_kwargs: dict | None = None,
) -> list[ResultRow]:
    """Pretrain once per (value, seed), linear-probe each, one row per value."""
    from .evaluation import extract_features, probe_linear

    rows = []
    out = Path(out_dir) if out_dir is not None else None
    for value in spec.values:
        accs = []
        for seed in spec.seeds:
            mc, tc = spec.configs(value, seed)
            run_dir = out / f"{spec.knob}={value}" / f"seed{seed}" if out else None
            res = pretrain(mc, tc, train_points, run_dir)
            ftr = extract_features(res.model, train_points)
            fte = extract_features(res.model, test_points)
            r = probe_linear(ftr, train_labels, fte, test_labels, seeds=(seed,), **(probe_kwargs or {}))
            accs.append(r.mean)
            log.info("ablation %s=%s seed %d: probe %.4f", spec.knob, value, seed, r.mean)
        rows.append(ResultRow(spec.knob, str(value), accs))
        if out is not None:
            write_results(out / "results.tsv", rows)
    return rows
