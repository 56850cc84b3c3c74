"""Transfer protocols on top of a pretrained backbone.

Global feature: concat(mean, max) over the N pre-projector tokens of an
unmasked forward. The projector is dropped downstream.

MLP-LINEAR and MLP-3 train only a head on frozen features; FULL
fine-tunes backbone and MLP-3 head together.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry
from .model import BN_MOMENTUM, CSCon
from .numerics import ParamStore, Tensor, no_grad, ops, trunc_normal
from .synthdata import AugmentPolicy, augment_batch
from .training import AdamW, clip_grad_norm, lr_at

log = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def __str__(self) -> str:
        return f"{self.mean:.4f} ± {self.std:.4f}"


@dataclass
class HeadConfig:
    epochs: int = 100
    warmup_epochs: int = 3
    batch_size: int = 32
    lr: float = 6e-4
    weight_decay: float = 0.05
    dropout: float = 0.5


LINEAR_HEAD = HeadConfig(lr=6e-4)
MLP3_HEAD = HeadConfig(lr=4e-4)


# -- features -------------------------------------------------------------------


def pool_tokens(tokens: np.ndarray) -> np.ndarray:
    return np.concatenate([tokens.mean(axis=1), tokens.max(axis=1)], axis=-1)


def extract_features(model: CSCon, points: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen, deterministic (n, p, 3) -> (n, 2D) global features."""
    c = model.config
    was = model.training
    model.training = False
    out = []
    try:
        with no_grad():
            for i in range(0, len(points), batch_size):
                centers, patches = geometry.patchify_batch(points[i : i + batch_size], c.n_patches, c.patch_size, 0)
                out.append(pool_tokens(model.tokens(centers, patches).data))
    finally:
        model.training = was
    return np.concatenate(out).astype(np.float32)


def extract_global(cloud, model: CSCon) -> np.ndarray:
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud)
    return extract_features(model, pts[None].astype(np.float32))[0]


# -- heads -----------------------------------------------------------------------


class Head:
    """Linear (layers=1) or 3-layer ReLU MLP with dropout between layers.

    ``input_norm`` puts a BatchNorm on the incoming features (batch stats
    while training, running stats otherwise); FULL uses it in place of the
    fixed standardization the frozen probes get.
    """

    def __init__(
        self, n_in: int, n_classes: int, layers: int, hidden: int, seed: int, dropout: float = 0.5, input_norm: bool = False
    ):
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        self.buffers: dict[str, np.ndarray] = {}
        self.input_norm = input_norm
        if input_norm:
            self.params.add("head.in.g", np.ones(n_in))
            self.params.add("head.in.b", np.zeros(n_in))
            self.buffers = {"mean": np.zeros(n_in), "var": np.ones(n_in)}
        dims = [n_in] + [hidden] * (layers - 1) + [n_classes]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.params.add(f"head.{i}.w", trunc_normal(rng, (a, b), std=0.02) if layers > 1 else trunc_normal(rng, (a, b), 0.01))
            self.params.add(f"head.{i}.b", np.zeros(b))
        self.layers = layers
        self.dropout = dropout
        self.training = False

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        if self.input_norm:
            g, b = self.params["head.in.g"], self.params["head.in.b"]
            if self.training:
                x, mean, var = ops.batch_norm(x, g, b)
                n = x.shape[0]
                unbiased = var * n / max(n - 1, 1)
                self.buffers["mean"] = (1 - BN_MOMENTUM) * self.buffers["mean"] + BN_MOMENTUM * mean
                self.buffers["var"] = (1 - BN_MOMENTUM) * self.buffers["var"] + BN_MOMENTUM * unbiased
            else:
                x = ops.batch_norm(x, g, b, self.buffers["mean"], self.buffers["var"])[0]
        for i in range(self.layers):
            x = ops.linear(x, self.params[f"head.{i}.w"], self.params[f"head.{i}.b"])
            if i < self.layers - 1:
                x = ops.relu(x)
                if self.training and self.dropout > 0 and rng is not None:
                    keep = (rng.random(x.shape) >= self.dropout).astype(x.dtype) / x.dtype.type(1 - self.dropout)
                    x = x * keep
        return x


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[-1], dtype=logits.dtype)[labels]
    picked = ops.reduce_sum(logits * onehot, axis=-1)
    return ops.reduce_mean(ops.logsumexp(logits) - picked)


def _standardize(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0, dtype=np.float64)
    sd = train.std(axis=0, dtype=np.float64)
    sd = np.where(sd > 1e-6, sd, 1.0)
    return ((train - mu) / sd).astype(np.float32), ((test - mu) / sd).astype(np.float32)


def train_head(head: Head, x: np.ndarray, y: np.ndarray, cfg: HeadConfig, seed: int) -> Head:
    rng = np.random.default_rng(seed)
    n = len(x)
    bs = min(cfg.batch_size, n)
    spe = max(1, -(-n // bs))
    total, warm = spe * cfg.epochs, spe * min(cfg.warmup_epochs, cfg.epochs - 1)
    opt = AdamW(head.params, cfg.weight_decay)
    head.training = True
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(spe):
            idx = order[b * bs : (b + 1) * bs]
            head.params.zero_grad()
            loss = cross_entropy(head(Tensor(x[idx]), rng), y[idx])
            loss.backward()
            opt.step(lr_at(step, total, warm, cfg.lr, 1e-6))
            step += 1
    head.training = False
    return head


def predict(head: Head, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return head(Tensor(x)).data.argmax(axis=-1)


def _probe(train_x, train_y, test_x, test_y, layers, cfg: HeadConfig, seeds, hidden=None) -> ProbeResult:
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    xtr, xte = _standardize(np.asarray(train_x), np.asarray(test_x))
    accs = []
    for s in seeds:
        head = Head(xtr.shape[1], n_classes, layers, hidden or xtr.shape[1] // 2, s, cfg.dropout)
        train_head(head, xtr, train_y, cfg, s)
        accs.append(float((predict(head, xte) == test_y).mean()))
    return ProbeResult(accs)


def probe_linear(train_x, train_y, test_x, test_y, seeds: Sequence[int] = (0, 1, 2), config: HeadConfig = LINEAR_HEAD) -> ProbeResult:
    """MLP-LINEAR: a single affine head on frozen features, one run per head seed."""
    return _probe(train_x, train_y, test_x, test_y, 1, config, seeds)


def probe_mlp3(train_x, train_y, test_x, test_y, seeds: Sequence[int] = (0, 1, 2), config: HeadConfig = MLP3_HEAD, hidden: int | None = None) -> ProbeResult:
    """MLP-3: three layers, ReLU + dropout, hidden width D, frozen features."""
    return _probe(train_x, train_y, test_x, test_y, 3, config, seeds, hidden)


# -- full fine-tuning ------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    epochs: int = 10
    warmup_epochs: int = 1
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.05
    augment: str = "scale_translate"
    clip_norm: float = 10.0


def finetune_full(
    model: CSCon,
    train_points: np.ndarray,
    train_labels: np.ndarray,
    test_points: np.ndarray,
    test_labels: np.ndarray,
    config: FinetuneConfig = FinetuneConfig(),
    seeds: Sequence[int] = (0,),
) -> ProbeResult:
    """FULL: backbone and MLP-3 head trained together. The input model is left untouched."""
    accs = []
    for seed in seeds:
        net = copy.deepcopy(model)
        c = net.config
        rng = np.random.default_rng(seed)
        n_classes = int(max(train_labels.max(), test_labels.max())) + 1
        head = Head(2 * c.dim, n_classes, 3, c.dim, seed, input_norm=True)
        params = {name: net.params[name] for name in net.backbone_names()}
        params.update(head.params.items())
        opt = AdamW(params, config.weight_decay)
        n = len(train_points)
        bs = min(config.batch_size, n)
        spe = n // bs
        total, warm = spe * config.epochs, spe * config.warmup_epochs
        step = 0
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            net.training = head.training = True
            for b in range(spe):
                idx = order[b * bs : (b + 1) * bs]
                pts = augment_batch(train_points[idx], AugmentPolicy(config.augment), rng).astype(np.float32)
                centers, patches = geometry.patchify_batch(pts, c.n_patches, c.patch_size, 0)
                net.params.zero_grad()
                head.params.zero_grad()
                z = net.embed_centers(centers) + net.embed_patches(patches)
                tok = net.blocks(z, "enc", rng)
                feat = ops.concat([ops.reduce_mean(tok, axis=1), ops.reduce_max(tok, axis=1)], axis=-1)
                loss = cross_entropy(head(feat, rng), train_labels[idx])
                loss.backward()
                clip_grad_norm(params, config.clip_norm)
                opt.step(lr_at(step, total, warm, config.lr, 1e-6))
                step += 1
            net.training = head.training = False
        feats = extract_features(net, test_points)
        with no_grad():
            pred = head(Tensor(feats)).data.argmax(-1)
        accs.append(float((pred == test_labels).mean()))
    return ProbeResult(accs)


# -- few-shot ------------------------------------------------------------------------


@dataclass
class Episode:
    classes: np.ndarray
    support: np.ndarray  # indices into the support pool
    query: np.ndarray  # indices into the query pool


def sample_episode(train_labels, test_labels, way: int, shot: int, queries: int, rng) -> Episode:
    classes = np.unique(train_labels)
    if way > len(classes):
        raise ValueError(f"way={way} exceeds the {len(classes)} available classes")
    chosen = np.sort(rng.choice(classes, size=way, replace=False))
    sup, qry = [], []
    for c in chosen:
        pool = np.flatnonzero(train_labels == c)
        qpool = np.flatnonzero(test_labels == c)
        if shot > len(pool) or queries > len(qpool):
            raise ValueError(f"class {c}: not enough samples for {shot} shots / {queries} queries")
        sup.append(rng.choice(pool, size=shot, replace=False))
        qry.append(rng.choice(qpool, size=queries, replace=False))
    return Episode(chosen, np.concatenate(sup), np.concatenate(qry))


def fewshot(
    train_x, train_y, test_x, test_y, way: int, shot: int, trials: int = 10, seed: int = 0, queries: int = 20,
    config: HeadConfig = LINEAR_HEAD,
) -> ProbeResult:
    """w-way s-shot linear probing; support from the train split, queries from test."""
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    rng = np.random.default_rng(seed)
    accs = []
    for t in range(trials):
        ep = sample_episode(train_y, test_y, way, shot, queries, rng)
        remap = {c: i for i, c in enumerate(ep.classes)}
        ys = np.array([remap[c] for c in train_y[ep.support]])
        yq = np.array([remap[c] for c in test_y[ep.query]])
        if way == 1:
            accs.append(1.0)
            continue
        r = probe_linear(train_x[ep.support], ys, test_x[ep.query], yq, seeds=(seed * 1000 + t,), config=config)
        accs.append(r.mean)
    return ProbeResult(accs)


# -- export ------------------------------------------------------------------------------


def export_embeddings(features: np.ndarray, labels: np.ndarray, path) -> Path:
    """Tab-separated rows: label, then the 2D feature values."""
    path = Path(path)
    with open(path, "w") as f:
        for lab, row in zip(labels, features):
            f.write(str(int(lab)) + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    return path


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    rows = [line.split("\t") for line in Path(path).read_text().splitlines() if line]
    labels = np.array([int(r[0]) for r in rows])
    feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float32)
    return feats, labels


def backbone_checksum(model: CSCon) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.state().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
