"""The dual-branch center/surrounding network.

Position projector and mini-PointNet embed each patch twice (where it is,
what it looks like); one mask index set per sample replaces the center
embedding in one branch and the surrounding embedding in the other; a
pre-norm transformer plus a 2-layer projector encodes both branches with
shared parameters.

Weight matrices are stored ``(in, out)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .numerics import ParamStore, Tensor, fan_in_uniform, ops, trunc_normal
from .numerics.tensor import ShapeError


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 96
    heads: int = 4
    mlp_ratio: float = 4.0
    n_patches: int = 32
    patch_size: int = 16
    mask_ratio: float = 0.6
    tau: float = 1.0
    drop_path: float = 0.1
    proj_hidden: int = 0  # 0 -> dim
    shared: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.n_patches < 2:
            raise ValueError(f"n_patches must be >= 2, got {self.n_patches}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ValueError(f"drop_path must lie in [0, 1), got {self.drop_path}")
        if self.depth < 0 or self.patch_size < 1:
            raise ValueError("depth must be >= 0 and patch_size >= 1")

    @property
    def n_masked(self) -> int:
        return mask_count(self.n_patches, self.mask_ratio)

    @property
    def hidden(self) -> int:
        return self.proj_hidden or self.dim

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


DESK = ModelConfig()
PAPER = ModelConfig(depth=12, dim=384, heads=6, n_patches=64, patch_size=32)
PROFILES = {"desk": DESK, "paper": PAPER}


def mask_count(n: int, ratio: float) -> int:
    """round(ratio * n), half up, clamped to [1, n - 1]."""
    return int(min(max(math.floor(ratio * n + 0.5), 1), n - 1))


@dataclass
class MaskSpec:
    """Sorted masked patch indices, one row per sample: (B, M)."""

    indices: np.ndarray
    n: int

    @property
    def M(self) -> int:
        return self.indices.shape[-1]

    def as_bool(self) -> np.ndarray:
        out = np.zeros((self.indices.shape[0], self.n), dtype=bool)
        np.put_along_axis(out, self.indices, True, axis=1)
        return out


def make_mask(n: int, ratio: float, rng: np.random.Generator, batch: int = 1) -> MaskSpec:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n < 2:
        raise ValueError(f"need at least 2 patches to mask, got {n}")
    m = mask_count(n, ratio)
    idx = np.stack([np.sort(rng.permutation(n)[:m]) for _ in range(batch)])
    return MaskSpec(idx, n)


def mask_from_indices(indices, n: int) -> MaskSpec:
    idx = np.sort(np.atleast_2d(np.asarray(indices, dtype=np.intp)), axis=-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"mask indices out of range for {n} patches")
    for row in idx:
        if len(np.unique(row)) != len(row):
            raise ValueError("mask indices must be distinct")
    return MaskSpec(idx, n)


def _stage_dims(dim: int) -> int:
    return -(-dim // 3)


BN_MOMENTUM = 0.1


class CSCon:
    """Parameters plus the forward pieces of the network.

    ``training`` switches on stochastic depth and batch statistics in the
    patch encoder (which also update the running statistics kept in
    ``buffers``); eval mode is a pure function of the input.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = ParamStore(dtype)
        self.training = False
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # -- construction ------------------------------------------------------

    def _linear(self, rng, name, n_in, n_out, init="trunc"):
        w = trunc_normal(rng, (n_in, n_out)) if init == "trunc" else fan_in_uniform(rng, (n_in, n_out))
        self.params.add(f"{name}.w", w)
        b = np.zeros(n_out) if init == "trunc" else rng.uniform(-1, 1, n_out) / math.sqrt(n_in)
        self.params.add(f"{name}.b", b)

    def _layer_norm(self, name, d):
        self.params.add(f"{name}.g", np.ones(d))
        self.params.add(f"{name}.b", np.zeros(d))

    def _batch_norm(self, name, d):
        self._layer_norm(name, d)
        self.buffers[f"{name}.running_mean"] = np.zeros(d, dtype=self.params.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(d, dtype=self.params.dtype)

    def _encoder(self, rng, prefix):
        c = self.config
        d, hid = c.dim, int(round(c.dim * c.mlp_ratio))
        for i in range(c.depth):
            p = f"{prefix}.blocks.{i}"
            self._layer_norm(f"{p}.ln1", d)
            for n in ("q", "k", "v", "o"):
                self._linear(rng, f"{p}.attn.{n}", d, d)
            self._layer_norm(f"{p}.ln2", d)
            self._linear(rng, f"{p}.mlp.fc1", d, hid)
            self._linear(rng, f"{p}.mlp.fc2", hid, d)

    def _projector(self, rng, prefix):
        c = self.config
        self._linear(rng, f"{prefix}.fc1", c.dim, c.hidden)
        self._linear(rng, f"{prefix}.fc2", c.hidden, c.dim)

    def _init_params(self, rng):
        c = self.config
        d, c1 = c.dim, _stage_dims(c.dim)
        self._linear(rng, "pos.fc1", 3, d, init="fan_in")
        self._linear(rng, "pos.fc2", d, d, init="fan_in")
        self._linear(rng, "patch.conv1", 3, c1, init="fan_in")
        self._batch_norm("patch.bn1", c1)
        self._linear(rng, "patch.conv2", c1, c1, init="fan_in")
        self._linear(rng, "patch.conv3", 2 * c1, d, init="fan_in")
        self._batch_norm("patch.bn2", d)
        self._linear(rng, "patch.conv4", d, d, init="fan_in")
        self.params.add("mask.c", trunc_normal(rng, (d,)))
        self.params.add("mask.s", trunc_normal(rng, (d,)))
        self._encoder(rng, "enc")
        self._projector(rng, "proj")
        if not c.shared:
            self._encoder(rng, "enc2")
            self._projector(rng, "proj2")

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def lin(self, x: Tensor, name: str) -> Tensor:
        return ops.linear(x, self.p(f"{name}.w"), self.p(f"{name}.b"))

    def bn(self, x: Tensor, name: str) -> Tensor:
        g, b = self.p(f"{name}.g"), self.p(f"{name}.b")
        rm, rv = f"{name}.running_mean", f"{name}.running_var"
        if not self.training:
            return ops.batch_norm(x, g, b, self.buffers[rm], self.buffers[rv])[0]
        out, mean, var = ops.batch_norm(x, g, b)
        n = x.data.size // x.shape[-1]
        unbiased = var * (n / max(n - 1, 1))
        dt = self.params.dtype
        self.buffers[rm] = ((1 - BN_MOMENTUM) * self.buffers[rm] + BN_MOMENTUM * mean).astype(dt)
        self.buffers[rv] = ((1 - BN_MOMENTUM) * self.buffers[rv] + BN_MOMENTUM * unbiased).astype(dt)
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics, for checkpoints."""
        out = dict(self.params.state())
        out.update((k, v.copy()) for k, v in self.buffers.items())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.buffers) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks buffers {missing}")
        self.params.load_state({k: v for k, v in state.items() if k not in self.buffers})
        for k in self.buffers:
            self.buffers[k] = np.asarray(state[k], dtype=self.params.dtype).copy()

    def _cast(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.params.dtype))

    # -- embeddings --------------------------------------------------------

    def embed_centers(self, centers) -> Tensor:
        """(..., N, 3) -> (..., N, D): affine, GELU, affine."""
        x = self._cast(centers)
        if x.shape[-1] != 3:
            raise ShapeError(f"embed_centers: expected (..., 3), got {x.shape}")
        return self.lin(ops.gelu(self.lin(x, "pos.fc1")), "pos.fc2")

    def embed_patches(self, patches) -> Tensor:
        """(B, N, k, 3) center-relative patches -> (B, N, D) via a two-stage mini-PointNet."""
        x = self._cast(patches)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"embed_patches: expected (B, N, k, 3), got {x.shape}")
        b, n, k, _ = x.shape
        x = ops.reshape(x, (b * n, k, 3))
        f = self.lin(ops.relu(self.bn(self.lin(x, "patch.conv1"), "patch.bn1")), "patch.conv2")
        c1 = f.shape[-1]
        g = ops.broadcast_to(ops.reshape(ops.reduce_max(f, axis=1), (b * n, 1, c1)), (b * n, k, c1))
        f = ops.concat([g, f], axis=-1)
        f = self.lin(ops.relu(self.bn(self.lin(f, "patch.conv3"), "patch.bn2")), "patch.conv4")
        return ops.reshape(ops.reduce_max(f, axis=1), (b, n, self.config.dim))

    # -- branches ----------------------------------------------------------

    def build_branches(self, e_c: Tensor, e_s: Tensor, mask: MaskSpec) -> tuple[Tensor, Tensor]:
        """Z_c = E'_c + E_s and Z_s = E'_s + E_c with the same mask for both."""
        if e_c.shape != e_s.shape:
            raise ShapeError(f"build_branches: E_c {e_c.shape} vs E_s {e_s.shape}")
        m = mask.as_bool()[..., None]
        z_c = ops.where(m, self.p("mask.c"), e_c) + e_s
        z_s = ops.where(m, self.p("mask.s"), e_s) + e_c
        return z_c, z_s

    def mask_surroundings(self, e_c: Tensor, e_s: Tensor, mask: MaskSpec) -> Tensor:
        """E_c + E'_s: the surrounding-only mask used by the surrounding-surrounding ablation."""
        return ops.where(mask.as_bool()[..., None], self.p("mask.s"), e_s) + e_c

    # -- encoder -----------------------------------------------------------

    def attention(self, x: Tensor, prefix: str, return_weights: bool = False):
        c = self.config
        b, n, d = x.shape
        h, dh = c.heads, d // c.heads

        def heads(t):
            return ops.transpose(ops.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q = heads(self.lin(x, f"{prefix}.q"))
        k = heads(self.lin(x, f"{prefix}.k"))
        v = heads(self.lin(x, f"{prefix}.v"))
        att = ops.softmax(ops.scale(q @ ops.transpose(k), 1.0 / math.sqrt(dh)))
        o = ops.reshape(ops.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
        out = self.lin(o, f"{prefix}.o")
        return (out, att) if return_weights else out

    def _drop_path(self, x: Tensor, rate: float, rng) -> Tensor:
        if not self.training or rate <= 0.0 or rng is None:
            return x
        keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
        return x * keep.reshape(-1, *([1] * (x.ndim - 1)))

    def blocks(self, z: Tensor, prefix: str = "enc", rng=None) -> Tensor:
        c = self.config
        rates = np.linspace(0.0, c.drop_path, c.depth) if c.depth else []
        x = z
        for i in range(c.depth):
            p = f"{prefix}.blocks.{i}"
            h = ops.layer_norm(x, self.p(f"{p}.ln1.g"), self.p(f"{p}.ln1.b"))
            x = x + self._drop_path(self.attention(h, f"{p}.attn"), rates[i], rng)
            h = ops.layer_norm(x, self.p(f"{p}.ln2.g"), self.p(f"{p}.ln2.b"))
            h = self.lin(ops.gelu(self.lin(h, f"{p}.mlp.fc1")), f"{p}.mlp.fc2")
            x = x + self._drop_path(h, rates[i], rng)
        return x

    def project(self, x: Tensor, prefix: str = "proj") -> Tensor:
        return self.lin(ops.gelu(self.lin(x, f"{prefix}.fc1")), f"{prefix}.fc2")

    def encode(self, z, branch: str = "c", rng=None) -> Tensor:
        """Transformer + projector. In non-shared mode branch ``s`` has its own weights."""
        enc, proj = self._prefixes(branch)
        z = self._cast(z)
        if z.ndim != 3 or z.shape[-1] != self.config.dim:
            raise ShapeError(f"encode: expected (B, N, {self.config.dim}), got {z.shape}")
        return self.project(self.blocks(z, enc, rng), proj)

    def _prefixes(self, branch: str) -> tuple[str, str]:
        if branch == "s" and not self.config.shared:
            return "enc2", "proj2"
        return "enc", "proj"

    def encode_pair(self, z_c: Tensor, z_s: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        """Encode both branches; shared mode runs them as one stacked batch."""
        if self.config.shared:
            b = z_c.shape[0]
            h = self.encode(ops.concat([z_c, z_s], axis=0), "c", rng)
            return h[:b], h[b:]
        return self.encode(z_c, "c", rng), self.encode(z_s, "s", rng)

    def tokens(self, centers, patches) -> Tensor:
        """Unmasked forward to pre-projector tokens (B, N, D)."""
        z = self.embed_centers(centers) + self.embed_patches(patches)
        return self.blocks(z, "enc", None)

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("pos.", "patch.", "enc."))]


def extract_masked(h: Tensor, mask: MaskSpec) -> Tensor:
    """Rows of H at the mask indices, ascending: (B, N, D) -> (B, M, D)."""
    return ops.gather_rows(h, mask.indices)


def pretrain_views(
    model: CSCon,
    centers: np.ndarray,
    patches: np.ndarray,
    rng: np.random.Generator,
    positive_pair: str = "cs",
    triplet: bool = False,
) -> dict:
    """One pretraining forward: returns the masked-position slices to contrast.

    ``positive_pair="cs"`` is the center/surrounding pair built from one mask.
    ``"ss"`` draws two independent masks, hides only surroundings in both
    views, and contrasts the tokens at the first mask's positions.
    ``triplet`` adds the unmasked sequence as an alignment target.
    """
    c = model.config
    b = centers.shape[0]
    e_c = model.embed_centers(centers)
    e_s = model.embed_patches(patches)
    mask = make_mask(c.n_patches, c.mask_ratio, rng, b)
    drop_rng = rng if model.training else None
    if positive_pair == "cs":
        z_c, z_s = model.build_branches(e_c, e_s, mask)
    elif positive_pair == "ss":
        other = make_mask(c.n_patches, c.mask_ratio, rng, b)
        z_c = model.mask_surroundings(e_c, e_s, mask)
        z_s = model.mask_surroundings(e_c, e_s, other)
    else:
        raise ValueError(f"positive_pair must be 'cs' or 'ss', got {positive_pair!r}")
    h_c, h_s = model.encode_pair(z_c, z_s, drop_rng)
    out = {"v_c": extract_masked(h_c, mask), "v_s": extract_masked(h_s, mask), "mask": mask}
    if triplet:
        h_full = model.encode(e_c + e_s, "c", drop_rng)
        out["v_full"] = extract_masked(h_full, mask)
    return out
