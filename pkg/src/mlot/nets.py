"""Network parameterizations on top of :mod:`mlot.autodiff`, plus checkpoints.

Images travel through the convolutional parts as "pixel rows": a batch of
``B`` images of size ``H x W`` with ``C`` channels is a ``(B*H*W, C)``
tensor, so every convolution is a gather followed by a matmul.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, concat
from .errors import CheckpointError, ContractError, DimensionError

ACTIVATIONS = ("relu", "none")
DECODER_HEAD_SCALE = 1e-2


def _seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(_seq(seed))


class Mlp:
    """Fully connected network; ``layers`` holds ``(weight, bias)`` tensor pairs."""

    def __init__(self, layers: list[tuple[Tensor, Tensor]], activations: list[str]):
        if len(layers) != len(activations):
            raise DimensionError("one activation tag per layer required")
        for (W, b), (W2, _) in zip(layers, layers[1:]):
            if W.shape[1] != W2.shape[0]:
                raise DimensionError(f"layer widths do not chain: {W.shape} -> {W2.shape}")
        for W, b in layers:
            if b.shape != (W.shape[1],):
                raise DimensionError(f"bias shape {b.shape} does not match weight {W.shape}")
        if any(a not in ACTIVATIONS for a in activations):
            raise ValueError(f"activations must be in {ACTIVATIONS}")
        self.layers = layers
        self.activations = list(activations)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [W.shape[1] for W, _ in self.layers]

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionError(f"expected (n, {self.input_dim}) input, got {h.shape}")
        for (W, b), act in zip(self.layers, self.activations):
            h = h @ W + b
            if act == "relu":
                h = h.relu()
        return h


def init_params(seed, dims: list[int], activation: str = "relu", zero_last: bool = False,
                last_scale: float = 1.0) -> Mlp:
    """MLP with ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` weights and zero biases.

    ``activation`` applies to every hidden layer; the output layer is linear,
    with its weights multiplied by ``last_scale`` (zeroed if ``zero_last``).
    """
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise DimensionError(f"invalid layer dimensions {dims}")
    rng = _rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((Tensor(W, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))
    layers[-1][0].data[...] *= 0.0 if zero_last else last_scale
    acts = [activation] * (len(layers) - 1) + ["none"]
    return Mlp(layers, acts)


def one_hot(k: int, n: int, K: int) -> np.ndarray:
    out = np.zeros((n, K))
    out[:, k] = 1.0
    return out


class BarycenterMap:
    """Residual map ``T(z) = z + mlp(z)`` with a zero-initialized output layer.

    With ``conditioned=True`` the MLP also sees a one-hot source code, so
    ``T`` acts on the disjoint union of the source spaces.
    """

    def __init__(self, mlp: Mlp, d: int, n_sources: int = 0):
        self.mlp = mlp
        self.d = d
        self.n_sources = n_sources
        if mlp.input_dim != d + n_sources or mlp.output_dim != d:
            raise DimensionError("map MLP dimensions do not match d and the source code")

    @classmethod
    def create(cls, seed, d: int, hidden: list[int], n_sources: int = 0) -> "BarycenterMap":
        return cls(init_params(seed, [d + n_sources, *hidden, d], zero_last=True), d, n_sources)

    @property
    def conditioned(self) -> bool:
        return self.n_sources > 0

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def __call__(self, z, k: int | None = None) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.d:
            raise DimensionError(f"expected (n, {self.d}) latents, got {z.shape}")
        inp = z
        if self.conditioned:
            if k is None:
                raise DimensionError("a source-conditioned map needs the source index")
            inp = concat([z, Tensor(one_hot(k, z.shape[0], self.n_sources))], axis=1)
        return z + self.mlp(inp)


class PotentialNet:
    """Scalar potential on the barycenter space; no hidden layers means affine."""

    def __init__(self, mlp: Mlp):
        if mlp.output_dim != 1:
            raise DimensionError("a potential must have a scalar output")
        self.mlp = mlp

    @classmethod
    def create(cls, seed, d: int, hidden: list[int]) -> "PotentialNet":
        return cls(init_params(seed, [d, *hidden, 1]))

    @classmethod
    def affine(cls, w, b: float = 0.0) -> "PotentialNet":
        w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
        return cls(Mlp([(Tensor(w, requires_grad=True), Tensor([float(b)], requires_grad=True))], ["none"]))

    @property
    def is_affine(self) -> bool:
        return len(self.mlp.layers) == 1

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def __call__(self, y) -> Tensor:
        return self.mlp(y).reshape(-1)


class TabularPotential:
    """Potential stored as one value per point of a finite grid.

    Evaluating it anywhere off the grid is a contract error.
    """

    def __init__(self, grid, values=None):
        g = np.asarray(grid, dtype=np.float64)
        self.grid = g.reshape(-1, 1) if g.ndim == 1 else g
        init = np.zeros(self.grid.shape[0]) if values is None else np.asarray(values, dtype=np.float64)
        if init.shape != (self.grid.shape[0],):
            raise DimensionError(f"expected {self.grid.shape[0]} grid values, got {init.shape}")
        self.values = Tensor(init.copy(), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.values]

    def index(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, self.grid.shape[1])
        dist = np.abs(pts[:, None, :] - self.grid[None, :, :]).max(axis=-1)
        idx = dist.argmin(axis=1)
        if np.any(dist[np.arange(len(idx)), idx] > 1e-9):
            raise ContractError("tabular potential evaluated off its grid")
        return idx

    def __call__(self, y) -> Tensor:
        return self.values[self.index(as_tensor(y).data)]


# -- convolutional pieces ------------------------------------------------------------


def patch_index(batch: int, size: int, kernel: int, stride: int) -> np.ndarray:
    """Row indices of ``kernel x kernel`` patches with replicate padding.

    Returns ``(batch * out * out, kernel * kernel)`` indices into a
    pixel-row tensor of ``batch`` images of side ``size``.
    """
    r = kernel // 2
    centers = np.arange(0, size, stride)
    offs = np.arange(-r, r + 1)
    ys = np.clip(centers[:, None] + offs[None, :], 0, size - 1)
    rows = ys[:, None, :, None] * size + ys[None, :, None, :]
    rows = rows.reshape(len(centers) ** 2, kernel * kernel)
    base = (np.arange(batch) * size * size)[:, None, None]
    return (base + rows[None]).reshape(-1, kernel * kernel)


class ConvEncoder:
    """Two stride-2 3x3 convolutions, global average pooling, linear head."""

    def __init__(self, convs: list[Mlp], head: Mlp, image_size: int):
        self.convs = convs
        self.head = head
        self.image_size = image_size

    @classmethod
    def create(cls, seed, image_size: int, channels: list[int], d: int) -> "ConvEncoder":
        ss = _seq(seed).spawn(len(channels) + 1)
        convs, c_in = [], 1
        for s, c_out in zip(ss, channels):
            convs.append(init_params(s, [9 * c_in, c_out]))
            c_in = c_out
        return cls(convs, init_params(ss[-1], [c_in, d]), image_size)

    @property
    def d(self) -> int:
        return self.head.output_dim

    def parameters(self) -> list[Tensor]:
        return [p for m in [*self.convs, self.head] for p in m.parameters()]

    def __call__(self, images) -> Tensor:
        x = as_tensor(images)
        B = x.shape[0]
        if x.ndim != 2 or x.shape[1] != self.image_size**2:
            raise DimensionError(f"expected (B, {self.image_size ** 2}) images, got {x.shape}")
        h, size = x.reshape(-1, 1), self.image_size
        for conv in self.convs:
            c = h.shape[1]
            idx = patch_index(B, size, 3, 2)
            size = (size + 1) // 2
            patches = h[idx].reshape(idx.shape[0], 9 * c)
            h = conv(patches).relu()
        pooled = h.reshape(B, size * size, h.shape[1]).mean(axis=1)
        return self.head(pooled)


class PixelDecoder:
    """Per-pixel residual decoder conditioned on a global latent.

    Each output pixel is ``x + mlp([patch(x), h])`` where ``patch`` is the
    ``kernel x kernel`` neighbourhood of the degraded input.
    """

    def __init__(self, mlp: Mlp, image_size: int, kernel: int):
        self.mlp = mlp
        self.image_size = image_size
        self.kernel = kernel

    @classmethod
    def create(cls, seed, image_size: int, d: int, hidden: list[int], kernel: int = 5) -> "PixelDecoder":
        # near-zero head: starts close to the identity yet passes gradient to the latent
        mlp = init_params(seed, [kernel * kernel + d, *hidden, 1], last_scale=DECODER_HEAD_SCALE)
        return cls(mlp, image_size, kernel)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def __call__(self, images, h) -> Tensor:
        x, h = as_tensor(images), as_tensor(h)
        B, P = x.shape[0], self.image_size**2
        idx = patch_index(B, self.image_size, self.kernel, 1)
        flat = x.reshape(-1, 1)
        patches = flat[idx].reshape(idx.shape[0], self.kernel**2)
        cond = h[np.repeat(np.arange(B), P)]
        out = self.mlp(concat([patches, cond], axis=1))
        return (flat + out).reshape(B, P)


# -- bundle and checkpoints --------------------------------------------------------------


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelBundle:
    barycenter_map: BarycenterMap
    potentials: list[PotentialNet]
    encoder: ConvEncoder | None = None
    decoder: PixelDecoder | None = None
    reduction: Mlp | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.potentials)

    @property
    def d(self) -> int:
        return self.barycenter_map.d

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []

        def add(prefix, params):
            out.extend((f"{prefix}.{i}", p) for i, p in enumerate(params))

        add("map", self.barycenter_map.parameters())
        for k, f in enumerate(self.potentials):
            add(f"potential{k}", f.parameters())
        if self.encoder is not None:
            add("encoder", self.encoder.parameters())
        if self.decoder is not None:
            add("decoder", self.decoder.parameters())
        if self.reduction is not None:
            add("reduction", self.reduction.parameters())
        return out

    def restoration_parameters(self) -> list[Tensor]:
        parts = [self.encoder, self.decoder, self.reduction]
        return [p for m in parts if m is not None for p in m.parameters()]

    def potential_parameters(self) -> list[Tensor]:
        return [p for f in self.potentials for p in f.parameters()]


def build_bundle(arch: dict, seed: int, metadata: dict | None = None) -> ModelBundle:
    """Construct a freshly initialized bundle from an architecture dict.

    Keys: ``d``, ``K``, ``map_hidden``, ``map_conditioned``,
    ``potential_hidden`` and optionally ``image_size``,
    ``encoder_channels``, ``decoder_hidden``, ``decoder_kernel``,
    ``reduction`` (bool), ``potential_grid`` (tabular potentials).
    """
    d, K = int(arch["d"]), int(arch["K"])
    ss = _seq(seed).spawn(K + 4)
    T = BarycenterMap.create(ss[0], d, list(arch.get("map_hidden", [64, 64])),
                             K if arch.get("map_conditioned", False) else 0)
    if arch.get("potential_grid") is not None:
        pots = [TabularPotential(arch["potential_grid"]) for _ in range(K)]
    else:
        pots = [PotentialNet.create(ss[1 + k], d, list(arch.get("potential_hidden", [64]))) for k in range(K)]
    enc = dec = red = None
    if arch.get("image_size"):
        size = int(arch["image_size"])
        enc = ConvEncoder.create(ss[K + 1], size, list(arch.get("encoder_channels", [8, 16])), d)
        dec = PixelDecoder.create(ss[K + 2], size, d, list(arch.get("decoder_hidden", [32, 32])),
                                  int(arch.get("decoder_kernel", 5)))
        if arch.get("reduction", False):
            red = init_params(ss[K + 3], [2 * d, d], activation="none")
    meta = {"K": K, "d": d, "seed": seed, "arch": arch, "config_hash": config_hash(arch)}
    meta.update(metadata or {})
    return ModelBundle(T, pots, enc, dec, red, meta)


_MAGIC = "mlot-checkpoint"


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """JSON header line, then raw little-endian float64 parameters in header order."""
    named = bundle.named_parameters()
    header = {
        "format": _MAGIC,
        "version": 1,
        "byte_order": "little",
        "dtype": "float64",
        "arch": bundle.metadata["arch"],
        "K": bundle.K,
        "d": bundle.d,
        "seed": bundle.metadata.get("seed"),
        "config_hash": bundle.metadata.get("config_hash"),
        "metadata": {k: v for k, v in bundle.metadata.items() if k not in ("arch",)},
        "tensors": [[name, list(t.shape)] for name, t in named],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    tmp.replace(path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header") from exc
    if header.get("format") != _MAGIC or header.get("byte_order") != "little":
        raise CheckpointError(f"{path}: not a little-endian {_MAGIC} file")
    return header


def load_checkpoint(path, arch: dict | None = None) -> ModelBundle:
    """Load a bundle; if ``arch`` is given it must match the stored architecture."""
    header = read_checkpoint_header(path)
    if arch is not None and config_hash(arch) != config_hash(header["arch"]):
        raise CheckpointError(f"{path}: architecture does not match the requested one")
    meta = dict(header.get("metadata", {}))
    bundle = build_bundle(header["arch"], header["seed"], meta)
    named = bundle.named_parameters()
    expected = [[n, list(t.shape)] for n, t in named]
    if expected != header["tensors"]:
        raise CheckpointError(f"{path}: tensor layout does not match the architecture")
    with open(path, "rb") as fh:
        fh.readline()
        raw = fh.read()
    total = sum(t.size for _, t in named)
    if len(raw) != 8 * total:
        raise CheckpointError(f"{path}: expected {8 * total} payload bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    off = 0
    for _, t in named:
        t.data[...] = flat[off : off + t.size].reshape(t.shape)
        off += t.size
    if not np.all(np.isfinite(flat)):
        raise CheckpointError(f"{path}: non-finite parameters")
    return bundle
