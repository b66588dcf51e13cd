"""Deterministic multi-source data: Gaussian sources and degraded toy images."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import norm as normal_dist

from .errors import CheckpointError, ContractError
from .oracle import GaussianSpec, sqrtm_psd

DEGRADATIONS = ("gaussian_noise", "box_blur", "gamma_dark", "haze_mix")
PATTERNS = ("gradient", "checker", "blob", "mixture")
AIRLIGHT = 0.8


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("BARYIR_THREADS", "1")))
    except ValueError:
        return 1


def sample_seed(seed: int, source: int, index: int) -> np.random.SeedSequence:
    """Per-sample seed, independent of generation order."""
    return np.random.SeedSequence([int(seed), int(source), int(index)])


# -- Gaussian sources ------------------------------------------------------------------


def sample_gaussian_source(spec: GaussianSpec, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, spec.dim))
    return spec.mean[None, :] + eps @ sqrtm_psd(spec.covariance)


def quantile_gaussian_sample(spec: GaussianSpec, n: int) -> np.ndarray:
    """Stratified 1-D discretization: the ``(i + 1/2)/n`` quantiles of ``spec``."""
    if spec.dim != 1:
        raise ContractError("quantile discretization is only defined in one dimension")
    q = normal_dist.ppf((np.arange(n) + 0.5) / n)
    return (spec.mean[0] + np.sqrt(spec.covariance[0, 0]) * q).reshape(-1, 1)


def source_weights_from_counts(counts) -> np.ndarray:
    """``lam_k = count_k / sum(counts)``, with the last entry taking the remainder."""
    counts = [int(c) for c in counts]
    if not counts or any(c <= 0 for c in counts):
        raise ContractError(f"source counts must be positive, got {counts}")
    total = sum(counts)
    lam = np.array([c / total for c in counts])
    lam[-1] = 1.0 - lam[:-1].sum()
    return lam


# -- images ------------------------------------------------------------------------------


def make_pattern(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "mixture":
        kind = PATTERNS[int(rng.integers(3))]
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    if kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        lo, hi = np.sort(rng.uniform(0.05, 0.95, size=2))
        img = lo + (hi - lo) * ramp
    elif kind == "checker":
        period = int(rng.integers(2, max(3, size // 3)))
        a, b = rng.uniform(0.1, 0.9, size=2)
        oy, ox = rng.integers(0, period, size=2)
        mask = (((np.arange(size)[:, None] + oy) // period + (np.arange(size)[None, :] + ox) // period) % 2) == 0
        img = np.where(mask, a, b)
    elif kind == "blob":
        img = np.full((size, size), rng.uniform(0.1, 0.4))
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0, 1, size=2)
            w = rng.uniform(0.08, 0.3)
            img = img + rng.uniform(0.2, 0.6) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
    else:
        raise ContractError(f"unknown pattern {kind!r}")
    return np.clip(img, 0.0, 1.0)


def _check_level(kind: str, level) -> None:
    ok = {
        "gaussian_noise": lambda v: 0.0 <= v <= 1.0,
        "box_blur": lambda v: float(v).is_integer() and v >= 1 and int(v) % 2 == 1,
        "gamma_dark": lambda v: 1.0 <= v <= 10.0,
        "haze_mix": lambda v: 0.0 <= v <= 1.0,
    }
    if kind not in ok:
        raise ContractError(f"unknown degradation kind {kind!r}")
    if not ok[kind](level):
        raise ContractError(f"level {level!r} out of range for {kind}")


def degrade(image: np.ndarray, kind: str, level: float, seed=0) -> np.ndarray:
    """Apply one synthetic degradation; the minimum level of every kind is the identity.

    ``gaussian_noise``: add ``N(0, level^2)`` (level in [0, 1]);
    ``box_blur``: normalized ``level x level`` box, odd level;
    ``gamma_dark``: ``x ** level`` (level in [1, 10]);
    ``haze_mix``: ``(1 - level) x + level * 0.8`` (level in [0, 1]).
    """
    _check_level(kind, level)
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        out = x + level * rng.standard_normal(x.shape)
    elif kind == "box_blur":
        out = uniform_filter(x, size=int(level), mode="nearest") if level > 1 else x.copy()
    elif kind == "gamma_dark":
        out = x**level
    else:
        out = (1.0 - level) * x + level * AIRLIGHT
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    levels: tuple

    def __post_init__(self):
        if not self.levels:
            raise ContractError("a degradation needs at least one level")
        for lv in self.levels:
            _check_level(self.kind, lv)


@dataclass
class SceneConfig:
    sources: list[DegradationSpec]
    counts: list[int]
    image_size: int = 16
    pattern: str = "mixture"
    seed: int = 0

    def __post_init__(self):
        self.sources = [s if isinstance(s, DegradationSpec) else DegradationSpec(s[0], tuple(s[1]))
                        for s in self.sources]
        if len(self.sources) != len(self.counts):
            raise ContractError("one count per source required")
        if any(int(c) <= 0 for c in self.counts):
            raise ContractError("zero or negative sample count")
        if self.pattern not in PATTERNS:
            raise ContractError(f"unknown pattern {self.pattern!r}")
        if self.image_size < 4:
            raise ContractError("image_size must be at least 4")


def standard_suite(counts=(100, 100, 100, 100), image_size: int = 16, seed: int = 0) -> SceneConfig:
    return SceneConfig(
        [
            DegradationSpec("gaussian_noise", (0.1, 0.2)),
            DegradationSpec("box_blur", (3, 5)),
            DegradationSpec("gamma_dark", (2.0, 3.0)),
            DegradationSpec("haze_mix", (0.3, 0.5)),
        ],
        list(counts),
        image_size,
        seed=seed,
    )


def ood_suite(counts=(100, 100, 100, 100), image_size: int = 16, seed: int = 10_000) -> SceneConfig:
    """Same sources, with unseen levels for noise (0.3) and haze (0.7)."""
    return SceneConfig(
        [
            DegradationSpec("gaussian_noise", (0.3,)),
            DegradationSpec("box_blur", (3, 5)),
            DegradationSpec("gamma_dark", (2.0, 3.0)),
            DegradationSpec("haze_mix", (0.7,)),
        ],
        list(counts),
        image_size,
        seed=seed,
    )


@dataclass
class PairedSample:
    clean: np.ndarray
    degraded: np.ndarray
    source_id: int
    level: float = 0.0


@dataclass
class Dataset:
    """Paired samples grouped by source, plus a manifest of counts and hashes."""

    groups: list[list[PairedSample]]
    manifest: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.groups)

    def arrays(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Flattened ``(n, H*W)`` clean and degraded arrays of source ``k``."""
        g = self.groups[k]
        return (np.stack([s.clean.reshape(-1) for s in g]), np.stack([s.degraded.reshape(-1) for s in g]))

    @property
    def weights(self) -> np.ndarray:
        return source_weights_from_counts([len(g) for g in self.groups])


def _make_sample(cfg: SceneConfig, k: int, i: int) -> PairedSample:
    ss = sample_seed(cfg.seed, k, i)
    rng = np.random.default_rng(ss)
    clean = make_pattern(cfg.pattern, cfg.image_size, rng)
    spec = cfg.sources[k]
    level = spec.levels[int(rng.integers(len(spec.levels)))]
    noise_seed = int(rng.integers(2**63))
    return PairedSample(clean, degrade(clean, spec.kind, level, noise_seed), k, float(level))


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def make_multisource_scene(cfg: SceneConfig) -> Dataset:
    jobs = [(k, i) for k, c in enumerate(cfg.counts) for i in range(int(c))]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        samples = list(pool.map(lambda ki: _make_sample(cfg, *ki), jobs))
    groups: list[list[PairedSample]] = [[] for _ in cfg.counts]
    for s in samples:
        groups[s.source_id].append(s)
    ds = Dataset(groups)
    h = hashlib.sha256()
    for g in groups:
        for s in g:
            h.update(np.ascontiguousarray(s.clean, "<f8").tobytes())
            h.update(np.ascontiguousarray(s.degraded, "<f8").tobytes())
    ds.manifest = {
        "schema": 1,
        "image_size": cfg.image_size,
        "counts": [len(g) for g in groups],
        "weights": ds.weights.tolist(),
        "sources": [asdict(s) for s in cfg.sources],
        "seed": cfg.seed,
        "pattern": cfg.pattern,
        "hash": h.hexdigest(),
    }
    return ds


def export_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``manifest.json`` and little-endian float64 ``.f64`` files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for k in range(ds.K):
        clean, deg = ds.arrays(k)
        levels = np.array([s.level for s in ds.groups[k]])
        for name, arr in (("clean", clean), ("degraded", deg), ("levels", levels)):
            fname = f"source{k}_{name}.f64"
            (out / fname).write_bytes(np.ascontiguousarray(arr, "<f8").tobytes())
            files[fname] = {"shape": list(arr.shape), "sha256": _digest(arr)}
    manifest = dict(ds.manifest, files=files)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def import_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    arrays = {}
    for fname, meta in manifest["files"].items():
        raw = (src / fname).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if arr.size != int(np.prod(meta["shape"])):
            raise CheckpointError(f"{fname}: size does not match manifest")
        arr = arr.reshape(meta["shape"])
        if _digest(arr) != meta["sha256"]:
            raise CheckpointError(f"{fname}: hash mismatch")
        arrays[fname] = arr
    size = manifest["image_size"]
    groups = []
    for k in range(len(manifest["counts"])):
        clean = arrays[f"source{k}_clean.f64"]
        deg = arrays[f"source{k}_degraded.f64"]
        levels = arrays[f"source{k}_levels.f64"]
        groups.append(
            [PairedSample(c.reshape(size, size), d.reshape(size, size), k, float(lv))
             for c, d, lv in zip(clean, deg, levels)]
        )
    manifest = {k: v for k, v in manifest.items() if k != "files"}
    return Dataset(groups, manifest)
