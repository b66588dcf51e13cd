"""Flat ``key = value`` experiment configuration with dotted section prefixes.

Example::

    # 1-D Gaussian barycenter
    experiment.kind = gaussian_barycenter
    experiment.seed = 3
    data.means = 0; 4
    data.variances = 1; 1
    mlot.gamma = 0
    optim.iterations = 3000

Blank lines and ``#`` comments are ignored. Lists use commas; lists of
vectors separate vectors with ``;``. Every key has a default (see
``KEYS``) and a range check; unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .errors import ContractError

KINDS = ("gaussian_barycenter", "discrete_verify", "restore_toy")


def _floats(v: str) -> list[float]:
    return [float(x) for x in v.split(",") if x.strip()]


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.split(",") if x.strip()]


def _vectors(v: str) -> list[list[float]]:
    return [[float(x) for x in part.replace(",", " ").split()] for part in v.split(";") if part.strip()]


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str(v: str) -> str:
    return v.strip()


def _one_of(*options):
    return lambda v: v in options


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _all_pos(vs):
    return all(x > 0 for x in vs)


# key -> (default, parser, check, doc)
KEYS: dict[str, tuple[Any, Callable, Callable, str]] = {
    "experiment.kind": ("gaussian_barycenter", _str, _one_of(*KINDS), "experiment kind"),
    "experiment.seed": (0, int, _nonneg, "global seed"),
    "mlot.base_cost": ("euclidean", _str, _one_of("euclidean", "squared_euclidean"), "metric part of C_k"),
    "mlot.gamma": (0.1, float, _nonneg, "weight of the auxiliary cost terms"),
    "mlot.tau": (0.07, float, _pos, "contrastive temperature"),
    "mlot.beta": (2.0, float, _pos, "strong-convexity constant used by the error bound"),
    "mlot.congruence_coeff": (1.0, float, _nonneg, "congruence penalty coefficient"),
    "mlot.hard_congruence": (False, _bool, lambda v: True, "parameterize f_K from the others"),
    "mlot.weights": ([], _floats, lambda v: not v or _all_pos(v), "explicit source weights (empty: from counts)"),
    "data.means": ([[0.0], [4.0]], _vectors, lambda v: len(v) >= 1, "Gaussian source means"),
    "data.variances": ([1.0, 1.0], lambda v: _floats(v.replace(";", ",")), lambda v: all(x >= 0 for x in v),
                       "isotropic variance per Gaussian source"),
    "data.counts": ([2048, 2048], _ints, _all_pos, "samples per source"),
    "data.sampling": ("random", _str, _one_of("random", "quantile"), "Gaussian sample scheme"),
    "data.supports": ([[0.0], [4.0]], _vectors, lambda v: len(v) >= 1, "1-D support points per discrete source"),
    "data.grid_min": (0.0, float, lambda v: True, "discrete candidate grid lower end"),
    "data.grid_max": (4.0, float, lambda v: True, "discrete candidate grid upper end"),
    "data.grid_n": (9, int, lambda v: 2 <= v <= 128, "discrete candidate grid size"),
    "data.suite": ("standard", _str, _one_of("standard", "ood"), "toy degradation suite"),
    "data.image_size": (16, int, lambda v: 4 <= v <= 64, "toy image side"),
    "data.pattern": ("mixture", _str, _one_of("gradient", "checker", "blob", "mixture"), "clean image patterns"),
    "data.eval_counts": ([64, 64, 64, 64], _ints, _all_pos, "evaluation samples per source"),
    "model.d": (1, int, lambda v: 1 <= v <= 256, "latent dimension"),
    "model.map_hidden": ([64, 64], _ints, _all_pos, "barycenter map hidden widths"),
    "model.map_conditioned": (True, _bool, lambda v: True, "feed a one-hot source code to T"),
    "model.potential_hidden": ([64], _ints, _all_pos, "potential hidden widths (empty: affine)"),
    "model.encoder_channels": ([8, 16], _ints, _all_pos, "encoder conv channels"),
    "model.decoder_hidden": ([32, 32], _ints, _all_pos, "decoder hidden widths"),
    "model.decoder_kernel": (5, int, lambda v: v >= 1 and v % 2 == 1, "decoder patch size"),
    "restore.mode": ("barycenter_plus_specific", _str,
                     _one_of("barycenter_only", "original_only", "original_plus_specific",
                             "barycenter_plus_specific"), "aggregation mode"),
    "restore.fusion": ("concat", _str, _one_of("concat", "add"), "aggregation fusion"),
    "restore.encoder_objective_grad": (False, _bool, lambda v: True,
                                       "let the barycenter objective's gradient reach the encoder"),
    "restore.mu": (0.1, float, _nonneg, "weight of the barycenter objective in the joint loss"),
    "optim.lr_map": (1e-3, float, _pos, "Adam step for T"),
    "optim.lr_potential": (1e-3, float, _pos, "Adam step for the potentials"),
    "optim.lr_restore": (1e-3, float, _pos, "Adam step for encoder/decoder/reduction"),
    "optim.n_T": (5, int, lambda v: v >= 1, "minimization steps per outer iteration"),
    "optim.n_f": (1, int, lambda v: v >= 1, "maximization steps per outer iteration"),
    "optim.lr_schedule": ("constant", _str, _one_of("constant", "cosine"), "step-size schedule over iterations"),
    "optim.iterations": (2000, int, lambda v: v >= 1, "outer iterations"),
    "optim.batch_size": (128, int, lambda v: v >= 1, "samples per source per step"),
    "log.interval": (10, int, lambda v: v >= 1, "iterations between log records"),
    "log.checkpoint_interval": (500, int, lambda v: v >= 1, "iterations between checkpoints"),
    "log.eval_interval": (0, int, _nonneg, "iterations between metric snapshots (0: end only)"),
    "log.diagnostic_interval": (0, int, _nonneg, "iterations between duality-gap snapshots (0: end only)"),
}

# Defaults that differ per experiment kind; applied before user values.
KIND_DEFAULTS: dict[str, dict] = {
    "gaussian_barycenter": {},
    "discrete_verify": {
        "mlot.base_cost": "squared_euclidean",
        "mlot.gamma": 0.0,
        "mlot.hard_congruence": True,
        "optim.lr_potential": 0.01,
        "optim.iterations": 3000,
        "data.counts": [1, 1],
    },
    "restore_toy": {
        "model.d": 16,
        "model.map_conditioned": False,
        "data.counts": [128, 128, 128, 128],
        "model.encoder_channels": [16, 32],
        "model.decoder_hidden": [64, 64],
        "optim.lr_restore": 3e-3,
        "optim.lr_schedule": "cosine",
        "optim.n_T": 1,
        "optim.batch_size": 8,
        "optim.iterations": 3000,
        "log.checkpoint_interval": 250,
    },
}


@dataclass
class TrainConfig:
    """Validated experiment configuration; ``values`` maps every key in ``KEYS``."""

    values: dict = field(default_factory=dict)
    out_dir: str | None = None

    def __post_init__(self):
        full = {k: v[0] for k, v in KEYS.items()}
        kind = self.values.get("experiment.kind", full["experiment.kind"])
        if kind not in KINDS:
            raise ContractError(f"unknown experiment kind {kind!r}")
        full.update(KIND_DEFAULTS[kind])
        for k, v in self.values.items():
            if k not in KEYS:
                raise ContractError(f"unknown config key {k!r}")
            full[k] = v
        for k, v in full.items():
            if not KEYS[k][2](v):
                raise ContractError(f"config value out of range: {k} = {v!r}")
        self.values = full
        if self.gamma > 0 and self.kind != "discrete_verify" and self["optim.batch_size"] < 2:
            raise ContractError("batch_size must be at least 2 per source when gamma > 0")

    def __getitem__(self, key):
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["experiment.kind"]

    @property
    def seed(self) -> int:
        return self.values["experiment.seed"]

    @property
    def gamma(self) -> float:
        return self.values["mlot.gamma"]

    def replace(self, **changes) -> "TrainConfig":
        """Copy with overrides; keys use ``__`` for the dot (``optim__iterations=10``)."""
        vals = dict(self.values)
        for k, v in changes.items():
            vals[k.replace("__", ".")] = v
        return TrainConfig(vals, self.out_dir)

    def to_text(self) -> str:
        lines = []
        for k in KEYS:
            v = self.values[k]
            if isinstance(v, list) and v and isinstance(v[0], list):
                v = "; ".join(" ".join(repr(x) for x in vec) for vec in v)
            elif isinstance(v, list):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, out_dir: str | None = None) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ContractError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = KEYS[key][1](val)
        except ValueError as exc:
            raise ContractError(f"line {lineno}: bad value for {key}: {exc}") from None
    return TrainConfig(values, out_dir)


def load_config(path, out_dir: str | None = None) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ContractError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), out_dir)
