"""Turn a :class:`TrainConfig` into data, weights, architectures and potentials."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor
from .config import TrainConfig
from .errors import ContractError
from .objective import MlotConfig
from .oracle import DiscreteDistribution, GaussianSpec, cost_matrix
from .restore import AggregationMode
from .synth import (
    SceneConfig,
    ood_suite,
    quantile_gaussian_sample,
    sample_gaussian_source,
    source_weights_from_counts,
    standard_suite,
)

EVAL_SEED_OFFSET = 100_000


def n_sources(cfg: TrainConfig) -> int:
    if cfg.kind == "gaussian_barycenter":
        return len(cfg["data.means"])
    if cfg.kind == "discrete_verify":
        return len(cfg["data.supports"])
    return 4


def source_weights(cfg: TrainConfig) -> np.ndarray:
    """Explicit ``mlot.weights`` if given, otherwise proportional to ``data.counts``."""
    K = n_sources(cfg)
    w = cfg["mlot.weights"]
    if w:
        if len(w) != K:
            raise ContractError(f"{len(w)} weights given for {K} sources")
        w = np.asarray(w, dtype=np.float64) / np.sum(w)
        w[-1] = 1.0 - w[:-1].sum()
        return w
    counts = cfg["data.counts"]
    if len(counts) != K:
        raise ContractError(f"{len(counts)} counts given for {K} sources")
    return source_weights_from_counts(counts)


def mlot_config(cfg: TrainConfig) -> MlotConfig:
    return MlotConfig(
        weights=tuple(source_weights(cfg)),
        base_cost=cfg["mlot.base_cost"],
        gamma=cfg["mlot.gamma"],
        tau=cfg["mlot.tau"],
        beta=cfg["mlot.beta"],
        congruence_coeff=cfg["mlot.congruence_coeff"],
    )


def data_dim(cfg: TrainConfig) -> int:
    if cfg.kind == "gaussian_barycenter":
        dims = {len(m) for m in cfg["data.means"]}
        if len(dims) != 1:
            raise ContractError("all Gaussian means must have the same dimension")
        return dims.pop()
    if cfg.kind == "discrete_verify":
        return 1
    return cfg["model.d"]


def gaussian_specs(cfg: TrainConfig) -> list[GaussianSpec]:
    means, variances = cfg["data.means"], cfg["data.variances"]
    if len(variances) != len(means):
        raise ContractError("one variance per Gaussian source required")
    d = data_dim(cfg)
    return [GaussianSpec(np.asarray(m, dtype=np.float64), v * np.eye(d)) for m, v in zip(means, variances)]


def gaussian_samples(cfg: TrainConfig, n: list[int] | None = None, scheme: str | None = None) -> list[np.ndarray]:
    """Per-source training samples (seeded by ``(seed, k)``)."""
    scheme = scheme or cfg["data.sampling"]
    counts = n or cfg["data.counts"]
    out = []
    for k, (spec, c) in enumerate(zip(gaussian_specs(cfg), counts)):
        if scheme == "quantile":
            out.append(quantile_gaussian_sample(spec, c))
        else:
            seed = int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0])
            out.append(sample_gaussian_source(spec, c, seed))
    return out


def discrete_sources(cfg: TrainConfig) -> list[DiscreteDistribution]:
    return [DiscreteDistribution(np.asarray(s, dtype=np.float64).reshape(-1, 1)) for s in cfg["data.supports"]]


def candidate_grid(cfg: TrainConfig) -> np.ndarray:
    return np.linspace(cfg["data.grid_min"], cfg["data.grid_max"], cfg["data.grid_n"]).reshape(-1, 1)


def scene_configs(cfg: TrainConfig) -> tuple[SceneConfig, SceneConfig]:
    """Training and evaluation scenes; evaluation uses a disjoint seed."""
    make = ood_suite if cfg["data.suite"] == "ood" else standard_suite
    size = cfg["data.image_size"]
    train = make(cfg["data.counts"], size, cfg.seed)
    train.pattern = cfg["data.pattern"]
    ev = make(cfg["data.eval_counts"], size, cfg.seed + EVAL_SEED_OFFSET)
    ev.pattern = cfg["data.pattern"]
    return train, ev


def build_arch(cfg: TrainConfig) -> dict:
    K = n_sources(cfg)
    arch = {
        "d": data_dim(cfg),
        "K": K,
        "map_hidden": list(cfg["model.map_hidden"]),
        "map_conditioned": bool(cfg["model.map_conditioned"]),
        "potential_hidden": list(cfg["model.potential_hidden"]),
    }
    if cfg.kind == "discrete_verify":
        arch["potential_grid"] = candidate_grid(cfg).reshape(-1).tolist()
        arch["map_hidden"] = [1]
    if cfg.kind == "restore_toy":
        mode = AggregationMode.parse(cfg["restore.mode"])
        arch.update(
            image_size=cfg["data.image_size"],
            encoder_channels=list(cfg["model.encoder_channels"]),
            decoder_hidden=list(cfg["model.decoder_hidden"]),
            decoder_kernel=cfg["model.decoder_kernel"],
            reduction=mode.needs_reduction and cfg["restore.fusion"] == "concat",
        )
    return arch


class CongruentPotential:
    """``f_K = -(1/lam_K) sum_{k<K} lam_k f_k``, so ``sum_k lam_k f_k == 0`` exactly."""

    def __init__(self, others, weights):
        self.others = list(others)
        self.weights = np.asarray(weights, dtype=np.float64)
        if len(self.others) != len(self.weights) - 1:
            raise ContractError("need K-1 free potentials for K weights")

    def parameters(self) -> list[Tensor]:
        return []

    def __call__(self, y) -> Tensor:
        acc = None
        for lam, f in zip(self.weights[:-1], self.others):
            term = f(y) * float(lam)
            acc = term if acc is None else acc + term
        return acc * (-1.0 / self.weights[-1])


def effective_potentials(bundle) -> list:
    """Potentials as used by the objective (hard congruence replaces the last one)."""
    pots = list(bundle.potentials)
    if bundle.metadata.get("hard_congruence") and len(pots) > 1:
        pots[-1] = CongruentPotential(pots[:-1], bundle.metadata["weights"])
    return pots


def free_potential_parameters(bundle) -> list[Tensor]:
    pots = bundle.potentials
    if bundle.metadata.get("hard_congruence") and len(pots) > 1:
        pots = pots[:-1]
    return [p for f in pots for p in f.parameters()]


class GridArgminMap:
    """``T(z, k) = argmin_y C(z, y) - f_k(y)`` over a finite grid (first minimizer on ties)."""

    def __init__(self, potentials, grid: np.ndarray, mcfg: MlotConfig):
        if mcfg.gamma > 0:
            raise ContractError("the grid argmin map supports the plain metric cost only")
        self.potentials = potentials
        self.grid = np.asarray(grid, dtype=np.float64)
        self.kind = mcfg.base_cost

    def __call__(self, z, k: int = 0) -> Tensor:
        z = as_tensor(z).data
        f = np.asarray(self.potentials[k](Tensor(self.grid)).data).reshape(1, -1)
        idx = np.argmin(cost_matrix(z, self.grid, self.kind) - f, axis=1)
        return Tensor(self.grid[idx])
