"""Maximin training loops, run logs and abort handling."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat, no_grad
from .config import TrainConfig
from .diagnostics import run_diagnostics
from .errors import ContractError, NonFiniteError, NumericalAbort
from .experiments import (
    GridArgminMap,
    build_arch,
    candidate_grid,
    discrete_sources,
    effective_potentials,
    free_potential_parameters,
    gaussian_samples,
    mlot_config,
    scene_configs,
)
from .nets import ModelBundle, build_bundle, save_checkpoint
from .objective import (
    SourceBatch,
    base_cost,
    congruence_penalty,
    dual_functional,
    maximin_from_mapped,
    maximin_objective,
)
from .optim import Adam
from .oracle import discrete_barycenter_lp
from .restore import evaluate_decomposition, forward, restoration_loss
from .synth import make_multisource_scene

DIVERGENCE_LIMIT = 1e6
WEAK_DUALITY_TOL = 1e-6


def _finite(value) -> bool:
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return True
    if isinstance(value, (list, tuple)):
        return all(_finite(v) for v in value)
    if isinstance(value, dict):
        return all(_finite(v) for v in value.values())
    return math.isfinite(float(value))


@dataclass
class TrainLog:
    """Per-iteration records plus periodic snapshots.

    Wall-clock times live in ``timings`` rather than in the records, so
    two runs with the same config and seed give identical records.
    """

    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    timings: list = field(default_factory=list)

    def append(self, record: dict, wall: float = 0.0) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ContractError("log records must be strictly ordered by iteration")
        if not _finite(record):
            raise NonFiniteError(f"non-finite value in log record at iteration {record['iteration']}")
        self.records.append({"schema": 1, **record})
        self.timings.append((record["iteration"], wall))

    def snapshot(self, iteration: int, kind: str, payload: dict) -> None:
        self.snapshots.append({"schema": 1, "iteration": iteration, "kind": kind, **payload})

    def values(self, key: str) -> list:
        return [r[key] for r in self.records]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_log.jsonl", "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        with open(out / "snapshots.jsonl", "w") as fh:
            for r in self.snapshots:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        gaps = {s["iteration"]: s for s in self.snapshots if s["kind"] == "gap"}
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "F", "rho", "e1", "e2"])
            for r in self.records:
                g = gaps.get(r["iteration"], {})
                w.writerow([r["iteration"], repr(r["F"]), repr(r["rho"]), g.get("e1", ""), g.get("e2", "")])
        with open(out / "timings.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "wall_seconds"])
            w.writerows(self.timings)


class _Guard:
    """Keeps a copy of the last finite parameter state for abort handling."""

    def __init__(self, bundle: ModelBundle, out_dir):
        self.bundle = bundle
        self.params = [p for _, p in bundle.named_parameters()]
        self.out_dir = Path(out_dir) if out_dir else None
        self.good = [p.data.copy() for p in self.params]
        self.good_iter = 0
        self.largest = 0.0

    def watch(self, loss: Tensor) -> Tensor:
        """Pass a loss through, raising on NaN/inf before it reaches an optimizer."""
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError(f"non-finite loss value {loss.item()!r}")
        self.largest = max(self.largest, float(np.max(np.abs(loss.data))))
        return loss

    def commit(self, it: int, F: float) -> None:
        """Accept the iteration, or abort on a non-finite or divergent objective."""
        largest, self.largest = max(self.largest, abs(F)), 0.0
        if not math.isfinite(F):
            self.abort(it, f"non-finite objective {F!r}")
        if largest > DIVERGENCE_LIMIT:
            self.abort(it, f"divergence: |F| = {largest:.3e} exceeds {DIVERGENCE_LIMIT:.0e}")
        if not all(np.all(np.isfinite(p.data)) for p in self.params):
            self.abort(it, "non-finite parameters after update")
        for dst, p in zip(self.good, self.params):
            dst[...] = p.data
        self.good_iter = it

    def abort(self, it: int, reason: str):
        for p, g in zip(self.params, self.good):
            p.data[...] = g
        path = None
        if self.out_dir is not None:
            path = self.out_dir / "last_good.ckpt"
            save_checkpoint(self.bundle, path)
            dump = {"iteration": it, "last_good_iteration": self.good_iter, "reason": reason}
            (self.out_dir / "abort.json").write_text(json.dumps(dump, indent=2))
        exc = NumericalAbort(f"training aborted at iteration {it}: {reason}")
        exc.checkpoint = path
        exc.iteration = it
        raise exc


def _batch_rng(cfg: TrainConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7C4]))


def _metadata(cfg: TrainConfig, mcfg) -> dict:
    return {
        "kind": cfg.kind,
        "weights": list(mcfg.weights),
        "hard_congruence": bool(cfg["mlot.hard_congruence"]),
        "mode": cfg["restore.mode"] if cfg.kind == "restore_toy" else None,
        "fusion": cfg["restore.fusion"] if cfg.kind == "restore_toy" else None,
    }


def _maybe_checkpoint(cfg: TrainConfig, bundle, it: int) -> None:
    if cfg.out_dir and it % cfg["log.checkpoint_interval"] == 0:
        save_checkpoint(bundle, Path(cfg.out_dir) / "checkpoints" / f"iter_{it:06d}.ckpt")


def _apply_schedule(cfg: TrainConfig, it: int, optimizers) -> None:
    """Cosine decay of every optimizer's base step size (no-op for ``constant``)."""
    if cfg["optim.lr_schedule"] != "cosine":
        return
    scale = 0.5 * (1.0 + math.cos(math.pi * (it - 1) / cfg["optim.iterations"]))
    for opt in optimizers:
        opt.lr = opt.base_lr * scale


def _due(it: int, interval: int, last: int) -> bool:
    return it == last or (interval > 0 and it % interval == 0)


def _record_due(cfg: TrainConfig, it: int) -> bool:
    return it == 1 or _due(it, cfg["log.interval"], cfg["optim.iterations"])


def finish_run(cfg: TrainConfig, bundle: ModelBundle, log: TrainLog) -> None:
    """Write the final checkpoint, logs and resolved config under ``cfg.out_dir``."""
    if not cfg.out_dir:
        return
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, out / "model.ckpt")
    (out / "config.txt").write_text(cfg.to_text())
    log.write(out)


# -- vector barycenter experiments -------------------------------------------------


def train_barycenter(cfg: TrainConfig) -> tuple[ModelBundle, TrainLog]:
    """Alternate ``n_T`` descent steps on ``T`` with ``n_f`` ascent steps on ``F - rho``."""
    if cfg.kind == "discrete_verify":
        return train_discrete(cfg)
    if cfg.kind != "gaussian_barycenter":
        raise ContractError(f"train_barycenter cannot run experiment kind {cfg.kind!r}")
    mcfg = mlot_config(cfg)
    samples = gaussian_samples(cfg)
    bundle = build_bundle(build_arch(cfg), cfg.seed, _metadata(cfg, mcfg))
    pots = effective_potentials(bundle)
    T = bundle.barycenter_map
    opt_T = Adam(T.parameters(), lr=cfg["optim.lr_map"])
    opt_f = Adam(free_potential_parameters(bundle), lr=cfg["optim.lr_potential"], maximize=True)
    all_params = [p for _, p in bundle.named_parameters()]
    rng = _batch_rng(cfg)
    bs = cfg["optim.batch_size"]
    use_penalty = not bundle.metadata["hard_congruence"] and mcfg.congruence_coeff > 0
    guard = _Guard(bundle, cfg.out_dir)
    log = TrainLog()
    t0 = time.perf_counter()
    n_iter = cfg["optim.iterations"]

    def draw():
        return [SourceBatch(k, x[rng.integers(0, len(x), size=bs)]) for k, x in enumerate(samples)]

    def zero():
        for p in all_params:
            p.grad = None

    for it in range(1, n_iter + 1):
        _apply_schedule(cfg, it, (opt_T, opt_f))
        try:
            for _ in range(cfg["optim.n_T"]):
                zero()
                F = guard.watch(maximin_objective(pots, T, draw(), mcfg))
                F.backward()
                g_T = opt_T.step()
            for _ in range(cfg["optim.n_f"]):
                zero()
                batches = draw()
                Zs = [Tensor(b.latents) for b in batches]
                with no_grad():
                    ZBs = [Tensor(T(Z, b.source_id).data) for Z, b in zip(Zs, batches)]
                F = maximin_from_mapped(pots, Zs, ZBs, [b.source_id for b in batches], mcfg)
                rho = congruence_penalty(pots, concat(ZBs, axis=0), mcfg.weights) * mcfg.congruence_coeff \
                    if use_penalty else Tensor(0.0)
                guard.watch(F - rho).backward()
                g_f = opt_f.step()
        except NonFiniteError as exc:
            guard.abort(it, f"NaN/inf in loss: {exc}")
        guard.commit(it, F.item())
        if _record_due(cfg, it):
            costs = [float(base_cost(Z, ZB, mcfg.base_cost).data.mean()) for Z, ZB in zip(Zs, ZBs)]
            log.append(
                {"iteration": it, "F": F.item(), "rho": rho.item(), "cost_means": costs,
                 "grad_norm_map": g_T, "grad_norm_potential": g_f},
                time.perf_counter() - t0,
            )
        if _due(it, cfg["log.diagnostic_interval"], n_iter) and _diagnosable(cfg):
            log.snapshot(it, "gap", run_diagnostics(bundle, cfg).to_dict())
        _maybe_checkpoint(cfg, bundle, it)
    finish_run(cfg, bundle, log)
    return bundle, log


def _diagnosable(cfg: TrainConfig) -> bool:
    return cfg.gamma == 0 and cfg["mlot.base_cost"] == "squared_euclidean" and len(cfg["data.means"][0]) <= 2


def train_discrete(cfg: TrainConfig) -> tuple[ModelBundle, TrainLog]:
    """Supergradient ascent of the grid dual functional over tabular potentials.

    Every logged record carries the dual value, the LP optimum ``L*`` and
    the weak-duality flag ``dual <= L* + 1e-6``.
    """
    mcfg = mlot_config(cfg)
    if mcfg.gamma > 0:
        raise ContractError("discrete_verify supports gamma = 0 only")
    mus = discrete_sources(cfg)
    grid = candidate_grid(cfg)
    l_star = discrete_barycenter_lp(mus, mcfg.weights, grid, cost=mcfg.base_cost).objective
    bundle = build_bundle(build_arch(cfg), cfg.seed, _metadata(cfg, mcfg))
    bundle.metadata["l_star"] = l_star
    pots = effective_potentials(bundle)
    params = free_potential_parameters(bundle)
    opt_f = Adam(params, lr=cfg["optim.lr_potential"], maximize=True)
    batches = [SourceBatch(k, mu.points) for k, mu in enumerate(mus)]
    use_penalty = not bundle.metadata["hard_congruence"] and mcfg.congruence_coeff > 0
    guard = _Guard(bundle, cfg.out_dir)
    log = TrainLog()
    t0 = time.perf_counter()
    n_iter = cfg["optim.iterations"]
    grid_t = Tensor(grid)
    for it in range(1, n_iter + 1):
        _apply_schedule(cfg, it, (opt_f,))
        try:
            for _ in range(cfg["optim.n_f"]):
                for p in params:
                    p.grad = None
                L = dual_functional(pots, batches, grid, mcfg)
                rho = congruence_penalty(pots, grid_t, mcfg.weights) * mcfg.congruence_coeff \
                    if use_penalty else Tensor(0.0)
                guard.watch(L - rho).backward()
                g_f = opt_f.step()
        except NonFiniteError as exc:
            guard.abort(it, f"NaN/inf in loss: {exc}")
        with no_grad():
            dual = dual_functional(pots, batches, grid, mcfg).item()
        guard.commit(it, dual)
        if _record_due(cfg, it):
            T = GridArgminMap(pots, grid, mcfg)
            costs = [float(base_cost(b.latents, T(b.latents, b.source_id).data, mcfg.base_cost).data.mean())
                     for b in batches]
            log.append(
                {"iteration": it, "F": dual, "rho": rho.item(), "dual": dual, "l_star": l_star,
                 "weak_duality_ok": dual <= l_star + WEAK_DUALITY_TOL, "cost_means": costs,
                 "grad_norm_potential": g_f},
                time.perf_counter() - t0,
            )
        if _due(it, cfg["log.diagnostic_interval"], n_iter):
            log.snapshot(it, "gap", run_diagnostics(bundle, cfg).to_dict())
        _maybe_checkpoint(cfg, bundle, it)
    finish_run(cfg, bundle, log)
    return bundle, log


# -- restoration ------------------------------------------------------------------------


def train_restore(cfg: TrainConfig, data=None) -> tuple[ModelBundle, TrainLog]:
    """Joint training: ``L1 + mu * F`` for encoder/decoder/T, ascent of ``F - rho`` for potentials.

    ``data`` optionally supplies ``(train_dataset, eval_dataset)``.
    """
    if cfg.kind != "restore_toy":
        raise ContractError(f"train_restore needs experiment kind restore_toy, got {cfg.kind!r}")
    mcfg = mlot_config(cfg)
    if data is None:
        train_cfg, eval_cfg = scene_configs(cfg)
        data = (make_multisource_scene(train_cfg), make_multisource_scene(eval_cfg))
    train_ds, eval_ds = data
    if train_ds.K < 2:
        raise ContractError("restoration training needs at least two sources")
    arrays = [train_ds.arrays(k) for k in range(train_ds.K)]
    bundle = build_bundle(build_arch(cfg), cfg.seed, _metadata(cfg, mcfg))
    pots = effective_potentials(bundle)
    T = bundle.barycenter_map
    mu = cfg["restore.mu"]
    opt_r = Adam(bundle.restoration_parameters(), lr=cfg["optim.lr_restore"])
    opt_T = Adam(T.parameters(), lr=cfg["optim.lr_map"])
    opt_f = Adam(free_potential_parameters(bundle), lr=cfg["optim.lr_potential"], maximize=True)
    all_params = [p for _, p in bundle.named_parameters()]
    rng = _batch_rng(cfg)
    bs = cfg["optim.batch_size"]
    K = train_ds.K
    sources = list(range(K))
    use_penalty = not bundle.metadata["hard_congruence"] and mcfg.congruence_coeff > 0
    guard = _Guard(bundle, cfg.out_dir)
    log = TrainLog()
    t0 = time.perf_counter()
    n_iter = cfg["optim.iterations"]
    ev_int = cfg["log.eval_interval"]
    log.snapshot(0, "metrics", evaluate_decomposition(bundle, eval_ds).to_dict())

    def zero():
        for p in all_params:
            p.grad = None

    def split(t: Tensor) -> list[Tensor]:
        return [t[k * bs : (k + 1) * bs] for k in range(K)]

    for it in range(1, n_iter + 1):
        _apply_schedule(cfg, it, (opt_r, opt_T, opt_f))
        idx = [rng.integers(0, len(a[0]), size=bs) for a in arrays]
        X = np.concatenate([a[1][i] for a, i in zip(arrays, idx)])
        Y = np.concatenate([a[0][i] for a, i in zip(arrays, idx)])
        try:
            zero()
            out = forward(bundle, X)
            l1 = restoration_loss(out["pred"], Y)
            if cfg["restore.encoder_objective_grad"]:
                F = maximin_from_mapped(pots, split(out["z"]), split(out["z_b"]), sources, mcfg)
            else:
                Zd = Tensor(out["z"].data)
                F = maximin_from_mapped(pots, split(Zd), split(T(Zd)), sources, mcfg)
            guard.watch(l1 + F * mu).backward()
            g_r = opt_r.step()
            g_T = opt_T.step()
            Z = Tensor(out["z"].data)
            for _ in range(cfg["optim.n_T"] - 1):
                zero()
                F = maximin_from_mapped(pots, split(Z), split(T(Z)), sources, mcfg)
                guard.watch(F * mu).backward()
                g_T = opt_T.step()
            for _ in range(cfg["optim.n_f"]):
                zero()
                with no_grad():
                    ZB = Tensor(T(Z).data)
                F = maximin_from_mapped(pots, split(Z), split(ZB), sources, mcfg)
                rho = congruence_penalty(pots, ZB, mcfg.weights) * mcfg.congruence_coeff \
                    if use_penalty else Tensor(0.0)
                guard.watch(F - rho).backward()
                g_f = opt_f.step()
        except NonFiniteError as exc:
            guard.abort(it, f"NaN/inf in loss: {exc}")
        guard.commit(it, F.item())
        if _record_due(cfg, it):
            costs = [float(c.data.mean()) for c in
                     (base_cost(a, b, mcfg.base_cost) for a, b in zip(split(Z), split(ZB)))]
            log.append(
                {"iteration": it, "F": F.item(), "rho": rho.item(), "l1": l1.item(), "cost_means": costs,
                 "grad_norm_restore": g_r, "grad_norm_map": g_T, "grad_norm_potential": g_f},
                time.perf_counter() - t0,
            )
        if _due(it, ev_int, n_iter):
            log.snapshot(it, "metrics", evaluate_decomposition(bundle, eval_ds).to_dict())
        _maybe_checkpoint(cfg, bundle, it)
    finish_run(cfg, bundle, log)
    return bundle, log


def train(cfg: TrainConfig, data=None) -> tuple[ModelBundle, TrainLog]:
    if cfg.kind == "restore_toy":
        return train_restore(cfg, data)
    return train_barycenter(cfg)
