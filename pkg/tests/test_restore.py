import json
import math

import numpy as np
import pytest

from mlot.autodiff import Tensor, grad_check
from mlot.config import TrainConfig
from mlot.errors import ContractError, DimensionError
from mlot.experiments import build_arch
from mlot.nets import build_bundle, init_params
from mlot.restore import (
    AggregationMode,
    RestoreMetrics,
    aggregate,
    contrastive_margin,
    evaluate_decomposition,
    forward,
    orthogonality_score,
    psnr,
    pushforward_alignment,
    restoration_loss,
)
from mlot.synth import make_multisource_scene, standard_suite

TINY = {"experiment.kind": "restore_toy", "data.image_size": 8, "data.counts": [6, 6, 6, 6],
        "data.eval_counts": [4, 4, 4, 4], "model.d": 4, "model.encoder_channels": [4, 4],
        "model.decoder_hidden": [8], "model.map_hidden": [8], "model.potential_hidden": [8],
        "optim.batch_size": 3, "optim.iterations": 1, "log.interval": 1}


@pytest.fixture(scope="module")
def tiny_data():
    return make_multisource_scene(standard_suite([4, 4, 4, 4], 8, 1))


# -- aggregation ------------------------------------------------------------------------


def test_original_only_reconstructs_z(rng):
    z_b, s = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out = aggregate(z_b, s, "original_only").data
    assert np.max(np.abs(out - (z_b + s))) <= 1e-12


def test_barycenter_only_ignores_s(rng):
    z_b = rng.normal(size=(3, 4))
    a = aggregate(z_b, rng.normal(size=(3, 4)), "barycenter_only").data
    b = aggregate(z_b, rng.normal(size=(3, 4)), "barycenter_only").data
    assert np.array_equal(a, b)


def test_concat_width_and_reduction(rng):
    d = 16
    red = init_params(0, [2 * d, d], activation="none")
    assert red.input_dim == 32
    z_b, s = rng.normal(size=(2, d)), rng.normal(size=(2, d))
    out = aggregate(z_b, s, "barycenter_plus_specific", red).data
    W, b = red.layers[0][0].data, red.layers[0][1].data
    assert np.allclose(out, np.concatenate([z_b, s], axis=1) @ W + b, atol=1e-12)
    out2 = aggregate(z_b, s, "original_plus_specific", red).data
    assert np.allclose(out2, np.concatenate([z_b + s, s], axis=1) @ W + b, atol=1e-12)


def test_add_fusion(rng):
    z_b, s = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert np.allclose(aggregate(z_b, s, "barycenter_plus_specific", fusion="add").data, z_b + s)


def test_aggregate_errors(rng):
    z = rng.normal(size=(2, 3))
    with pytest.raises(ContractError):
        aggregate(z, z, "mixed")
    with pytest.raises(ContractError):
        aggregate(z, z, "barycenter_plus_specific")
    with pytest.raises(DimensionError):
        aggregate(z, z[:1], "original_only")


# -- loss and PSNR ----------------------------------------------------------------------


def test_restoration_loss_examples(rng):
    clean = rng.uniform(size=(2, 16))
    assert restoration_loss(clean, clean).item() == 0.0
    assert restoration_loss(clean + 0.5, clean).item() == pytest.approx(0.5)
    with pytest.raises(DimensionError):
        restoration_loss(clean, clean[:, :3])


def test_restoration_loss_gradient(rng):
    clean = rng.uniform(size=(2, 5))
    pred = clean + rng.choice([-0.3, 0.2], size=clean.shape)
    t = Tensor(pred, requires_grad=True)
    restoration_loss(t, clean).backward()
    assert np.allclose(t.grad, np.sign(pred - clean) / pred.size)
    assert grad_check(lambda x: restoration_loss(x, clean), pred) < 1e-4


def test_psnr_examples():
    assert psnr(np.zeros(4), np.ones(4)).db == pytest.approx(0.0)
    assert psnr(np.zeros(4), np.full(4, 0.1)).db == pytest.approx(20.0)
    p = psnr(np.ones(4), np.ones(4))
    assert p.db == 99.0 and p.exact
    with pytest.raises(DimensionError):
        psnr(np.zeros(3), np.zeros(4))


# -- decomposition scores ---------------------------------------------------------------


def test_margin_one_hot_sources():
    labels = np.repeat([0, 1, 2], 4)
    s = np.eye(3)[labels] * np.repeat([1.0, 2.0, 0.5], 4)[:, None]
    assert contrastive_margin(s, labels) == pytest.approx(1.0)


def test_orthogonality_constructed_zero():
    z_b = np.tile([1.0, 0.0, 0.0], (5, 1))
    s = np.random.default_rng(0).normal(size=(5, 3)) * [0.0, 1.0, 1.0]
    assert orthogonality_score(z_b, s) == 0.0
    assert orthogonality_score(np.ones((3, 2)), np.ones((3, 2))) == pytest.approx(1.0)


def test_margin_needs_two_sources():
    with pytest.raises(ContractError):
        contrastive_margin(np.ones((3, 2)), np.zeros(3))


def test_alignment_zero_for_identical_sources(rng):
    z = rng.normal(size=(10, 3))
    assert pushforward_alignment(np.concatenate([z, z]), np.repeat([0, 1], 10)) == 0.0


def test_metrics_invariants():
    with pytest.raises(ContractError):
        RestoreMetrics([20.0, 30.0], 26.0, 0.0, 0.0, 0.0)
    m = RestoreMetrics([20.0, 30.0], 25.0, 0.1, 0.5, 0.2, [10.0, 20.0], 15.0, "original_only")
    assert m.gain == 10.0
    assert json.loads(m.to_json())["mode"] == "original_only"


def test_mode_parse():
    assert AggregationMode.parse("barycenter_only") is AggregationMode.BARYCENTER_ONLY
    with pytest.raises(ContractError):
        AggregationMode.parse("nope")


# -- evaluation of untrained models -----------------------------------------------------


def _bundle(mode="barycenter_plus_specific", seed=0):
    cfg = TrainConfig({**TINY, "restore.mode": mode})
    return build_bundle(build_arch(cfg), seed, {"mode": mode, "fusion": "concat"})


def test_untrained_identity_map_alignment_equals_latent_alignment(tiny_data):
    from mlot.restore import encode_dataset

    b = _bundle()
    enc = encode_dataset(b, tiny_data)
    assert np.array_equal(enc["z"], enc["z_b"])
    m = evaluate_decomposition(b, tiny_data)
    assert m.pushforward_alignment == pushforward_alignment(enc["z"], enc["labels"])


def test_untrained_decoder_is_near_identity(tiny_data):
    m = evaluate_decomposition(_bundle(), tiny_data)
    assert m.psnr_per_source == pytest.approx(m.input_psnr_per_source, abs=1.0)
    assert m.orthogonality_score == 0.0  # s is identically zero at init
    assert -2 <= m.contrastive_margin <= 2


def test_evaluation_is_deterministic(tiny_data):
    a = evaluate_decomposition(_bundle(), tiny_data).to_dict()
    b = evaluate_decomposition(_bundle(), tiny_data).to_dict()
    assert a == b


def test_forward_outputs_are_consistent(tiny_data):
    b = _bundle()
    _, deg = tiny_data.arrays(0)
    out = forward(b, deg)
    assert np.max(np.abs(out["s"].data - (out["z"].data - out["z_b"].data))) <= 1e-12
    assert out["pred"].shape == deg.shape


def test_every_component_learns_in_one_step():
    from mlot.train import train_restore

    cfg = TrainConfig(TINY)
    ref = _bundle(seed=cfg.seed)
    trained, _ = train_restore(cfg)
    groups = {"map": [], "potential": [], "encoder": [], "decoder": [], "reduction": []}
    for (name, p), (_, q) in zip(ref.named_parameters(), trained.named_parameters()):
        key = next(g for g in groups if name.startswith(g))
        groups[key].append(not np.array_equal(p.data, q.data))
    assert all(any(v) for v in groups.values()), groups


def test_single_source_dataset_rejected():
    from mlot.synth import DegradationSpec, SceneConfig

    ds = make_multisource_scene(SceneConfig([DegradationSpec("haze_mix", (0.3,))], [3], 8))
    with pytest.raises(ContractError):
        evaluate_decomposition(_bundle(), ds)
