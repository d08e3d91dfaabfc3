import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from worldprobe.mechanics import (
    StructuralMismatchError,
    UndefinedSimilarityError,
    cka_by_block,
    cka_linear,
    erasure_shift,
    layer_probe_scan,
    max_abs_corr,
    param_drift,
    project_2d,
    select_changed_neurons,
)
from worldprobe.probes import FineTuneHyper, PhyIPPredictor, evaluate_predictor, finetune, fit_linear_probe
from worldprobe.worldmodel import (
    ModelConfig,
    aligned_targets,
    block_mlp_outputs,
    extract_activations,
    init_model,
    make_windows,
    with_task_head,
)

# ---------------------------------------------------------------- CKA


def test_cka_self_is_one():
    X = np.random.default_rng(0).normal(size=(50, 6))
    assert cka_linear(X, X) == pytest.approx(1.0, abs=1e-12)


def test_cka_hand_value():
    X = [[1, 0], [0, 1], [1, 1], [2, 0]]
    Y = [[1, 2], [0, 1], [3, 1], [1, 1]]
    # exact rational arithmetic gives sqrt(651)/217
    assert cka_linear(X, Y) == pytest.approx(math.sqrt(651) / 217, abs=1e-12)


def test_cka_wide_inputs_use_gram_form():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(5, 12)), rng.normal(size=(5, 9))
    Xc, Yc = X - X.mean(0), Y - Y.mean(0)
    ref = np.linalg.norm(Yc.T @ Xc) ** 2 / (np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc))
    assert cka_linear(X, Y) == pytest.approx(ref, abs=1e-12)


def test_cka_zero_variance():
    with pytest.raises(UndefinedSimilarityError):
        cka_linear(np.ones((6, 3)), np.random.default_rng(0).normal(size=(6, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3), shift=st.floats(-10, 10))
def test_cka_invariances(seed, scale, shift):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 5))
    Y = X @ rng.normal(size=(5, 4)) + 0.5 * rng.normal(size=(40, 4))
    Q = ortho_group.rvs(4, random_state=seed)
    base = cka_linear(X, Y)
    assert abs(cka_linear(X, scale * (Y @ Q) + shift) - base) < 1e-10
    assert 0.0 <= base <= 1.0


def test_cka_of_identical_models(toy_model, toy_splits):
    X = make_windows(toy_splits["probe"], 4).X[:200]
    rep = cka_by_block(toy_model, toy_model.copy(), X)
    assert rep.blocks == ["blocks.0", "blocks.1", "final"]
    assert all(v == pytest.approx(1.0, abs=1e-12) for v in rep.values)


# ---------------------------------------------------------------- drift


def test_drift_identical_and_doubled():
    p = init_model(ModelConfig(width=16, n_blocks=2, seed=1))
    assert all(d == 0.0 for d in param_drift(p, p.copy()).delta)
    q = p.copy()
    for k in q.tensors:
        q.tensors[k] = 2.0 * q.tensors[k]
    drift = param_drift(p, q, ["encoder", "blocks.0", "blocks.1"])
    assert drift.delta == [1.0, 1.0, 1.0]


def test_drift_known_perturbation():
    p = init_model(ModelConfig(width=16, n_blocks=2, seed=2))
    q = p.copy()
    E = np.random.default_rng(0).normal(size=q["blocks.1.fc1.W"].shape)
    ref = np.linalg.norm(np.concatenate([v.ravel() for v in p.layer_tensors("blocks.1").values()]))
    q.tensors["blocks.1.fc1.W"] = q["blocks.1.fc1.W"] + E * (0.3 * ref / np.linalg.norm(E))
    drift = param_drift(p, q, ["blocks.0", "blocks.1"])
    assert drift["blocks.0"] == 0.0
    assert abs(drift["blocks.1"] - 0.3) < 1e-10


def test_drift_zero_reference_is_flagged():
    p = init_model(ModelConfig(width=16, n_blocks=2))
    q = p.copy()
    q.tensors["head.W"] = q["head.W"] + 1.0
    drift = param_drift(p, q, ["head"])
    assert drift.zero_reference == ["head"]
    assert drift["head"] == pytest.approx(1.0)


def test_drift_structural_mismatch():
    a = init_model(ModelConfig(width=16, n_blocks=2))
    with pytest.raises(StructuralMismatchError):
        param_drift(a, init_model(ModelConfig(width=32, n_blocks=2)))
    with pytest.raises(StructuralMismatchError):
        param_drift(a, with_task_head(a, 2, 0))


def test_last_layer_adaptation_is_local(toy_model, toy_splits):
    adapted, _ = finetune(toy_model, toy_splits["ft"], "last_layer", FineTuneHyper(epochs=2))
    drift = param_drift(toy_model, adapted, toy_model.backbone_layers())
    assert drift.delta == [0.0] * len(drift.layers)


# ---------------------------------------------------------------- erasure


def test_neuron_selection():
    before = np.zeros((10, 4))
    after = before.copy()
    after[[2, 7, 4]] += np.array([[3.0], [2.0], [1.0]])
    idx, thr = select_changed_neurons(before, after, 0.3)
    assert idx.tolist() == [2, 4, 7]
    assert thr == pytest.approx(2.0)


def test_max_abs_corr_skips_flat_neurons():
    acts = np.c_[np.arange(6.0), np.ones(6), -np.arange(6.0) ** 2]
    concept = np.arange(6.0)
    best, skipped = max_abs_corr(acts, concept, [0, 1, 2])
    assert best == pytest.approx(1.0)
    assert skipped == [1]


def test_erasure_null_case(toy_model, toy_splits):
    rep = erasure_shift(toy_model, toy_model.copy(), toy_splits["ood"][0])
    assert all(v == 0.0 for b in rep.blocks for v in rep.delta_rho[b].values())


def test_erasure_three_neuron_oracle(toy_model, toy_splits):
    after = toy_model.copy()
    rows = [5, 9, 20]
    W = after.tensors["blocks.1.fc2.W"]
    W[rows] += np.random.default_rng(4).normal(size=(3, W.shape[1]))
    data = toy_splits["ood"][1]
    rep = erasure_shift(toy_model, after, data, concepts=["speed", "radius"], blocks=["blocks.1"],
                        fraction=3 / 32)
    assert rep.selected["blocks.1"] == rows

    w = make_windows(data, 4)
    for model, got in ((toy_model, rep.rho_before), (after, rep.rho_after)):
        acts = block_mlp_outputs(model, w.X)["blocks.1"]
        for c in ("speed", "radius"):
            s = aligned_targets(data, w, c)[:, 0]
            expect = max(abs(np.corrcoef(acts[:, j], s)[0, 1]) for j in rows)
            assert got["blocks.1"][c] == pytest.approx(expect, abs=1e-12)


def test_erasure_needs_data(toy_model, toy_splits):
    empty = type(toy_splits["ood"][0])("ood_test", [], {})
    with pytest.raises(ValueError):
        erasure_shift(toy_model, toy_model, empty)


# ---------------------------------------------------------------- layer scan


def test_scan_matches_direct_probe(toy_model, toy_splits):
    scan = layer_probe_scan(toy_model, toy_splits["probe"], toy_splits["ood"], "force_magnitude", with_mlp=False)
    assert [e.block for e in scan.entries] == ["blocks.0", "blocks.1", "final"]
    for e in scan.entries:
        rec = extract_activations(toy_model, toy_splits["probe"], e.block, "force_magnitude")
        direct = evaluate_predictor(PhyIPPredictor(toy_model, fit_linear_probe(rec, 1.0)), toy_splits["ood"],
                                    "force_magnitude")
        assert e.linear_rho == direct.rho_mean
        assert e.linear_mape == direct.mape_mean
    assert scan.best_block == max(scan.entries, key=lambda e: e.linear_rho).block


def test_scan_of_untrained_model_is_finite(toy_splits):
    p = init_model(ModelConfig(window=4, width=16, n_blocks=2, seed=9))
    scan = layer_probe_scan(p, toy_splits["probe"], toy_splits["ood"][:1], "speed")
    for e in scan.entries:
        assert np.isfinite(e.linear_rho) and np.isfinite(e.mlp_rho)


# ---------------------------------------------------------------- projection


def test_projection_preserves_planar_distances():
    pts = np.random.default_rng(0).normal(size=(30, 2)) * [3.0, 1.0]
    proj = project_2d(pts)
    d = lambda A: np.linalg.norm(A[:, None] - A[None], axis=-1)
    np.testing.assert_allclose(d(proj.coords), d(pts), atol=1e-10)
    assert sum(proj.explained) == pytest.approx(1.0)


def test_projection_reconstructs_embedded_plane():
    rng = np.random.default_rng(1)
    basis = np.linalg.qr(rng.normal(size=(3, 2)))[0].T
    pts = rng.normal(size=(40, 2)) @ basis + [1.0, -2.0, 0.5]
    proj = project_2d(pts)
    back = proj.coords @ proj.components + pts.mean(axis=0)
    np.testing.assert_allclose(back, pts, atol=1e-10)


def test_projection_explained_variance_ratios():
    H = np.random.default_rng(2).normal(size=(60, 5)) * [4, 3, 2, 1, 0.5]
    eig = np.sort(np.linalg.eigvalsh(np.cov(H.T)))[::-1]
    proj = project_2d(H)
    np.testing.assert_allclose(proj.explained, eig[:2] / eig.sum(), rtol=1e-10)


def test_projection_degenerate_line():
    H = np.outer(np.arange(10.0), [1.0, 2.0, 3.0])
    proj = project_2d(H)
    assert proj.degenerate
    assert proj.explained[1] == 0.0
    with pytest.raises(ValueError):
        project_2d(H[:2])
