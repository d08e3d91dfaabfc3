"""How adaptation changes a model: CKA drift, weight drift, concept erasure, layer scans, 2D maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DatasetSplit
from .probes import (
    BaselineHyper,
    MLPPredictor,
    PhyIPPredictor,
    evaluate_predictor,
    fit_linear_probe,
    pearson,
    train_mlp_probe,
)
from .worldmodel import (
    ActivationRecord,
    ModelParams,
    aligned_targets,
    block_mlp_outputs,
    extract_activations,
    latent_names,
    latents_for,
    make_windows,
)

ERASURE_CONCEPTS = ("speed", "radius", "mass", "force_magnitude")


class UndefinedSimilarityError(ValueError):
    pass


class StructuralMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# CKA


def cka_linear(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centred inputs."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError("CKA needs two 2D arrays with equal row counts")
    if len(X) < 2:
        raise ValueError("CKA needs at least two rows")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    if len(X) < max(X.shape[1], Y.shape[1]):
        Kx, Ky = Xc @ Xc.T, Yc @ Yc.T
        num = float(np.sum(Kx * Ky))
        den = float(np.linalg.norm(Kx) * np.linalg.norm(Ky))
    else:
        num = float(np.linalg.norm(Yc.T @ Xc) ** 2)
        den = float(np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc))
    if den == 0.0:
        raise UndefinedSimilarityError("zero-variance input: CKA is undefined")
    return float(min(max(num / den, 0.0), 1.0))


@dataclass
class CKAReport:
    blocks: list[str]
    values: list[float]
    n_samples: int

    def to_json(self):
        return {"blocks": self.blocks, "cka": self.values, "n_samples": self.n_samples}


def cka_by_block(before: ModelParams, after: ModelParams, X: np.ndarray) -> CKAReport:
    """Paired-input CKA between two models at every latent."""
    names = latent_names(before.config)
    values = [cka_linear(latents_for(before, X, n), latents_for(after, X, n)) for n in names]
    return CKAReport(names, values, len(X))


# --------------------------------------------------------------------------
# weight drift


@dataclass
class DriftReport:
    layers: list[str]
    delta: list[float]
    per_tensor: dict[str, float] = field(default_factory=dict)
    zero_reference: list[str] = field(default_factory=list)

    def __getitem__(self, layer: str) -> float:
        return self.delta[self.layers.index(layer)]

    def to_json(self):
        return {"layers": self.layers, "delta": self.delta, "per_tensor": self.per_tensor,
                "zero_reference": self.zero_reference}


def _rel_change(old: np.ndarray, new: np.ndarray) -> tuple[float, bool]:
    diff = float(np.linalg.norm(new - old))
    ref = float(np.linalg.norm(old))
    if ref == 0.0:
        # zero-initialised reference: measure against the new weights instead
        return (0.0 if diff == 0.0 else diff / float(np.linalg.norm(new))), True
    return diff / ref, False


def param_drift(before: ModelParams, after: ModelParams, layers: list[str] | None = None) -> DriftReport:
    """Relative Frobenius change per layer (all tensors of the layer stacked)."""
    if layers is None:
        if list(before.tensors) != list(after.tensors):
            raise StructuralMismatchError("parameter sets name different tensors")
        layers = before.layer_names()
    for name, arr in before.tensors.items():
        if name in after.tensors and after.tensors[name].shape != arr.shape:
            raise StructuralMismatchError(f"tensor {name!r} changed shape")
    report = DriftReport([], [])
    for layer in layers:
        old = before.layer_tensors(layer)
        new = after.layer_tensors(layer)
        if not old or set(old) != set(new):
            raise StructuralMismatchError(f"layer {layer!r} differs between parameter sets")
        flat_old = np.concatenate([old[k].ravel() for k in old])
        flat_new = np.concatenate([new[k].ravel() for k in old])
        delta, zero_ref = _rel_change(flat_old, flat_new)
        report.layers.append(layer)
        report.delta.append(delta)
        if zero_ref:
            report.zero_reference.append(layer)
        for k in old:
            report.per_tensor[k] = _rel_change(old[k], new[k])[0]
    return report


# --------------------------------------------------------------------------
# concept erasure


@dataclass
class ErasureReport:
    concepts: list[str]
    blocks: list[str]
    delta_rho: dict[str, dict[str, float]]  # block -> concept -> shift
    rho_before: dict[str, dict[str, float]]
    rho_after: dict[str, dict[str, float]]
    selected: dict[str, list[int]]
    threshold: dict[str, float]
    skipped: dict[str, list[int]]
    fraction: float = 0.2

    def mean_shift(self) -> dict[str, float]:
        return {c: float(np.mean([self.delta_rho[b][c] for b in self.blocks])) for c in self.concepts}

    def to_json(self):
        return {"concepts": self.concepts, "blocks": self.blocks, "delta_rho": self.delta_rho,
                "rho_before": self.rho_before, "rho_after": self.rho_after, "selected": self.selected,
                "threshold": self.threshold, "skipped": self.skipped, "fraction": self.fraction,
                "mean_delta_rho": self.mean_shift()}


def select_changed_neurons(W_before: np.ndarray, W_after: np.ndarray, fraction: float = 0.2):
    """Rows (output neurons) of a projection matrix with the largest weight change."""
    change = np.linalg.norm(W_after - W_before, axis=1)
    count = math.ceil(fraction * len(change))
    order = np.argsort(-change, kind="stable")[:count]
    return np.sort(order), float(change[order[-1]]) if count else 0.0


def max_abs_corr(acts: np.ndarray, concept: np.ndarray, neurons) -> tuple[float, list[int]]:
    best, skipped = 0.0, []
    for j in neurons:
        r, flat = pearson(acts[:, j], concept)
        if flat:
            skipped.append(int(j))
            continue
        best = max(best, abs(r))
    return best, skipped


def erasure_shift(before: ModelParams, after: ModelParams, data: DatasetSplit,
                  concepts=ERASURE_CONCEPTS, blocks: list[str] | None = None,
                  fraction: float = 0.2) -> ErasureReport:
    """Shift in the best neuron-level |Pearson| with each concept, per block.

    Neurons are the output rows of each block's projection (``fc2``) matrix;
    the top ``fraction`` by weight change are analysed before and after.
    """
    if not data.trajectories:
        raise ValueError("erasure analysis needs data")
    concepts = list(concepts)
    w = make_windows(data, before.config.window)
    series = {c: aligned_targets(data, w, c).reshape(len(w.X), -1)[:, 0] for c in concepts}
    acts_before = block_mlp_outputs(before, w.X)
    acts_after = block_mlp_outputs(after, w.X)
    blocks = blocks or [f"blocks.{i}" for i in range(before.config.n_blocks)]
    rep = ErasureReport(concepts, list(blocks), {}, {}, {}, {}, {}, {}, fraction)
    for b in blocks:
        neurons, thr = select_changed_neurons(before[f"{b}.fc2.W"], after[f"{b}.fc2.W"], fraction)
        rep.selected[b] = [int(j) for j in neurons]
        rep.threshold[b] = thr
        rep.delta_rho[b], rep.rho_before[b], rep.rho_after[b] = {}, {}, {}
        skipped: set[int] = set()
        for c in concepts:
            rb, sb = max_abs_corr(acts_before[b], series[c], neurons)
            ra, sa = max_abs_corr(acts_after[b], series[c], neurons)
            skipped.update(sb, sa)
            rep.rho_before[b][c] = rb
            rep.rho_after[b][c] = ra
            rep.delta_rho[b][c] = ra - rb
        rep.skipped[b] = sorted(skipped)
    return rep


# --------------------------------------------------------------------------
# layer scan


@dataclass
class ScanEntry:
    block: str
    linear_rho: float
    linear_mape: float
    mlp_rho: float | None = None
    mlp_mape: float | None = None


@dataclass
class ScanReport:
    target: str
    entries: list[ScanEntry]

    @property
    def best_block(self) -> str:
        return max(self.entries, key=lambda e: e.linear_rho).block

    def entry(self, block: str) -> ScanEntry:
        return next(e for e in self.entries if e.block == block)

    def to_json(self):
        return {"target": self.target, "best_block": self.best_block,
                "entries": [e.__dict__ for e in self.entries]}


def layer_probe_scan(params: ModelParams, data: DatasetSplit, ood_suite: list[DatasetSplit], target: str,
                     hyper: BaselineHyper | None = None, alpha: float = 1.0, with_mlp: bool = True,
                     blocks: list[str] | None = None) -> ScanReport:
    """Fit linear and MLP probes at every latent on ID data; score them on the OOD suite."""
    hyper = hyper or BaselineHyper(target=target)
    entries = []
    for block in blocks or latent_names(params.config):
        record = extract_activations(params, data, block, target)
        linear = evaluate_predictor(PhyIPPredictor(params, fit_linear_probe(record, alpha)), ood_suite, target)
        entry = ScanEntry(block, linear.rho_mean, linear.mape_mean)
        if with_mlp:
            weights, stats, _ = train_mlp_probe(record.H, record.S, hyper)
            mlp = evaluate_predictor(MLPPredictor(params, block, weights, stats), ood_suite, target)
            entry.mlp_rho, entry.mlp_mape = mlp.rho_mean, mlp.mape_mean
        entries.append(entry)
    return ScanReport(target, entries)


# --------------------------------------------------------------------------
# 2D projection


@dataclass
class Projection:
    coords: np.ndarray  # (N, 2)
    explained: tuple[float, float]
    components: np.ndarray  # (2, d)
    degenerate: bool = False


def project_2d(record: ActivationRecord | np.ndarray) -> Projection:
    """Project centred activations onto their top two principal directions."""
    H = record.H if isinstance(record, ActivationRecord) else np.asarray(record, dtype=np.float64)
    if len(H) < 3:
        raise ValueError("projection needs at least 3 samples")
    Hc = H - H.mean(axis=0)
    _, s, vt = np.linalg.svd(Hc, full_matrices=False)
    var = s**2
    total = float(var.sum())
    tol = max(Hc.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    comps = np.zeros((2, H.shape[1]))
    k = min(2, vt.shape[0])
    comps[:k] = vt[:k]
    # deterministic orientation: largest-magnitude loading positive
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    degenerate = rank < 2
    if degenerate:
        comps[1] = 0.0
    coords = Hc @ comps.T
    if total == 0.0:
        explained = (0.0, 0.0)
    else:
        explained = (float(var[0] / total), 0.0 if degenerate else float(var[1] / total))
    return Projection(coords, explained, comps, degenerate)
