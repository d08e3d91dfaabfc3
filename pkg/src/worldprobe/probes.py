"""Time-invariant linear probes, control baselines, invasive fine-tuning, OOD metrics.

Every predictor keeps read-only copies of whatever it reads, so evaluation
cannot write back into a backbone or a fitted probe.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import DatasetSplit, target_dim
from .optim import AdamW, cosine_lr
from .worldmodel import (
    ActivationRecord,
    ModelParams,
    TrainHyper,
    aligned_targets,
    extract_activations,
    latents_for,
    layer_of,
    make_windows,
    run_training,
    task_output,
    with_task_head,
)

METHODS = ("phyip", "raw_input", "time_dependent", "mlp", "last_layer_ft", "full_ft")
MAPE_FLOOR = 1e-8


class DegenerateDesignError(np.linalg.LinAlgError):
    pass


class UnderdeterminedStepError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def _frozen_params(params: ModelParams) -> ModelParams:
    return ModelParams(params.config, {k: _frozen(v) for k, v in params.tensors.items()})


# --------------------------------------------------------------------------
# closed-form ridge


@dataclass
class LinearProbe:
    W: np.ndarray  # (k, d)
    b: np.ndarray  # (k,)
    alpha: float
    block_name: str = ""
    target_name: str = ""

    def predict(self, H: np.ndarray) -> np.ndarray:
        return np.asarray(H) @ self.W.T + self.b

    def training_loss(self, H: np.ndarray, S: np.ndarray) -> float:
        """Regularised objective the closed form minimises: sum of squares + alpha * ||W||^2."""
        r = self.predict(H) - S
        return float((r * r).sum() + self.alpha * (self.W * self.W).sum())


def ridge_solve(H: np.ndarray, S: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """W (k x d) and b minimising ||S - H W^T - b||^2 + alpha ||W||^2; intercept unpenalised."""
    H = np.asarray(H, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    n, d = H.shape
    if n <= d:
        warnings.warn(f"probe fitted with N={n} <= d={d}; the design is underdetermined", stacklevel=2)
    h_mean = H.mean(axis=0)
    s_mean = S.mean(axis=0)
    Hc = H - h_mean
    Sc = S - s_mean
    gram = Hc.T @ Hc
    if alpha == 0:
        if np.linalg.matrix_rank(Hc) < d:
            raise DegenerateDesignError("centered design is rank deficient; use alpha > 0")
    else:
        gram = gram + alpha * np.eye(d)
    try:
        coef = np.linalg.solve(gram, Hc.T @ Sc)  # (d, k)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDesignError("singular normal equations; use alpha > 0") from exc
    W = coef.T
    b = s_mean - W @ h_mean
    return W, b


def fit_linear_probe(record: ActivationRecord, alpha: float = 1.0) -> LinearProbe:
    W, b = ridge_solve(record.H, record.S, alpha)
    return LinearProbe(W, b, alpha, record.block_name, record.target_name)


# --------------------------------------------------------------------------
# predictors: each maps a DatasetSplit to rows aligned with make_windows()


class Predictor:
    method = "predictor"
    window: int

    def predict(self, split: DatasetSplit) -> np.ndarray:
        raise NotImplementedError

    def _arrays(self):
        return []

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self._arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class PhyIPPredictor(Predictor):
    method = "phyip"

    def __init__(self, params: ModelParams, probe: LinearProbe):
        self.params = _frozen_params(params)
        self.probe = LinearProbe(_frozen(probe.W), _frozen(probe.b), probe.alpha, probe.block_name, probe.target_name)
        self.window = params.config.window

    def predict(self, split):
        w = make_windows(split, self.window)
        return self.probe.predict(latents_for(self.params, w.X, self.probe.block_name))

    def _arrays(self):
        return [self.probe.W, self.probe.b, *self.params.tensors.values()]


class RawInputPredictor(Predictor):
    method = "raw_input"

    def __init__(self, probe: LinearProbe, window: int):
        self.probe = LinearProbe(_frozen(probe.W), _frozen(probe.b), probe.alpha, "raw", probe.target_name)
        self.window = window

    def predict(self, split):
        return self.probe.predict(make_windows(split, self.window).X)

    def _arrays(self):
        return [self.probe.W, self.probe.b]


class TimeDependentPredictor(Predictor):
    method = "time_dependent"

    def __init__(self, params: ModelParams, block: str, probes: dict[int, LinearProbe]):
        self.params = _frozen_params(params)
        self.block = block
        self.probes = {t: LinearProbe(_frozen(p.W), _frozen(p.b), p.alpha, block, p.target_name)
                       for t, p in sorted(probes.items())}
        self.window = params.config.window

    def predict(self, split):
        w = make_windows(split, self.window)
        H = latents_for(self.params, w.X, self.block)
        k = next(iter(self.probes.values())).W.shape[0]
        out = np.empty((len(H), k))
        for t in np.unique(w.step):
            if int(t) not in self.probes:
                raise KeyError(f"no per-step probe fitted for step {int(t)}")
            rows = w.step == t
            out[rows] = self.probes[int(t)].predict(H[rows])
        return out

    def _arrays(self):
        arrs = list(self.params.tensors.values())
        for p in self.probes.values():
            arrs += [p.W, p.b]
        return arrs


def _mlp_forward(weights, X):
    z = X @ weights["W1"].T + weights["b1"]
    a = np.maximum(z, 0.0)
    return a @ weights["W2"].T + weights["b2"], (z, a)


class MLPPredictor(Predictor):
    method = "mlp"

    def __init__(self, params: ModelParams, block: str, weights: dict, stats: dict):
        self.params = _frozen_params(params)
        self.block = block
        self.weights = {k: _frozen(v) for k, v in weights.items()}
        self.stats = {k: _frozen(v) for k, v in stats.items()}
        self.window = params.config.window

    def predict_latents(self, H):
        Z = (H - self.stats["h_mean"]) / self.stats["h_std"]
        out, _ = _mlp_forward(self.weights, Z)
        return out * self.stats["s_std"] + self.stats["s_mean"]

    def predict(self, split):
        w = make_windows(split, self.window)
        return self.predict_latents(latents_for(self.params, w.X, self.block))

    def _arrays(self):
        return [*self.weights.values(), *self.stats.values(), *self.params.tensors.values()]


class FineTunedPredictor(Predictor):
    """Task head on an adapted backbone; ``reduce='norm'`` turns vector outputs into magnitudes."""

    def __init__(self, params: ModelParams, method: str = "full_ft", reduce: str | None = None):
        if not params.has_task_head:
            raise ValueError("fine-tuned predictor needs a task head")
        self.params = _frozen_params(params)
        self.method = method
        self.reduce = reduce
        self.window = params.config.window

    def predict(self, split):
        out = task_output(self.params, make_windows(split, self.window).X)
        if self.reduce == "norm":
            return np.linalg.norm(out, axis=1, keepdims=True)
        return out

    def _arrays(self):
        return list(self.params.tensors.values())


# --------------------------------------------------------------------------
# fitting


@dataclass
class BaselineHyper:
    target: str = "force_magnitude"
    block: str = "final"
    alpha: float = 1.0
    mlp_hidden: int = 254
    mlp_epochs: int = 200
    mlp_lr: float = 1e-3
    mlp_batch: int = 64
    mlp_weight_decay: float = 1e-4
    seed: int = 0


def fit_phyip(params: ModelParams, data: DatasetSplit, block: str, target: str, alpha: float = 1.0) -> PhyIPPredictor:
    _require_probe_data(data)
    record = extract_activations(params, data, block, target)
    return PhyIPPredictor(params, fit_linear_probe(record, alpha))


def _require_probe_data(data: DatasetSplit):
    if data.role not in ("probe_train", "ssl_train"):
        raise ValueError(f"probes are fitted on in-distribution data only, got role {data.role!r}")


def fit_time_dependent(record: ActivationRecord, alpha: float) -> dict[int, LinearProbe]:
    probes = {}
    for t in np.unique(record.step):
        rows = record.step == t
        if rows.sum() < 2:
            raise UnderdeterminedStepError(f"time step {int(t)} has fewer than 2 samples")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            W, b = ridge_solve(record.H[rows], record.S[rows], alpha)
        probes[int(t)] = LinearProbe(W, b, alpha, record.block_name, record.target_name)
    return probes


def train_mlp_probe(H: np.ndarray, S: np.ndarray, hyper: BaselineHyper):
    """ReLU network d -> hidden -> k on standardised latents, AdamW, cosine schedule."""
    S = S.reshape(len(S), -1)
    stats = {
        "h_mean": H.mean(axis=0),
        "h_std": H.std(axis=0) + 1e-12,
        "s_mean": S.mean(axis=0),
        "s_std": S.std(axis=0) + 1e-12,
    }
    X = (H - stats["h_mean"]) / stats["h_std"]
    Y = (S - stats["s_mean"]) / stats["s_std"]
    d, k = X.shape[1], Y.shape[1]
    rng = np.random.default_rng(hyper.seed)
    b1, b2 = 1 / math.sqrt(d), 1 / math.sqrt(hyper.mlp_hidden)
    weights = {
        "W1": rng.uniform(-b1, b1, (hyper.mlp_hidden, d)),
        "b1": rng.uniform(-b1, b1, hyper.mlp_hidden),
        "W2": rng.uniform(-b2, b2, (k, hyper.mlp_hidden)),
        "b2": rng.uniform(-b2, b2, k),
    }
    opt = AdamW(weights, lr=hyper.mlp_lr, weight_decay=hyper.mlp_weight_decay)
    n = len(X)
    per_epoch = math.ceil(n / hyper.mlp_batch)
    total = per_epoch * hyper.mlp_epochs
    step = 0
    losses = []
    for _ in range(hyper.mlp_epochs):
        order = rng.permutation(n)
        running = 0.0
        for s in range(per_epoch):
            idx = order[s * hyper.mlp_batch:(s + 1) * hyper.mlp_batch]
            xb, yb = X[idx], Y[idx]
            out, (z, a) = _mlp_forward(weights, xb)
            diff = out - yb
            running += float((diff * diff).sum())
            dout = 2.0 * diff / len(idx)
            grads = {"W2": dout.T @ a, "b2": dout.sum(axis=0)}
            dz = (dout @ weights["W2"]) * (z > 0)
            grads["W1"] = dz.T @ xb
            grads["b1"] = dz.sum(axis=0)
            opt.step(weights, grads, lr=cosine_lr(hyper.mlp_lr, step, total))
            step += 1
        losses.append(running / n)
    return weights, stats, losses


def fit_baseline_probe(kind: str, data: DatasetSplit, hyper: BaselineHyper | None = None,
                       params: ModelParams | None = None, window: int | None = None) -> Predictor:
    """Fit one of the control probes on in-distribution data.

    ``raw_input`` needs ``window`` (or ``params`` to read it from); the two
    latent-based kinds need ``params``.
    """
    hyper = hyper or BaselineHyper()
    _require_probe_data(data)
    if kind == "raw_input":
        window = window or (params.config.window if params is not None else None)
        if window is None:
            raise ValueError("raw_input probe needs a window length")
        w = make_windows(data, window)
        S = aligned_targets(data, w, hyper.target)
        W, b = ridge_solve(w.X, S, hyper.alpha)
        return RawInputPredictor(LinearProbe(W, b, hyper.alpha, "raw", hyper.target), window)
    if params is None:
        raise ValueError(f"{kind} probe reads frozen latents and needs params")
    record = extract_activations(params, data, hyper.block, hyper.target)
    if kind == "time_dependent":
        return TimeDependentPredictor(params, hyper.block, fit_time_dependent(record, hyper.alpha))
    if kind == "mlp":
        weights, stats, _ = train_mlp_probe(record.H, record.S, hyper)
        return MLPPredictor(params, hyper.block, weights, stats)
    raise ValueError(f"unknown baseline kind {kind!r}")


# --------------------------------------------------------------------------
# invasive adaptation


@dataclass
class FineTuneHyper:
    target: str = "force"
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 10
    seed: int = 0
    weight_decay: float = 1e-4
    schedule: str = "constant"


def finetune(params: ModelParams, task_data: DatasetSplit, mode: str, hyper: FineTuneHyper | None = None):
    """Attach a fresh task head and adapt on ``task_data``.

    ``full`` updates every tensor on the task path (encoder, blocks, task head);
    ``last_layer`` trains the task head only.
    The starting point is reproducible as ``with_task_head(params, k, hyper.seed)``.
    """
    hyper = hyper or FineTuneHyper()
    if task_data.role != "ft_task":
        raise ValueError(f"fine-tuning needs an ft_task split, got {task_data.role!r}")
    if mode not in ("full", "last_layer"):
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    k = target_dim(hyper.target, task_data.system_kind)
    start = with_task_head(params, k, hyper.seed)
    w = make_windows(task_data, params.config.window)
    Y = aligned_targets(task_data, w, hyper.target)
    if mode == "full":
        # the SSL decoder head is off the task path and keeps its weights
        trainable = [n for n in start.tensors if layer_of(n) != "head"]
    else:
        trainable = [n for n in start.tensors if layer_of(n) == "task_head"]
    train_hyper = TrainHyper(lr=hyper.lr, batch=hyper.batch, epochs=hyper.epochs, seed=hyper.seed,
                             weight_decay=hyper.weight_decay, schedule=hyper.schedule)
    adapted, log = run_training(start, w.X, Y, train_hyper, "task", trainable=trainable)
    log.hyper = {**asdict(hyper), "mode": mode}
    return adapted, log


def task_loss(predictor: Predictor, split: DatasetSplit, target: str) -> float:
    pred = predictor.predict(split)
    truth = aligned_targets(split, make_windows(split, predictor.window), target)
    diff = pred - truth
    return float((diff * diff).sum(axis=1).mean())


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ProbeReport:
    method: str
    target: str
    set_names: list[str]
    mape: list[float | None]
    rho: list[float]
    rho_components: list[list[float]] = field(default_factory=list)
    mape_undefined: list[bool] = field(default_factory=list)
    zero_variance: list[bool] = field(default_factory=list)

    def __post_init__(self):
        for m in self.mape:
            if m is not None and m < 0:
                raise ValueError("MAPE must be >= 0")
        for r in self.rho:
            if not -1.0 - 1e-12 <= r <= 1.0 + 1e-12:
                raise ValueError("Pearson rho outside [-1, 1]")

    @property
    def rho_mean(self) -> float:
        return float(np.mean(self.rho)) if self.rho else float("nan")

    @property
    def rho_std(self) -> float:
        return float(np.std(self.rho)) if self.rho else float("nan")

    @property
    def mape_mean(self) -> float:
        vals = [m for m in self.mape if m is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mape_std(self) -> float:
        vals = [m for m in self.mape if m is not None]
        return float(np.std(vals)) if vals else float("nan")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "target": self.target,
            "sets": [
                {"name": n, "mape": m, "rho": r, "rho_components": rc, "mape_undefined": mu, "zero_variance": zv}
                for n, m, r, rc, mu, zv in zip(self.set_names, self.mape, self.rho,
                                                self.rho_components or [[]] * len(self.rho),
                                                self.mape_undefined, self.zero_variance)
            ],
            "aggregate": {
                "rho_mean": self.rho_mean,
                "rho_std": self.rho_std,
                "mape_mean": _none_if_nan(self.mape_mean),
                "mape_std": _none_if_nan(self.mape_std),
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProbeReport":
        sets = obj["sets"]
        return cls(obj["method"], obj["target"], [s["name"] for s in sets], [s["mape"] for s in sets],
                   [s["rho"] for s in sets], [s["rho_components"] for s in sets],
                   [s["mape_undefined"] for s in sets], [s["zero_variance"] for s in sets])

    def csv_rows(self) -> list[dict]:
        return [{"method": self.method, "ood_set": n, "mape": "" if m is None else repr(m), "rho": repr(r)}
                for n, m, r in zip(self.set_names, self.mape, self.rho)]


def _none_if_nan(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; (0.0, True) when either side has zero variance."""
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    ac = a - a.mean()
    bc = b - b.mean()
    na = math.sqrt(float(ac @ ac))
    nb = math.sqrt(float(bc @ bc))
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.clip((ac @ bc) / (na * nb), -1.0, 1.0)), False


def mape(pred: np.ndarray, truth: np.ndarray, floor: float = MAPE_FLOOR) -> float | None:
    """Mean of ||pred - truth|| / ||truth|| in percent over rows with ||truth|| > floor."""
    pred = pred.reshape(len(pred), -1)
    truth = truth.reshape(len(truth), -1)
    norm = np.linalg.norm(truth, axis=1)
    keep = norm > floor
    if not keep.any():
        return None
    err = np.linalg.norm(pred - truth, axis=1)
    return float(np.mean(err[keep] / norm[keep]) * 100.0)


def set_metrics(pred: np.ndarray, truth: np.ndarray, floor: float = MAPE_FLOOR):
    pred = pred.reshape(len(pred), -1)
    truth = truth.reshape(len(truth), -1)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {truth.shape}")
    if truth.shape[1] == 1:
        rho, flat = pearson(pred, truth)
        comps = [rho]
    else:
        rho, flat = pearson(np.linalg.norm(pred, axis=1), np.linalg.norm(truth, axis=1))
        comps = [pearson(pred[:, j], truth[:, j])[0] for j in range(truth.shape[1])]
    return mape(pred, truth, floor), rho, comps, flat


def evaluate_predictor(predictor: Predictor, ood_suite: list[DatasetSplit], target: str,
                       names: list[str] | None = None, floor: float = MAPE_FLOOR) -> ProbeReport:
    """Zero-shot metrics per OOD set; the predictor's state is checksummed around the call."""
    if not ood_suite:
        raise ValueError("empty OOD suite")
    before = predictor.state_checksum()
    names = names or [f"ood_{i:02d}" for i in range(len(ood_suite))]
    report = ProbeReport(predictor.method, target, [], [], [], [], [], [])
    for name, split in zip(names, ood_suite):
        truth = aligned_targets(split, make_windows(split, predictor.window), target)
        m, rho, comps, flat = set_metrics(predictor.predict(split), truth, floor)
        report.set_names.append(name)
        report.mape.append(m)
        report.rho.append(rho)
        report.rho_components.append(comps)
        report.mape_undefined.append(m is None)
        report.zero_variance.append(flat)
    if predictor.state_checksum() != before:
        raise RuntimeError("predictor state changed during zero-shot evaluation")
    return report
