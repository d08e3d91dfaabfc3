"""Residual next-state predictor trained by self-supervision.

Architecture: a linear encoder maps the flattened observation window to the
residual stream, ``n_blocks`` pre-norm residual MLP blocks update it, and a
bias-free linear head ``g`` turns the final stream into a displacement::

    h_0     = E * window + e
    h_{l+1} = h_l + W2_l tanh(W1_l LN_l(h_l) + b1_l) + b2_l
    x_{t+1} = x_t + G h_L

The latent called ``blocks.l`` is the *input* to block ``l``; ``final`` is
``h_L``, the input to the head.  Gradients are hand-written for this fixed
graph and checked against finite differences in the test suite.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DatasetSplit
from .optim import AdamW, cosine_lr

LN_EPS = 1e-5
CKPT_MAGIC = b"WPCK"
CKPT_VERSION = 1


class ShapeError(ValueError):
    pass


class BlockNotFoundError(IndexError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_good: "ModelParams", epoch: int):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    window: int = 8
    width: int = 128
    n_blocks: int = 6
    obs_dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.width < 8:
            raise ValueError("width must be >= 8")
        if self.n_blocks < 2:
            raise ValueError("n_blocks must be >= 2")
        if self.obs_dim < 1:
            raise ValueError("obs_dim must be >= 1")

    @property
    def in_dim(self) -> int:
        return self.window * self.obs_dim


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer_names(self) -> list[str]:
        """Layer names in depth order (``encoder``, ``blocks.i``..., ``head``, ``task_head``)."""
        seen: list[str] = []
        for name in self.tensors:
            layer = layer_of(name)
            if layer not in seen:
                seen.append(layer)
        return seen

    def layer_tensors(self, layer: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if layer_of(k) == layer}

    def backbone_layers(self) -> list[str]:
        return [n for n in self.layer_names() if n != "task_head"]

    def checksum(self, layers=None) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            if layers is not None and layer_of(name) not in layers:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return int(sum(v.size for k, v in self.tensors.items() if layer_of(k) != "task_head"))

    @property
    def has_task_head(self) -> bool:
        return "task_head.W" in self.tensors


def layer_of(tensor_name: str) -> str:
    parts = tensor_name.split(".")
    if parts[0] == "blocks":
        return ".".join(parts[:2])
    return parts[0]


def latent_names(config: ModelConfig) -> list[str]:
    return [f"blocks.{i}" for i in range(config.n_blocks)] + ["final"]


def init_model(config: ModelConfig) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; unit norm gains; zero head."""
    rng = np.random.default_rng(config.seed)
    w = config.width

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    t: dict[str, np.ndarray] = {
        "encoder.W": uniform((w, config.in_dim), config.in_dim),
        "encoder.b": uniform(w, config.in_dim),
    }
    for i in range(config.n_blocks):
        t[f"blocks.{i}.ln.g"] = np.ones(w)
        t[f"blocks.{i}.ln.b"] = np.zeros(w)
        t[f"blocks.{i}.fc1.W"] = uniform((w, w), w)
        t[f"blocks.{i}.fc1.b"] = uniform(w, w)
        t[f"blocks.{i}.fc2.W"] = uniform((w, w), w)
        t[f"blocks.{i}.fc2.b"] = uniform(w, w)
    t["head.W"] = np.zeros((config.obs_dim, w))
    return ModelParams(config, t)


def with_task_head(params: ModelParams, k: int, seed: int) -> ModelParams:
    """Copy of ``params`` with a freshly initialised linear task head (latent -> k)."""
    out = params.copy()
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(params.config.width)
    out.tensors["task_head.W"] = rng.uniform(-bound, bound, size=(k, params.config.width))
    out.tensors["task_head.b"] = np.zeros(k)
    return out


# --------------------------------------------------------------------------
# forward / backward


def _layer_norm(h, g, b):
    mu = h.mean(axis=1, keepdims=True)
    xc = h - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    n = xhat.shape[1]
    dx = rstd / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                     - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    return dx, dg, db


def _as_batch(params: ModelParams, windows) -> np.ndarray:
    cfg = params.config
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 2 and x.shape == (cfg.window, cfg.obs_dim):
        x = x[None]
    if x.ndim == 3:
        if x.shape[1:] != (cfg.window, cfg.obs_dim):
            raise ShapeError(f"expected windows of shape (*, {cfg.window}, {cfg.obs_dim}), got {x.shape}")
        x = x.reshape(len(x), cfg.in_dim)
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise ShapeError(f"expected flattened windows with {cfg.in_dim} columns, got {x.shape}")
    return x


def _blas(A, W):
    return A @ W.T


def _rowwise(A, W):
    # fixed per-row reduction order: a sample's output never depends on its batch
    return np.einsum("nd,kd->nk", A, W, optimize=False)


def _forward(params: ModelParams, X: np.ndarray, keep_cache: bool = False, mm=_blas):
    t = params.tensors
    cfg = params.config
    h = mm(X, t["encoder.W"]) + t["encoder.b"]
    latents = {}
    caches = []
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        latents[f"blocks.{i}"] = h
        u, ln_cache = _layer_norm(h, t[p + "ln.g"], t[p + "ln.b"])
        a = np.tanh(mm(u, t[p + "fc1.W"]) + t[p + "fc1.b"])
        m = mm(a, t[p + "fc2.W"]) + t[p + "fc2.b"]
        if keep_cache:
            caches.append((u, ln_cache, a, m))
        h = h + m
    latents["final"] = h
    return latents, caches


def forward(params: ModelParams, window):
    """Per-block latents and the residual next-state prediction.

    ``window`` is one (window, obs_dim) array or a batch (B, window, obs_dim).
    Latent arrays always carry a leading batch axis.
    """
    X = _as_batch(params, window)
    latents, _ = _forward(params, X, mm=_rowwise)
    last = X[:, -params.config.obs_dim:]
    pred = last + _rowwise(latents["final"], params.tensors["head.W"])
    return latents, pred


def block_mlp_outputs(params: ModelParams, windows) -> dict[str, np.ndarray]:
    """Output of each block's projection layer (the per-neuron activations fc2 emits)."""
    X = _as_batch(params, windows)
    _, caches = _forward(params, X, keep_cache=True, mm=_rowwise)
    return {f"blocks.{i}": c[3] for i, c in enumerate(caches)}


def task_output(params: ModelParams, windows) -> np.ndarray:
    X = _as_batch(params, windows)
    latents, _ = _forward(params, X, mm=_rowwise)
    return _rowwise(latents["final"], params.tensors["task_head.W"]) + params.tensors["task_head.b"]


def loss_and_grads(params: ModelParams, X: np.ndarray, Y: np.ndarray, objective: str = "ssl",
                   need_backbone: bool = True):
    """Mean squared error (summed over output dims) and its gradients.

    ``objective='ssl'``: Y is the next observation, prediction is x_t + G h_L.
    ``objective='task'``: Y is the task target, prediction is task_head(h_L).
    """
    t = params.tensors
    cfg = params.config
    n = X.shape[0]
    latents, caches = _forward(params, X, keep_cache=need_backbone)
    hL = latents["final"]
    grads: dict[str, np.ndarray] = {}
    if objective == "ssl":
        pred = X[:, -cfg.obs_dim:] + hL @ t["head.W"].T
        diff = pred - Y
        loss = float((diff * diff).sum() / n)
        dpred = 2.0 * diff / n
        grads["head.W"] = dpred.T @ hL
        dh = dpred @ t["head.W"]
    elif objective == "task":
        pred = hL @ t["task_head.W"].T + t["task_head.b"]
        diff = pred - Y
        loss = float((diff * diff).sum() / n)
        dpred = 2.0 * diff / n
        grads["task_head.W"] = dpred.T @ hL
        grads["task_head.b"] = dpred.sum(axis=0)
        dh = dpred @ t["task_head.W"]
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if not need_backbone:
        return loss, grads
    for i in reversed(range(cfg.n_blocks)):
        p = f"blocks.{i}."
        u, ln_cache, a, _ = caches[i]
        grads[p + "fc2.W"] = dh.T @ a
        grads[p + "fc2.b"] = dh.sum(axis=0)
        da = dh @ t[p + "fc2.W"]
        dz = da * (1.0 - a * a)
        grads[p + "fc1.W"] = dz.T @ u
        grads[p + "fc1.b"] = dz.sum(axis=0)
        du = dz @ t[p + "fc1.W"]
        dx, dg, db = _layer_norm_backward(du, t[p + "ln.g"], ln_cache)
        grads[p + "ln.g"] = dg
        grads[p + "ln.b"] = db
        dh = dh + dx
    grads["encoder.W"] = dh.T @ X
    grads["encoder.b"] = dh.sum(axis=0)
    return loss, grads


# --------------------------------------------------------------------------
# windows


@dataclass
class WindowSet:
    X: np.ndarray  # (N, window * obs_dim)
    Y: np.ndarray  # (N, obs_dim) next observation
    traj: np.ndarray  # (N,) trajectory index within the split
    step: np.ndarray  # (N,) index t of the window's last observation


def make_windows(split: DatasetSplit, window: int) -> WindowSet:
    """All windows ending at t with a next observation t+1 available.

    Windows never straddle two trajectories.
    """
    xs, ys, tr, st = [], [], [], []
    for j, traj in enumerate(split.trajectories):
        obs = traj.observations
        n = len(obs)
        if n < window + 1:
            continue
        idx = np.arange(window - 1, n - 1)
        frames = np.lib.stride_tricks.sliding_window_view(obs, window, axis=0)[: len(idx)]
        xs.append(frames.transpose(0, 2, 1).reshape(len(idx), -1))
        ys.append(obs[idx + 1])
        tr.append(np.full(len(idx), j))
        st.append(idx)
    if not xs:
        dim = split.trajectories[0].observations.shape[1] if split.trajectories else 1
        return WindowSet(np.empty((0, window * dim)), np.empty((0, dim)), np.empty(0, int), np.empty(0, int))
    return WindowSet(np.concatenate(xs), np.concatenate(ys), np.concatenate(tr), np.concatenate(st))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 10
    seed: int = 0
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    checkpoint_epochs: tuple[int, ...] = ()


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    wall_time: float = 0.0
    checkpoints: dict[int, ModelParams] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {"losses": self.losses, "hyper": self.hyper, "wall_time": self.wall_time,
                "checkpoint_epochs": sorted(self.checkpoints)}


def run_training(params: ModelParams, X: np.ndarray, Y: np.ndarray, hyper: TrainHyper,
                 objective: str, trainable=None) -> tuple[ModelParams, TrainLog]:
    """Shared minibatch AdamW loop for SSL training and fine-tuning."""
    start = time.perf_counter()
    params = params.copy()
    log = TrainLog(hyper=asdict(hyper))
    if 0 in hyper.checkpoint_epochs:
        log.checkpoints[0] = params.copy()
    if hyper.epochs <= 0 or len(X) == 0:
        log.wall_time = time.perf_counter() - start
        return params, log
    opt = AdamW(params.tensors, lr=hyper.lr, weight_decay=hyper.weight_decay, trainable=trainable)
    frozen_backbone = trainable is not None and all(layer_of(k) == "task_head" for k in trainable)
    rng = np.random.default_rng(hyper.seed)
    n = len(X)
    steps_per_epoch = math.ceil(n / hyper.batch)
    total = steps_per_epoch * hyper.epochs
    step = 0
    last_good = params.copy()
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * hyper.batch:(s + 1) * hyper.batch]
            loss, grads = loss_and_grads(params, X[idx], Y[idx], objective, need_backbone=not frozen_backbone)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", last_good, epoch - 1)
            lr = cosine_lr(hyper.lr, step, total) if hyper.schedule == "cosine" else hyper.lr
            opt.step(params.tensors, grads, lr=lr)
            running += loss * len(idx)
            step += 1
        epoch_loss = running / n
        if not math.isfinite(epoch_loss) or not all(np.isfinite(v).all() for v in params.tensors.values()):
            raise DivergenceError(f"non-finite parameters at epoch {epoch}", last_good, epoch - 1)
        log.losses.append(epoch_loss)
        last_good = params.copy()
        if epoch in hyper.checkpoint_epochs:
            log.checkpoints[epoch] = last_good
    log.wall_time = time.perf_counter() - start
    return params, log


def train_ssl(params: ModelParams, data: DatasetSplit, hyper: TrainHyper | None = None):
    hyper = hyper or TrainHyper()
    if data.role != "ssl_train":
        raise ValueError(f"train_ssl needs an ssl_train split, got {data.role!r}")
    w = make_windows(data, params.config.window)
    return run_training(params, w.X, w.Y, hyper, "ssl",
                        trainable=[k for k in params.tensors if layer_of(k) != "task_head"])


def _batched_final(params: ModelParams, X: np.ndarray, chunk: int = 4096):
    for s in range(0, len(X), chunk):
        latents, _ = _forward(params, X[s:s + chunk], mm=_rowwise)
        yield s, latents


def evaluate_ssl(params: ModelParams, data: DatasetSplit, chunk: int = 4096) -> float:
    """Mean over all windows of the squared next-observation error."""
    w = make_windows(data, params.config.window)
    if len(w.X) == 0:
        raise ValueError("no windows to evaluate")
    total = 0.0
    d = params.config.obs_dim
    for s, latents in _batched_final(params, w.X, chunk):
        pred = w.X[s:s + chunk, -d:] + _rowwise(latents["final"], params.tensors["head.W"])
        diff = pred - w.Y[s:s + chunk]
        total += float((diff * diff).sum())
    return total / len(w.X)


# --------------------------------------------------------------------------
# activations


@dataclass
class ActivationRecord:
    block_name: str
    H: np.ndarray
    S: np.ndarray
    traj: np.ndarray
    step: np.ndarray
    target_name: str = ""
    mode: str = "next"

    def __post_init__(self):
        if len(self.H) != len(self.S):
            raise ValueError("H and S row counts differ")


def aligned_targets(data: DatasetSplit, windows: WindowSet, target: str, mode: str = "next") -> np.ndarray:
    """Target rows aligned with ``windows``: s(t+1) (``next``) or s(t+1) - s(t) (``delta``)."""
    if mode not in ("next", "delta", "current"):
        raise ValueError(f"unknown target mode {mode!r}")
    rows = []
    for j, traj in enumerate(data.trajectories):
        if target not in traj.targets:
            raise KeyError(f"target {target!r} not computed on trajectory {j}")
    if len(windows.traj) == 0:
        return np.empty((0, 1))
    series = [data.trajectories[j].targets[target] for j in range(len(data.trajectories))]
    for j, t in zip(windows.traj, windows.step):
        s = series[j]
        if mode == "next":
            rows.append(s[t + 1])
        elif mode == "delta":
            rows.append(s[t + 1] - s[t])
        else:
            rows.append(s[t])
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)


def latents_for(params: ModelParams, X: np.ndarray, block_name: str, chunk: int = 4096) -> np.ndarray:
    if block_name not in latent_names(params.config):
        raise BlockNotFoundError(f"no latent named {block_name!r}; have {latent_names(params.config)}")
    out = np.empty((len(X), params.config.width))
    for s, latents in _batched_final(params, X, chunk):
        out[s:s + chunk] = latents[block_name]
    return out


def extract_activations(params: ModelParams, data: DatasetSplit, block_name: str, target: str,
                        mode: str = "next") -> ActivationRecord:
    if block_name not in latent_names(params.config):
        raise BlockNotFoundError(f"no latent named {block_name!r}; have {latent_names(params.config)}")
    w = make_windows(data, params.config.window)
    S = aligned_targets(data, w, target, mode)
    H = latents_for(params, w.X, block_name)
    return ActivationRecord(block_name, H, S, w.traj, w.step, target, mode)


def decode(params: ModelParams, h: np.ndarray) -> np.ndarray:
    return np.asarray(h) @ params.tensors["head.W"].T


def decoder_jacobian(params: ModelParams, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of the head g at the null latent."""
    w = params.config.width
    J = np.empty((params.config.obs_dim, w))
    for i in range(w):
        e = np.zeros(w)
        e[i] = step
        J[:, i] = (decode(params, e) - decode(params, -e)) / (2 * step)
    return J


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config = ModelConfig(**json.loads(data[off:off + cfg_len]))
    off += cfg_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return ModelParams(config, tensors)
