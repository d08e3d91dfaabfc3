"""Staged experiment pipeline with a content-addressed cache and report emission."""

from __future__ import annotations

import csv
import datetime as _dt
import io as _io
import json
import logging
import os
import platform
import shutil
import time
import traceback
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bound import validate_bound
from .config import ExperimentConfig, stable_hash
from .dynamics import DEFAULT_RANGES, TWO_BODY, DatasetSplit, SystemSpec, dataset_stats, sample_dataset
from .io import atomic_write_text, dumps_json, load_split, save_split, sha256_file
from .mechanics import cka_by_block, erasure_shift, layer_probe_scan, param_drift, project_2d
from .probes import (
    BaselineHyper,
    FineTunedPredictor,
    FineTuneHyper,
    evaluate_predictor,
    finetune,
    fit_baseline_probe,
    fit_linear_probe,
    fit_phyip,
    pearson,
    set_metrics,
)
from .symreg import SRConfig, eval_expr, evolve, law_features, parse_expr, select_best, zero_shot
from .worldmodel import (
    ModelConfig,
    TrainHyper,
    aligned_targets,
    evaluate_ssl,
    extract_activations,
    init_model,
    latent_names,
    latents_for,
    load_checkpoint,
    make_windows,
    save_checkpoint,
    train_ssl,
)

log = logging.getLogger("worldprobe")

CODE_VERSION = f"worldprobe-{__version__}"
PROBE_TARGETS = ("force", "force_magnitude", "speed", "radius", "mass", "momentum", "kinetic_energy")
STAGES = ("gen-data", "train", "finetune", "probe", "analyze", "symreg", "bound", "report", "run")
STAGE_EXPERIMENTS = {
    "gen-data": [],
    "train": [],
    "finetune": [],
    "probe": ["baselines", "scan"],
    "analyze": ["mechanics"],
    "symreg": ["symreg"],
    "bound": ["bound"],
}
SECTIONS = ("data", "ssl", "baselines", "layer_scan", "cka", "drift", "erasure", "projection", "symreg",
            "bound", "integrity")
VOLATILE = ("timing",)


class NotCachedError(RuntimeError):
    pass


class StageFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# cache


class Cache:
    """Directory per (stage, key); a ``_checksums.json`` written last seals an entry."""

    SEAL = "_checksums.json"

    def __init__(self, root):
        self.root = Path(root)

    def entry(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def _files(self, path: Path):
        return sorted(p for p in path.rglob("*") if p.is_file() and p.name != self.SEAL)

    def valid(self, stage: str, key: str) -> bool:
        path = self.entry(stage, key)
        seal = path / self.SEAL
        if not seal.is_file():
            return False
        try:
            recorded = json.loads(seal.read_text())
        except (OSError, json.JSONDecodeError):
            return False
        files = {str(p.relative_to(path)): p for p in self._files(path)}
        if set(files) != set(recorded):
            return False
        return all(sha256_file(files[name]) == digest for name, digest in recorded.items())

    def lookup(self, stage: str, key: str) -> Path | None:
        path = self.entry(stage, key)
        if not path.exists():
            return None
        if self.valid(stage, key):
            return path
        log.warning("cache entry %s/%s failed validation; discarding", stage, key[:12])
        shutil.rmtree(path, ignore_errors=True)
        return None

    def store(self, stage: str, key: str, writer) -> Path:
        final = self.entry(stage, key)
        tmp = final.parent / f".tmp-{key}-{os.getpid()}"
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir(parents=True)
        try:
            writer(tmp)
            sums = {str(p.relative_to(tmp)): sha256_file(p) for p in self._files(tmp)}
            (tmp / self.SEAL).write_text(json.dumps(sums, sort_keys=True, indent=1))
            if final.exists():
                shutil.rmtree(final)
            os.replace(tmp, final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return final


def _write_json(path: Path, obj) -> None:
    path.write_text(dumps_json(obj))


def _read_json(path: Path):
    return json.loads(path.read_text())


# --------------------------------------------------------------------------
# run context


class Run:
    def __init__(self, cfg: ExperimentConfig, out=None, cache_only: bool = False):
        self.cfg = cfg
        self.out = Path(out or cfg.out)
        self.cache = Cache(self.out / "cache")
        self.cache_only = cache_only
        self.timing: dict[str, float] = {}
        self.events: list[dict] = []
        self._memo: dict[str, object] = {}

    def seed_for(self, tag: str) -> int:
        return int(stable_hash([self.cfg.seed, tag])[:8], 16)

    def key(self, stage: str, *parts) -> str:
        return stable_hash([CODE_VERSION, stage, *parts])

    def cached(self, stage: str, key: str, writer) -> Path:
        hit = self.cache.lookup(stage, key)
        if hit is not None:
            self.events.append({"stage": stage, "key": key, "cache": "hit"})
            log.info("%s: cache hit (%s)", stage, key[:12])
            return hit
        if self.cache_only:
            raise NotCachedError(f"{stage} is not in the cache")
        log.info("%s: computing (%s)", stage, key[:12])
        start = time.perf_counter()
        path = self.cache.store(stage, key, writer)
        self.timing[stage] = self.timing.get(stage, 0.0) + time.perf_counter() - start
        self.events.append({"stage": stage, "key": key, "cache": "miss"})
        return path

    def cached_json(self, stage: str, key: str, compute) -> dict:
        path = self.cached(stage, key, lambda d: _write_json(d / "result.json", compute()))
        return _read_json(path / "result.json")

    def memo(self, name, fn):
        if name not in self._memo:
            self._memo[name] = fn()
        return self._memo[name]

    # ---- artifacts --------------------------------------------------------

    def base_spec(self, dt=None, steps=None, kind=TWO_BODY) -> SystemSpec:
        s = self.cfg.system
        h = s.dt / s.substeps
        dt = s.dt if dt is None else float(dt)
        return SystemSpec(system_kind=kind, dt=dt, steps=steps or s.steps,
                          substeps=max(1, int(round(dt / h))), r_min_guard=s.r_min_guard)

    def id_ranges(self) -> dict:
        return {k: tuple(v) for k, v in self.cfg.data.id_ranges.items()}

    @property
    def data_key(self) -> str:
        return self.key("data", self.cfg.section_hash("system", "data"), self.cfg.seed)

    def datasets(self) -> dict:
        return self.memo("datasets", self._datasets)

    def _datasets(self):
        d = self.cfg.data
        base = self.base_spec()
        ids = self.id_ranges()

        def write(root: Path):
            save_split(sample_dataset(ids, d.ssl_trajectories, "ssl_train", self.seed_for("ssl"), base=base),
                       root / "ssl")
            save_split(sample_dataset(ids, d.probe_trajectories, "probe_train", self.seed_for("probe"),
                                      base=base, reference=ids, targets=PROBE_TARGETS), root / "probe")
            ft_ranges = {**ids, "m2": (d.ft_m2, d.ft_m2)}
            save_split(sample_dataset(ft_ranges, d.ft_trajectories, "ft_task", self.seed_for("ft"),
                                      base=base, targets=PROBE_TARGETS), root / "ft")
            lo, hi = d.ood_range
            for i in range(d.ood_sets):
                a = lo + (hi - lo) * i / d.ood_sets
                b = lo + (hi - lo) * (i + 1) / d.ood_sets
                split = sample_dataset({**ids, d.ood_param: (a, b)}, d.ood_trajectories, "ood_test",
                                       self.seed_for(f"ood{i}"), base=base, reference=ids, targets=PROBE_TARGETS)
                save_split(split, root / f"ood_{i:02d}")

        root = self.cached("data", self.data_key, write)
        return {
            "ssl": load_split(root / "ssl"),
            "probe": load_split(root / "probe"),
            "ft": load_split(root / "ft"),
            "ood": [load_split(root / f"ood_{i:02d}") for i in range(d.ood_sets)],
            "ood_names": [f"ood_{i:02d}" for i in range(d.ood_sets)],
        }

    @property
    def ssl_key(self) -> str:
        return self.key("ssl", self.data_key, self.cfg.section_hash("model", "train"), self.cfg.seed)

    def ssl_model(self):
        return self.memo("ssl", self._ssl_model)

    def _ssl_model(self):
        m, t = self.cfg.model, self.cfg.train

        def write(root: Path):
            data = self.datasets()
            params = init_model(ModelConfig(m.window, m.width, m.n_blocks, 2, self.seed_for("init") % (2**31)))
            hyper = TrainHyper(lr=t.lr, batch=t.batch, epochs=t.epochs, seed=self.seed_for("train"),
                               weight_decay=t.weight_decay, schedule=t.schedule)
            trained, tlog = train_ssl(params, data["ssl"], hyper)
            save_checkpoint(trained, root / "model.wpck")
            _write_json(root / "log.json", {"losses": tlog.losses, "hyper": tlog.hyper})
            _write_json(root / "timing.json", {"wall_time": tlog.wall_time})

        root = self.cached("ssl", self.ssl_key, write)
        return load_checkpoint(root / "model.wpck"), _read_json(root / "log.json"), root / "model.wpck"

    @property
    def ft_key(self) -> str:
        return self.key("finetune", self.ssl_key, self.cfg.section_hash("finetune"), self.cfg.seed)

    def finetuned(self):
        return self.memo("ft", self._finetuned)

    def _finetuned(self):
        f = self.cfg.finetune

        def write(root: Path):
            params, _, _ = self.ssl_model()
            data = self.datasets()
            logs = {}
            for mode in ("last_layer", "full"):
                hyper = FineTuneHyper(target=f.target, lr=f.lr, batch=f.batch, epochs=f.epochs,
                                      seed=self.seed_for("ft-init") % (2**31), weight_decay=f.weight_decay,
                                      schedule=f.schedule)
                adapted, flog = finetune(params, data["ft"], mode, hyper)
                save_checkpoint(adapted, root / f"{mode}.wpck")
                logs[mode] = {"losses": flog.losses, "hyper": flog.hyper}
            _write_json(root / "log.json", logs)

        root = self.cached("finetune", self.ft_key, write)
        return ({mode: load_checkpoint(root / f"{mode}.wpck") for mode in ("last_layer", "full")},
                _read_json(root / "log.json"))

    # ---- probing helpers ---------------------------------------------------

    def probe_block(self) -> dict:
        return self.memo("block", self._probe_block)

    def _probe_block(self):
        p = self.cfg.probe
        key = self.key("block", self.ssl_key, self.cfg.section_hash("probe"))

        def compute():
            params, _, _ = self.ssl_model()
            split = self.datasets()["probe"]
            if p.block != "auto":
                return {"block": p.block, "mode": "fixed", "validation_rho": {}}
            n = len(split.trajectories)
            n_val = max(1, int(round(p.validation_fraction * n)))
            fit = DatasetSplit("probe_train", split.trajectories[: n - n_val], split.generator_ranges,
                               split.system_kind, split.seed)
            val = DatasetSplit("probe_train", split.trajectories[n - n_val:], split.generator_ranges,
                               split.system_kind, split.seed)
            scores = {}
            for block in latent_names(params.config):
                probe = fit_linear_probe(extract_activations(params, fit, block, p.target), p.alpha)
                rec = extract_activations(params, val, block, p.target)
                scores[block] = set_metrics(probe.predict(rec.H), rec.S)[1]
            best = max(scores, key=lambda b: scores[b])
            return {"block": best, "mode": "auto", "validation_rho": scores}

        return self.cached_json("block", key, compute)

    def baseline_hyper(self, block: str, epochs=None) -> BaselineHyper:
        p = self.cfg.probe
        return BaselineHyper(target=p.target, block=block, alpha=p.alpha, mlp_hidden=p.mlp_hidden,
                             mlp_epochs=p.mlp_epochs if epochs is None else epochs, mlp_lr=p.mlp_lr,
                             mlp_batch=p.mlp_batch, seed=self.seed_for("mlp") % (2**31))


# --------------------------------------------------------------------------
# experiments


def _data_section(run: Run) -> dict:
    data = run.datasets()
    pooled_ood = DatasetSplit("ood_test", [t for s in data["ood"] for t in s.trajectories],
                              {}, TWO_BODY)
    out = {}
    for name, split in (("ssl_train", data["ssl"]), ("probe_train", data["probe"]), ("ft_task", data["ft"]),
                        ("ood_test", pooled_ood)):
        st = dataset_stats(split, "m2", 20)
        entry = {"n_trajectories": len(split.trajectories),
                 "m2": {"mean": st.mean, "variance": st.variance, "counts": st.counts.tolist(),
                        "edges": st.edges.tolist()}}
        if name != "ssl_train":
            fm = dataset_stats(split, "force_magnitude", 20)
            entry["force_magnitude"] = {"mean": fm.mean, "variance": fm.variance, "counts": fm.counts.tolist(),
                                        "edges": fm.edges.tolist()}
        out[name] = entry
    out["ood_sets"] = len(data["ood"])
    return out


def _ssl_section(run: Run) -> dict:
    key = run.key("ssl-eval", run.ssl_key)

    def compute():
        params, tlog, _ = run.ssl_model()
        data = run.datasets()
        ood_eps = [evaluate_ssl(params, s) for s in data["ood"]]
        return {"losses": tlog["losses"], "hyper": tlog["hyper"], "n_parameters": params.n_parameters(),
                "eps_probe_train": evaluate_ssl(params, data["probe"]),
                "eps_ood_mean": float(np.mean(ood_eps)), "eps_ood": ood_eps}

    return run.cached_json("ssl-eval", key, compute)


def _baselines(run: Run) -> dict:
    block = run.probe_block()
    key = run.key("baselines", run.ssl_key, run.ft_key, run.cfg.section_hash("probe"), block["block"])

    def compute():
        params, _, _ = run.ssl_model()
        data = run.datasets()
        target = run.cfg.probe.target
        hyper = run.baseline_hyper(block["block"])
        suite, names = data["ood"], data["ood_names"]
        reports = {}
        reports["phyip"] = evaluate_predictor(fit_phyip(params, data["probe"], block["block"], target,
                                                        run.cfg.probe.alpha), suite, target, names)
        for kind in ("raw_input", "time_dependent", "mlp"):
            pred = fit_baseline_probe(kind, data["probe"], hyper, params=params)
            reports[kind] = evaluate_predictor(pred, suite, target, names)
        ft_models, _ = run.finetuned()
        ft_target = run.cfg.finetune.target
        reduce = "norm" if ft_target == "force" and target == "force_magnitude" else None
        for mode, method in (("last_layer", "last_layer_ft"), ("full", "full_ft")):
            pred = FineTunedPredictor(ft_models[mode], method, reduce)
            reports[method] = evaluate_predictor(pred, suite, target, names)
        return {"block": block, "target": target, "methods": {k: r.to_json() for k, r in reports.items()}}

    return run.cached_json("baselines", key, compute)


def _scan(run: Run) -> dict:
    p = run.cfg.probe
    key = run.key("scan", run.ssl_key, run.cfg.section_hash("probe"))

    def compute():
        params, _, _ = run.ssl_model()
        data = run.datasets()
        hyper = run.baseline_hyper("final", p.scan_mlp_epochs)
        rep = layer_probe_scan(params, data["probe"], data["ood"], p.target, hyper, p.alpha, p.scan_mlp)
        return rep.to_json()

    return run.cached_json("scan", key, compute)


def _pooled_ood(data) -> DatasetSplit:
    return DatasetSplit("ood_test", [t for s in data["ood"] for t in s.trajectories], {}, TWO_BODY)


def _even_rows(n: int, k: int) -> np.ndarray:
    if n <= k:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, k).round().astype(int))


def _mechanics(run: Run) -> dict:
    m = run.cfg.mechanics
    block = run.probe_block()
    key = run.key("mechanics", run.ssl_key, run.ft_key, run.cfg.section_hash("mechanics"), block["block"])

    def compute():
        params, _, _ = run.ssl_model()
        data = run.datasets()
        ft_models, _ = run.finetuned()
        full = ft_models["full"]
        w = make_windows(data["probe"], params.config.window)
        X = w.X[_even_rows(len(w.X), m.cka_samples)]
        cka = cka_by_block(params, full, X)
        layers = params.backbone_layers()
        drift = {"full_ft": param_drift(params, full, layers).to_json(),
                 "last_layer_ft": param_drift(params, ft_models["last_layer"], layers).to_json()}
        pooled = _pooled_ood(data)
        erasure = erasure_shift(params, full, pooled, m.concepts, fraction=m.erasure_fraction)
        wo = make_windows(pooled, params.config.window)
        rows = _even_rows(len(wo.X), m.projection_samples)
        force = aligned_targets(pooled, wo, "force_magnitude")[rows, 0]
        proj = {"block": block["block"], "rows": rows.tolist(), "force_magnitude": force.tolist()}
        for name, model in (("ssl", params), ("full_ft", full)):
            pr = project_2d(latents_for(model, wo.X[rows], block["block"]))
            proj[name] = {"explained": list(pr.explained), "degenerate": pr.degenerate,
                          "coords": pr.coords.tolist(),
                          "abs_rho_pc1_force": abs(pearson(pr.coords[:, 0], force)[0]),
                          "abs_rho_pc2_force": abs(pearson(pr.coords[:, 1], force)[0])}
        return {"cka": cka.to_json(), "drift": drift, "erasure": erasure.to_json(), "projection": proj}

    return run.cached_json("mechanics", key, compute)


def _symreg(run: Run) -> dict:
    s = run.cfg.symreg
    block = run.probe_block()
    parts = [run.ssl_key, run.cfg.section_hash("probe", "symreg"), block["block"], run.cfg.seed]
    if s.distill_finetuned:
        parts.append(run.ft_key)
    key = run.key("symreg", *parts)

    def compute():
        params, _, _ = run.ssl_model()
        data = run.datasets()
        window = params.config.window
        cfg = SRConfig(population=s.population, generations=s.generations, max_complexity=s.max_complexity,
                       tournament=s.tournament, seed=run.seed_for("sr") % (2**31), max_rows=s.max_rows)
        sources = {}
        phyip = fit_phyip(params, data["probe"], block["block"], run.cfg.probe.target, run.cfg.probe.alpha)
        sources["phyip"] = phyip.predict(data["probe"])
        if s.distill_finetuned:
            ft_models, _ = run.finetuned()
            sources["full_ft"] = FineTunedPredictor(ft_models["full"], "full_ft").predict(data["probe"])
        cols = law_features(data["probe"], window, s.features)
        pooled = _pooled_ood(data)
        ood_cols = law_features(pooled, window, s.features)
        truth = aligned_targets(pooled, make_windows(pooled, window), "force_magnitude")[:, 0]
        out, residuals = {}, {}
        for name, pred in sources.items():
            y = np.linalg.norm(pred.reshape(len(pred), -1), axis=1)
            front = evolve(cols, y, cfg)
            best = select_best(front)
            law = zero_shot(best, data["ood"], "force_magnitude", window, s.features)
            ev = eval_expr(best, ood_cols)
            residuals[name] = (ev.values - truth) / truth
            out[name] = {"front": front.to_json(), "selected": best.infix(), "law": law.to_json()}
        allres = np.concatenate(list(residuals.values()))
        lo, hi = np.percentile(allres, [0.5, 99.5])
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, s.histogram_bins + 1)
        out["residual_histogram"] = {"edges": edges.tolist(),
                                     "counts": {k: np.histogram(np.clip(v, lo, hi), edges)[0].tolist()
                                                for k, v in residuals.items()},
                                     "quantity": "relative residual (law - truth) / truth on pooled OOD"}
        out["features"] = list(s.features)
        return out

    return run.cached_json("symreg", key, compute)


def _bound(run: Run) -> dict:
    b = run.cfg.bound
    bkey = run.key("bound-models", run.cfg.section_hash("system", "bound"), run.cfg.seed)

    def ranges():
        if b.system_kind == TWO_BODY:
            return run.id_ranges()
        return dict(DEFAULT_RANGES[b.system_kind])

    def spec(dt):
        return run.base_spec(dt, b.steps, b.system_kind)

    def write(root: Path):
        for dt in b.dt_values:
            ssl = sample_dataset(ranges(), b.ssl_trajectories, "ssl_train", run.seed_for(f"bound-ssl-{dt}"),
                                 base=spec(dt))
            obs = 2 if b.system_kind == TWO_BODY else 1
            params = init_model(ModelConfig(b.window, b.width, b.n_blocks, obs, run.seed_for("bound-init") % (2**31)))
            hyper = TrainHyper(lr=b.lr, batch=b.batch, epochs=b.epochs, seed=run.seed_for("bound-train"),
                               checkpoint_epochs=tuple(b.checkpoint_epochs))
            _, tlog = train_ssl(params, ssl, hyper)
            for e in sorted(tlog.checkpoints):
                save_checkpoint(tlog.checkpoints[e], root / f"dt{dt!r}_epoch{e:03d}.wpck")

    root = run.cached("bound-models", bkey, write)
    key = run.key("bound", bkey)

    def compute():
        ckpts = {}
        for dt in b.dt_values:
            ckpts[float(dt)] = [load_checkpoint(root / f"dt{dt!r}_epoch{e:03d}.wpck")
                                for e in sorted(b.checkpoint_epochs)]

        def factory(dt):
            fit = sample_dataset(ranges(), b.probe_trajectories, "probe_train", run.seed_for(f"bound-fit-{dt}"),
                                 base=spec(dt), reference=ranges(), targets=b.targets)
            ev = sample_dataset(ranges(), b.eval_trajectories, "probe_train", run.seed_for(f"bound-eval-{dt}"),
                                base=spec(dt), reference=ranges(), targets=b.targets)
            return fit, ev

        rep = validate_bound(ckpts, b.targets, b.dt_values, factory, b.block, b.alpha)
        out = rep.to_json()
        out["system_kind"] = b.system_kind
        out["checkpoint_epochs"] = sorted(b.checkpoint_epochs)
        return out

    return run.cached_json("bound", key, compute)


# --------------------------------------------------------------------------
# orchestration


def _versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "code": CODE_VERSION}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


@contextmanager
def _thread_limit(cfg: ExperimentConfig):
    env = os.environ.get("WORLDPROBE_THREADS")
    limit = int(env) if env else (1 if cfg.deterministic else None)
    if limit is None:
        yield None
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=limit):
        yield limit


def skipped(reason: str) -> dict:
    return {"skipped": True, "reason": reason}


def run_pipeline(cfg: ExperimentConfig, out=None, stage: str = "run", cache_only: bool = False) -> tuple[dict, int]:
    """Execute the requested stage (and its dependencies); returns (report, exit code)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "report":
        cache_only = True
    run = Run(cfg, out, cache_only)
    experiments = list(cfg.experiments) if stage in ("run", "report") else STAGE_EXPERIMENTS[stage]
    report: dict = {name: skipped("not requested") for name in SECTIONS}
    report["provenance"] = {"config_hash": cfg.config_hash, "seed": cfg.seed, "deterministic": cfg.deterministic,
                            "versions": _versions(), "stage": stage, "experiments": experiments,
                            "timestamps": {"started": _now()}}
    report["config"] = cfg.to_dict()
    status: dict[str, str] = {}
    failed = False

    def attempt(name, fn):
        nonlocal failed
        start = time.perf_counter()
        try:
            result = fn()
            status[name] = "ok"
            return result
        except NotCachedError as exc:
            status[name] = "skipped"
            return skipped(str(exc))
        except Exception as exc:  # recorded in the report; the run continues with other stages
            failed = True
            status[name] = f"failed: {type(exc).__name__}: {exc}"
            log.error("stage %s failed:\n%s", name, traceback.format_exc())
            return {"failed": True, "error": f"{type(exc).__name__}: {exc}"}
        finally:
            run.timing[f"section:{name}"] = time.perf_counter() - start

    with _thread_limit(cfg) as threads:
        report["provenance"]["threads"] = threads
        needs_model = bool(experiments) or stage in ("train", "finetune")
        if experiments or stage in ("gen-data", "train", "finetune"):
            report["data"] = attempt("data", lambda: _data_section(run))
        if needs_model and any(e != "bound" for e in experiments) or stage in ("train", "finetune"):
            report["ssl"] = attempt("ssl", lambda: _ssl_section(run))
        if stage == "finetune" or any(e in ("baselines", "mechanics") for e in experiments):
            attempt("finetune", lambda: run.finetuned() and None)

        integrity_before = None
        if any(e in ("baselines", "scan", "symreg", "mechanics") for e in experiments) and status.get("ssl") == "ok":
            params, _, path = run.ssl_model()
            integrity_before = (params.checksum(), sha256_file(path))

        if "baselines" in experiments:
            report["baselines"] = attempt("baselines", lambda: _baselines(run))
        if "scan" in experiments:
            report["layer_scan"] = attempt("scan", lambda: _scan(run))
        if "mechanics" in experiments:
            mech = attempt("mechanics", lambda: _mechanics(run))
            if "cka" in mech:
                for name in ("cka", "drift", "erasure", "projection"):
                    report[name] = mech[name]
            else:
                for name in ("cka", "drift", "erasure", "projection"):
                    report[name] = mech
        if "symreg" in experiments:
            report["symreg"] = attempt("symreg", lambda: _symreg(run))
        if integrity_before is not None:
            params, _, path = run.ssl_model()
            after = (params.checksum(), sha256_file(path))
            report["integrity"] = {"backbone_checksum_before": integrity_before[0],
                                   "backbone_checksum_after": after[0],
                                   "checkpoint_sha256_before": integrity_before[1],
                                   "checkpoint_sha256_after": after[1],
                                   "unchanged": integrity_before == after}
            if integrity_before != after:
                failed = True
                status["integrity"] = "failed: backbone changed during probing"
        if "bound" in experiments:
            report["bound"] = attempt("bound", lambda: _bound(run))

    report["status"] = status
    report["provenance"]["timestamps"]["finished"] = _now()
    report["timing"] = {k: round(v, 6) for k, v in sorted(run.timing.items())}
    report["cache_events"] = run.events
    return report, (1 if failed else 0)


# --------------------------------------------------------------------------
# report emission


def strip_volatile(report: dict) -> dict:
    """Copy of ``report`` without timestamps, timings and cache bookkeeping."""
    out = json.loads(dumps_json(report))
    out.pop("timing", None)
    out.pop("cache_events", None)
    out.get("provenance", {}).pop("timestamps", None)
    out.get("config", {}).pop("out", None)
    return out


def _csv_text(header, rows) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def report_csvs(report: dict) -> dict[str, str]:
    files: dict[str, str] = {}
    base = report.get("baselines", {})
    if "methods" in base:
        rows = []
        for method, rep in base["methods"].items():
            for s in rep["sets"]:
                rows.append([method, s["name"], s["rho"], s["mape"]])
        files["baselines.csv"] = _csv_text(["method", "ood_set", "rho", "mape"], rows)
    scan = report.get("layer_scan", {})
    if "entries" in scan:
        files["layer_scan.csv"] = _csv_text(
            ["block", "linear_rho", "linear_mape", "mlp_rho", "mlp_mape"],
            [[e["block"], e["linear_rho"], e["linear_mape"], e["mlp_rho"], e["mlp_mape"]] for e in scan["entries"]])
    cka = report.get("cka", {})
    if "cka" in cka:
        files["cka.csv"] = _csv_text(["block", "cka"], list(zip(cka["blocks"], cka["cka"])))
    drift = report.get("drift", {})
    if "full_ft" in drift:
        layers = drift["full_ft"]["layers"]
        files["drift.csv"] = _csv_text(["method"] + layers,
                                       [[m] + drift[m]["delta"] for m in ("full_ft", "last_layer_ft")])
    er = report.get("erasure", {})
    if "delta_rho" in er:
        files["erasure.csv"] = _csv_text(["block"] + er["concepts"],
                                         [[b] + [er["delta_rho"][b][c] for c in er["concepts"]] for b in er["blocks"]])
    proj = report.get("projection", {})
    if "ssl" in proj:
        rows = []
        for model in ("ssl", "full_ft"):
            for (x, y), f in zip(proj[model]["coords"], proj["force_magnitude"]):
                rows.append([model, x, y, f])
        files["projection.csv"] = _csv_text(["model", "pc1", "pc2", "force_magnitude"], rows)
    bound = report.get("bound", {})
    if "points" in bound:
        cols = ["target", "dt", "checkpoint", "eps", "K_phi", "var_x", "probe_error", "modeling", "curvature",
                "discretization", "satisfied"]
        files["bound_sweep.csv"] = _csv_text(cols, [[p[c] for c in cols] for p in bound["points"]])
    sr = report.get("symreg", {})
    if "residual_histogram" in sr:
        hist = sr["residual_histogram"]
        names = sorted(hist["counts"])
        edges = hist["edges"]
        rows = [[edges[i], edges[i + 1]] + [hist["counts"][n][i] for n in names] for i in range(len(edges) - 1)]
        files["residual_histogram.csv"] = _csv_text(["bin_lo", "bin_hi"] + names, rows)
        front_rows = []
        for n in names:
            for e in sr[n]["front"]["entries"]:
                front_rows.append([n, e["complexity"], e["mse"], e["score"], e["expr"]])
        files["symreg_front.csv"] = _csv_text(["source", "complexity", "mse", "score", "expr"], front_rows)
    return files


def emit_report(report: dict, out, formats=("json", "csv")) -> list[Path]:
    """Write the master JSON and per-figure CSVs; every file is replaced atomically."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    payload: dict[str, str] = {}
    if "json" in formats:
        payload["report.json"] = dumps_json(report)
        payload["report.stable.json"] = dumps_json(strip_volatile(report))
    if "csv" in formats:
        payload.update(report_csvs(report))
    sr = report.get("symreg", {})
    if "phyip" in sr:
        payload["law.txt"] = sr["phyip"]["selected"] + "\n"
    written = []
    for name, text in sorted(payload.items()):
        atomic_write_text(out / name, text)
        written.append(out / name)
    return written


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def parse_law(text: str):
    return parse_expr(text.strip())
