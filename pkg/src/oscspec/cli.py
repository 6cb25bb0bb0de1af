"""Command-line pipeline: staged runs, plot-data export, validation.

Verbs:
  run             execute the staged pipeline for a JSON config or preset
  emit-plot-data  write plot-ready CSV arrays from a finished run
  validate        compare a run against a reference run (e.g. grid-based)
  list-presets    show the bundled configurations

Each stage writes its artifacts plus a manifest carrying a hash of every
setting that influences it (including upstream stage hashes) and a
checksum of every file it wrote; rerunning skips stages whose manifests
still match, so interrupted runs resume.  All randomness derives from
the config seed through counter-based streams: identical config and
seed reproduce every artifact bit for bit.  Wall-clock timings land in
run_log.json so summary.json stays deterministic.  The OSCSPEC_WORKERS
environment variable sets the worker count for density batches; it
changes speed, never results.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import collocation as colloc
from . import fdref
from .density import (DensityMatrix, ReferenceBox, StationaryEstimate,
                      estimate_backward, estimate_forward,
                      estimate_stationary)
from .models import build_model
from .pinn import (MlpParams, TrainConfig, default_hidden, evaluate_complex,
                   init_mlp, save_history_csv, train)
from .simulate import ConfigError, SimConfig
from .spectral import (aggregate_eigenvalue, align_global_phase,
                       fit_eigenvalue, load_eigenestimate_csv,
                       parabolic_spectrum, relative_l2_error,
                       solve_eigenfunction_lsq)

STAGE_ORDER = ["collocation", "stationary", "density", "eigenvalue",
               "eigenfunction", "pinn", "fd"]


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for exit reporting."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# config handling

def _preset_root():
    return resources.files("oscspec").joinpath("presets")


def list_preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in _preset_root().iterdir()
                  if p.name.endswith(".json"))


def _deep_merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(source: str, seed: int | None = None,
                paper_scale: bool = False) -> dict:
    """Read a config from a file path or bundled preset name and apply
    the optional seed override and full-scale overrides."""
    path = Path(source)
    if path.exists():
        cfg = json.loads(path.read_text())
    else:
        try:
            cfg = json.loads(
                _preset_root().joinpath(source + ".json").read_text())
        except FileNotFoundError:
            raise ConfigError(
                f"config {source!r} is neither a file nor a preset; "
                f"presets: {', '.join(list_preset_names())}") from None
    if paper_scale:
        block = cfg.pop("paper_scale", None)
        if block is None:
            raise ConfigError("config has no paper_scale block")
        cfg = _deep_merge(cfg, block)
    else:
        cfg.pop("paper_scale", None)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for key in ("name", "seed", "model", "domain", "stages", "sim"):
        if key not in cfg:
            raise ConfigError(f"config is missing required key {key!r}")
    unknown = [s for s in cfg["stages"] if s not in STAGE_ORDER]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; known: {STAGE_ORDER}")
    model = build_model(cfg["model"]["name"], cfg["model"].get("params"))
    dom = cfg["domain"]
    if len(dom["lows"]) != model.dim:
        raise ConfigError("domain dimension does not match the model")
    grid = colloc.BoxGrid(tuple(dom["lows"]), tuple(dom["highs"]),
                          int(dom["n_per_dim"]))
    n_x = cfg.get("collocation", {}).get("n_x")
    if n_x is not None and not 1 <= int(n_x) <= grid.n_boxes:
        raise ConfigError(
            f"collocation.n_x = {n_x} must lie in [1, {grid.n_boxes}] "
            "(the number of distinct grid boxes)")
    density = cfg.get("density", {})
    if density:
        kind = density.get("kind")
        if kind not in ("forward", "backward"):
            raise ConfigError("density.kind must be 'forward' or 'backward'")
        if kind == "backward":
            if density.get("reference_box") is None:
                raise ConfigError("backward runs need density.reference_box")
        ref = density.get("reference_box")
        if ref is not None:
            ReferenceBox(tuple(ref["lows"]),
                         tuple(ref["highs"])).require_inside(grid)
        if kind == "forward" and density.get("x0") is None:
            raise ConfigError("forward runs need density.x0")
    want = set(cfg["stages"])
    deps = {"density": {"collocation"},
            "eigenvalue": {"density", "stationary"},
            "eigenfunction": {"density", "eigenvalue", "stationary"},
            "pinn": {"collocation", "eigenvalue", "eigenfunction"}}
    for stage in want:
        missing = deps.get(stage, set()) - want
        if missing:
            raise ConfigError(f"stage {stage!r} also needs {sorted(missing)}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sim_for(cfg: dict, stage: str) -> SimConfig:
    s = cfg["sim"]
    if stage == "density":
        return SimConfig(dt=s["dt"], t_burn=0.0, t_gap=s["t_gap"],
                         n_t=int(s["n_t"]), seed=int(cfg["seed"]))
    return SimConfig(dt=s["dt"], t_burn=s.get("t_burn", 0.0),
                     t_gap=s["t_gap"], n_t=1, seed=int(cfg["seed"]))


def _stage_hash(cfg: dict, stage: str, parents: dict[str, str]) -> str:
    s = cfg["sim"]
    sim_slice = {
        "collocation": {"dt": s["dt"], "t_burn": s.get("t_burn", 0.0),
                        "t_gap": s["t_gap"]},
        "stationary": {"dt": s["dt"], "t_burn": s.get("t_burn", 0.0),
                       "t_gap": s["t_gap"]},
        "density": {"dt": s["dt"], "t_gap": s["t_gap"], "n_t": s["n_t"]},
    }.get(stage, {})
    extra_cfg = {}
    if stage in ("eigenvalue", "eigenfunction"):
        extra_cfg["density"] = cfg.get("density", {})
    payload = {
        "stage": stage,
        "model": cfg["model"],
        "domain": cfg["domain"],
        "seed": cfg["seed"],
        "sim": sim_slice,
        "cfg": cfg.get(stage, {}),
        "extra": extra_cfg,
        "parents": [parents[p] for p in sorted(parents)],
    }
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# staged runner

class RunContext:
    """Lazy artifact access for stages, whether computed or reloaded."""

    def __init__(self, cfg: dict, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.model = build_model(cfg["model"]["name"],
                                 cfg["model"].get("params"))
        dom = cfg["domain"]
        self.grid = colloc.BoxGrid(tuple(dom["lows"]), tuple(dom["highs"]),
                                   int(dom["n_per_dim"]))
        self.hashes: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._cache: dict[str, object] = {}

    # ---- artifact accessors (load from disk when not computed here)

    def training(self) -> tuple[np.ndarray, np.ndarray]:
        if "training" not in self._cache:
            self._cache["training"] = colloc.load_training_csv(
                self.out / "collocation" / "training.csv")
        return self._cache["training"]

    def reference_points(self) -> np.ndarray:
        if "reference" not in self._cache:
            self._cache["reference"] = colloc.load_points_csv(
                self.out / "collocation" / "reference.csv")
        return self._cache["reference"]

    def stationary(self) -> StationaryEstimate:
        if "stationary" not in self._cache:
            data = np.genfromtxt(self.out / "stationary" / "p0.csv",
                                 delimiter=",", names=True)
            meta = json.loads(
                (self.out / "stationary" / "manifest.json").read_text())
            self._cache["stationary"] = StationaryEstimate(
                box_ids=np.atleast_1d(data["box_id"]).astype(np.int64),
                p0=np.atleast_1d(data["p0"]),
                delta=self.grid.box_volume,
                samples=int(meta["extra"]["samples"]),
                inside_fraction=float(meta["extra"]["inside_fraction"]))
        return self._cache["stationary"]

    def density(self) -> DensityMatrix:
        if "density" not in self._cache:
            self._cache["density"] = DensityMatrix.load(
                self.out / "density" / "matrix.bin")
        return self._cache["density"]

    def eigenvalue(self) -> dict:
        if "eigenvalue" not in self._cache:
            self._cache["eigenvalue"] = json.loads(
                (self.out / "eigenvalue" / "eigenvalue.json").read_text())
        return self._cache["eigenvalue"]

    def eigenfunction(self):
        if "eigenfunction" not in self._cache:
            window = json.loads(
                (self.out / "eigenfunction" / "window.json").read_text())
            lams = [complex(m["mu"], m["omega"]) for m in window["modes"]]
            self._cache["eigenfunction"] = load_eigenestimate_csv(
                self.out / "eigenfunction" / "field.csv",
                kind=self.cfg["density"]["kind"], eigenvalues=lams,
                window=tuple(window["times"]))
        return self._cache["eigenfunction"]

    def network(self) -> MlpParams:
        if "network" not in self._cache:
            self._cache["network"] = MlpParams.load(
                self.out / "pinn" / "network.bin")
        return self._cache["network"]


def _write_manifest(ctx: RunContext, stage: str, artifacts: list[str],
                    extra: dict | None = None) -> None:
    files = {name: _sha256_file(ctx.out / stage / name) for name in artifacts}
    manifest = {"stage": stage, "hash": ctx.hashes[stage],
                "config_slice": ctx.cfg.get(stage, {}),
                "files": files, "extra": extra or {}}
    (ctx.out / stage / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1))


def _stage_current(ctx: RunContext, stage: str, artifacts: list[str]) -> bool:
    mpath = ctx.out / stage / "manifest.json"
    if not mpath.exists():
        return False
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError:
        return False
    if manifest.get("hash") != ctx.hashes[stage]:
        return False
    files = manifest.get("files", {})
    for name in artifacts:
        path = ctx.out / stage / name
        if not path.exists() or files.get(name) != _sha256_file(path):
            return False
    return True


def _run_collocation(ctx: RunContext) -> None:
    cfg = ctx.cfg
    c = cfg["collocation"]
    sim = _sim_for(cfg, "collocation")
    ids, centers = colloc.generate_training_set(
        ctx.model, ctx.grid, sim, int(c["n_x"]),
        float(c.get("alpha_train", 0.0)))
    points = colloc.generate_reference_set(
        ctx.model, ctx.grid, sim, int(c["n_y"]),
        float(c.get("alpha_reference", 0.0)))
    d = ctx.out / "collocation"
    colloc.save_training_csv(d / "training.csv", ctx.grid, ids, centers)
    colloc.save_points_csv(d / "reference.csv", points)
    ctx._cache["training"] = (ids, centers)
    ctx._cache["reference"] = points


def _run_stationary(ctx: RunContext) -> None:
    cfg = ctx.cfg
    s = cfg["stationary"]
    sim = _sim_for(cfg, "stationary")
    est = estimate_stationary(ctx.model, ctx.grid, sim,
                              int(s["k_trajectories"]), float(s["t_long"]))
    est.save_csv(ctx.out / "stationary" / "p0.csv", ctx.grid)
    ctx._cache["stationary"] = est
    ctx._cache["stationary_extra"] = {
        "samples": int(est.samples),
        "inside_fraction": float(est.inside_fraction),
        "tracked_boxes": int(len(est.box_ids)),
    }


def _run_density(ctx: RunContext) -> None:
    cfg = ctx.cfg
    d = cfg["density"]
    sim = _sim_for(cfg, "density")
    ids, _ = ctx.training()
    if d["kind"] == "forward":
        x0 = np.asarray(d["x0"], dtype=float)
        box = int(ctx.grid.locate(x0[None, :])[0])
        if box < 0:
            raise ConfigError(f"density.x0 {d['x0']} lies outside the domain")
        mat = estimate_forward(ctx.model, ctx.grid, ids, sim, box,
                               int(d["k_trajectories"]))
    else:
        ref = ReferenceBox(tuple(d["reference_box"]["lows"]),
                           tuple(d["reference_box"]["highs"]))
        mat = estimate_backward(ctx.model, ctx.grid, ids, sim, ref,
                                int(d["k_trajectories"]))
    mat.meta["config_hash"] = ctx.hashes["density"]
    mat.save(ctx.out / "density" / "matrix.bin")
    ctx._cache["density"] = mat


def _select_backward_traces(ctx: RunContext, window) -> np.ndarray:
    """Column indices of the start boxes whose occupation traces carry the
    strongest oscillation.

    Candidates are the top-density decile of tracked boxes: starts far out
    in the tail excite fast-decaying transient modes that share the leading
    frequency and flatten the fitted envelope, so the pool is restricted to
    where the stationary mass lives.  Within the pool, boxes are ranked by
    the peak-to-trough range of a lightly smoothed trace inside the fit
    window, because density alone is a poor guide: for oscillators whose
    eigenfunction vanishes at the density mode (e.g. linear ones), the very
    densest boxes have no signal at all.
    """
    e = ctx.cfg["eigenvalue"]
    mat = ctx.density()
    ids, _ = ctx.training()
    p0 = ctx.stationary().at_boxes(ids)
    max_traces = int(e.get("max_traces", 40))
    cand_quantile = float(e.get("candidate_quantile", 0.9))
    cand = np.where(p0 >= np.quantile(p0, cand_quantile))[0]
    if len(cand) == 0:
        cand = np.arange(len(ids))
    mask = (mat.times >= window[0] - 1e-12) & (mat.times <= window[1] + 1e-12)
    seg = mat.values[mask][:, cand]
    width = min(5, seg.shape[0])
    kernel = np.ones(width) / width
    smooth = np.apply_along_axis(
        lambda col: np.convolve(col, kernel, mode="valid"), 0, seg)
    score = smooth.max(axis=0) - smooth.min(axis=0)
    order = cand[np.lexsort((ids[cand], -score))]
    return order[:max_traces]


def _run_eigenvalue(ctx: RunContext) -> None:
    cfg = ctx.cfg
    e = cfg["eigenvalue"]
    mat = ctx.density()
    window = (float(e["window"][0]), float(e["window"][1]))
    traces = []
    labels = []
    if mat.kind == "forward":
        ref = ReferenceBox(tuple(cfg["density"]["reference_box"]["lows"]),
                           tuple(cfg["density"]["reference_box"]["highs"]))
        centers = ctx.grid.center(mat.box_ids)
        sel = ref.contains(centers)
        if not np.any(sel):
            raise ConfigError("no tracked boxes inside the reference box")
        traces.append(mat.values[:, sel].sum(axis=1))
        labels.append("region_sum")
    else:
        for i in _select_backward_traces(ctx, window):
            traces.append(mat.values[:, i])
            labels.append(f"box_{int(mat.box_ids[i])}")
    fits = [fit_eigenvalue(mat.times, tr, window, seed=int(cfg["seed"]))
            for tr in traces]
    lam, used = aggregate_eigenvalue(fits)
    n_modes = int(cfg.get("eigenfunction", {}).get("n_modes", 1))
    modes = parabolic_spectrum(lam, n_modes)
    result = {
        "mu": float(lam.real),
        "omega": float(lam.imag),
        "modes": [{"mu": float(m.real), "omega": float(m.imag)}
                  for m in modes],
        "window_times": [window[0], window[1]],
        "traces_fit": len(fits),
        "traces_used": int(used),
        "traces_failed": int(sum(1 for f in fits if not f.success)),
        "fits": [{
            "label": labels[i],
            "success": bool(f.success),
            "message": f.message,
            "residual": float(f.residual) if np.isfinite(f.residual)
            else None,
            "params": None if f.params is None else {
                "b1": f.params.b1, "b2": f.params.b2, "b3": f.params.b3,
                "b4": f.params.b4, "b5": f.params.b5},
        } for i, f in enumerate(fits)],
    }
    d = ctx.out / "eigenvalue"
    (d / "eigenvalue.json").write_text(
        json.dumps(result, sort_keys=True, indent=1))
    with open(d / "traces.csv", "w", newline="") as fh:
        fh.write(",".join(["t"] + labels) + "\n")
        for k, t in enumerate(mat.times):
            fh.write(",".join([repr(float(t))]
                              + [repr(float(tr[k])) for tr in traces]) + "\n")
    ctx._cache["eigenvalue"] = json.loads((d / "eigenvalue.json").read_text())


def _run_eigenfunction(ctx: RunContext) -> None:
    cfg = ctx.cfg
    f = cfg.get("eigenfunction", {})
    mat = ctx.density()
    ev = ctx.eigenvalue()
    lam = complex(float(ev["mu"]), float(ev["omega"]))
    lams = parabolic_spectrum(lam, int(f.get("n_modes", 1)))
    w_times = f.get("window", ev["window_times"])
    s = int(np.searchsorted(mat.times, w_times[0] - 1e-12))
    e = int(np.searchsorted(mat.times, w_times[1] + 1e-12)) - 1
    if mat.kind == "forward":
        ids, _ = ctx.training()
        p0 = ctx.stationary().at_boxes(ids)
    else:
        ref = ReferenceBox(tuple(cfg["density"]["reference_box"]["lows"]),
                           tuple(cfg["density"]["reference_box"]["highs"]))
        p0 = ctx.stationary().mass_in(ctx.grid, ref)
    est = solve_eigenfunction_lsq(
        mat, p0, lams, (s, e),
        row_weighted=bool(f.get("row_weighted", False)))
    ids, centers = ctx.training()
    d = ctx.out / "eigenfunction"
    est.save_csv(d / "field.csv", centers)
    (d / "window.json").write_text(json.dumps({
        "times": [float(mat.times[s]), float(mat.times[e])],
        "indices": [s, e],
        "modes": [{"mu": float(m.real), "omega": float(m.imag)}
                  for m in lams],
    }, sort_keys=True, indent=1))
    ctx._cache["eigenfunction"] = est
    ctx._cache["eigenfunction_extra"] = {
        "mean_residual": float(np.mean(est.residuals)),
        "window_indices": [s, e],
    }


def _run_pinn(ctx: RunContext) -> None:
    cfg = ctx.cfg
    p = cfg.get("pinn", {})
    est = ctx.eigenfunction()
    ids, centers = ctx.training()
    ev = ctx.eigenvalue()
    lam = complex(float(ev["mu"]), float(ev["omega"]))
    targets = est.values[:, 0]
    hidden = list(p.get("hidden", default_hidden(ctx.model.dim)))
    net = init_mlp(ctx.model.dim, hidden, ctx.grid.lows, ctx.grid.highs,
                   seed=int(p.get("init_seed", cfg["seed"])))
    tc = TrainConfig(
        epochs=int(p.get("epochs", 30)),
        batch_x=int(p.get("batch_x", 256)),
        batch_y=int(p.get("batch_y", 1024)),
        learning_rate=float(p.get("learning_rate", 1e-3)),
        seed=int(p.get("seed", cfg["seed"])),
        update_mode=p.get("update_mode", "summed"))
    net, history = train(net, tc, ctx.model, cfg["density"]["kind"], lam,
                         centers, targets, ctx.reference_points())
    d = ctx.out / "pinn"
    net.save(d / "network.bin")
    save_history_csv(d / "history.csv", history)
    ctx._cache["network"] = net
    final = history[-1]
    ctx._cache["pinn_extra"] = {k: float(final[k]) for k in
                                ("residual_r", "residual_i", "data_r",
                                 "data_i", "total")}


def _save_fd_mode(path: Path, centers: np.ndarray, vec: np.ndarray) -> None:
    dim = centers.shape[1]
    with open(path, "w", newline="") as fh:
        cols = ["box_id"] + [f"x{k+1}" for k in range(dim)] + ["re1", "im1"]
        fh.write(",".join(cols) + "\n")
        for i in range(len(vec)):
            fh.write(",".join(
                [str(i)] + [repr(float(c)) for c in centers[i]]
                + [repr(float(vec[i].real)), repr(float(vec[i].imag))])
                + "\n")


def _run_fd(ctx: RunContext) -> None:
    cfg = ctx.cfg
    f = cfg.get("fd", {})
    n = int(f.get("n_per_dim", ctx.grid.n_per_dim))
    grid = colloc.BoxGrid(ctx.grid.lows, ctx.grid.highs, n)
    shift = float(f.get("shift", -0.1))
    results = {}
    ops = {}
    vecs = {}
    for kind in ("forward", "backward"):
        op = fdref.assemble(ctx.model, grid, kind)
        lam, vec = fdref.leading_oscillatory(op, shift=shift)
        ops[kind] = op
        results[kind] = lam
        vecs[kind] = vec
    ref_cfg = f.get("reference_box") or cfg.get("density", {}).get(
        "reference_box")
    if ref_cfg is None:
        raise ConfigError("fd stage needs a reference_box (its own or the "
                          "density stage's) for the evolution cross-check")
    region = ReferenceBox(tuple(ref_cfg["lows"]), tuple(ref_cfg["highs"]))
    bump_at = f.get("bump_at")
    if bump_at is None:
        bump_at = (np.asarray(grid.lows) + 0.75
                   * (np.asarray(grid.highs) - np.asarray(grid.lows)))
    evolve = fdref.evolve_and_fit(
        ops["forward"],
        fdref.gaussian_bump(grid, bump_at, float(f.get("bump_width", 0.2))),
        t_final=float(f.get("t_final", 25.0)),
        dt=float(f.get("dt", 0.01)),
        window=tuple(f.get("window", [8.0, 25.0])),
        region=region, fit_seed=int(cfg["seed"]))
    lam_f = results["forward"]
    lam_e = evolve.fit.eigenvalue
    agreement = (abs(lam_e - lam_f) / abs(lam_f)
                 if evolve.fit.success else None)
    d = ctx.out / "fd"
    payload = {
        "n_per_dim": n,
        "forward": {"mu": float(lam_f.real), "omega": float(lam_f.imag)},
        "backward": {"mu": float(results["backward"].real),
                     "omega": float(results["backward"].imag)},
        "evolve_fit": {"mu": float(lam_e.real), "omega": float(lam_e.imag),
                       "success": bool(evolve.fit.success),
                       "dt_used": float(evolve.dt_used),
                       "retried": bool(evolve.retried),
                       "mass_drift_per_time":
                           float(evolve.mass_drift_per_time)},
        "route_agreement": agreement,
    }
    (d / "eigs.json").write_text(json.dumps(payload, sort_keys=True,
                                            indent=1))
    centers = grid.center(np.arange(grid.n_boxes))
    _save_fd_mode(d / "forward_mode.csv", centers, vecs["forward"])
    _save_fd_mode(d / "backward_mode.csv", centers, vecs["backward"])
    ctx._cache["fd_extra"] = payload


_STAGE_RUNNERS = {
    "collocation": (_run_collocation, ["training.csv", "reference.csv"]),
    "stationary": (_run_stationary, ["p0.csv"]),
    "density": (_run_density, ["matrix.bin"]),
    "eigenvalue": (_run_eigenvalue, ["eigenvalue.json", "traces.csv"]),
    "eigenfunction": (_run_eigenfunction, ["field.csv", "window.json"]),
    "pinn": (_run_pinn, ["network.bin", "history.csv"]),
    "fd": (_run_fd, ["eigs.json", "forward_mode.csv", "backward_mode.csv"]),
}

_STAGE_PARENTS = {
    "collocation": [],
    "stationary": [],
    "density": ["collocation"],
    "eigenvalue": ["density", "stationary"],
    "eigenfunction": ["density", "eigenvalue", "stationary"],
    "pinn": ["collocation", "eigenvalue", "eigenfunction"],
    "fd": [],
}


def run_pipeline(cfg: dict, out_dir, stages: list[str] | None = None,
                 log=print) -> RunContext:
    """Execute (or resume) the configured stages; returns the context."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg, out)
    wanted = [s for s in STAGE_ORDER if s in cfg["stages"]]
    if stages:
        unknown = set(stages) - set(wanted)
        if unknown:
            raise ConfigError(f"stages {sorted(unknown)} not in this config")
    run_set = set(stages) if stages else set(wanted)
    for stage in wanted:
        parents = {p: ctx.hashes[p] for p in _STAGE_PARENTS[stage]
                   if p in ctx.hashes}
        ctx.hashes[stage] = _stage_hash(cfg, stage, parents)
        if stage not in run_set:
            continue
        runner, artifacts = _STAGE_RUNNERS[stage]
        (out / stage).mkdir(exist_ok=True)
        if _stage_current(ctx, stage, artifacts):
            log(f"[{cfg['name']}] {stage}: up to date, skipped")
            ctx.timings[stage] = 0.0
            continue
        t0 = time.perf_counter()
        try:
            runner(ctx)
        except Exception as exc:
            _write_summary(ctx, failed_stage=stage, error=str(exc))
            raise StageError(stage, exc) from exc
        elapsed = time.perf_counter() - t0
        ctx.timings[stage] = elapsed
        _write_manifest(ctx, stage, artifacts,
                        ctx._cache.get(stage + "_extra"))
        log(f"[{cfg['name']}] {stage}: done in {elapsed:.1f}s")
    _write_summary(ctx)
    return ctx


def _write_summary(ctx: RunContext, failed_stage: str | None = None,
                   error: str | None = None) -> None:
    cfg = ctx.cfg
    summary = {
        "name": cfg["name"],
        "model": cfg["model"],
        "domain": cfg["domain"],
        "seed": cfg["seed"],
        "stages": {s: ctx.hashes[s] for s in ctx.hashes},
    }
    if failed_stage is not None:
        summary["failed_stage"] = failed_stage
        summary["error"] = error
    if "density" in cfg["stages"] and \
            (ctx.out / "density" / "matrix.bin").exists():
        try:
            mat = ctx.density()
            summary["density"] = {
                "kind": mat.kind,
                "k_trajectories": int(mat.k_trajectories),
                "boxes": int(mat.values.shape[1]),
                "slices": int(mat.values.shape[0]),
                "diverged": int(mat.meta.get("diverged", 0)),
            }
        except Exception:
            pass
    if "eigenvalue" in cfg["stages"] and \
            (ctx.out / "eigenvalue" / "eigenvalue.json").exists():
        ev = ctx.eigenvalue()
        summary["eigenvalue"] = {
            "mu": ev["mu"], "omega": ev["omega"],
            "traces_fit": ev["traces_fit"],
            "traces_used": ev["traces_used"],
            "traces_failed": ev["traces_failed"],
        }
    for stage, key in (("stationary", "stationary_extra"),
                       ("eigenfunction", "eigenfunction_extra"),
                       ("pinn", "pinn_extra"), ("fd", "fd_extra")):
        if stage in cfg["stages"]:
            extra = ctx._cache.get(key)
            if extra is None:
                mpath = ctx.out / stage / "manifest.json"
                if mpath.exists():
                    extra = json.loads(mpath.read_text()).get("extra")
            if extra:
                summary[stage] = extra
    (ctx.out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1))
    (ctx.out / "run_log.json").write_text(json.dumps(
        {"timings_seconds": {k: round(v, 3) for k, v in
                             ctx.timings.items()},
         "finished_unix": time.time()}, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# plot data

def emit_plot_data(run_dir, figure: str, out_path=None, grid_n: int = 200,
                   mask_threshold: float = 0.05, source: str = "pinn"):
    """Write plot-ready CSV arrays for one figure kind.

    trace:    sampled density traces with the fitted curves overlaid
              (columns t, rho, fit for a single trace)
    heatmap:  eigenfunction real/imaginary parts (a fresh uniform grid
              for 2D models through the trained network, training
              centers otherwise)
    phase:    argument of the field in (-pi, pi], masked where the
              magnitude falls below the threshold times the peak
    """
    run = Path(run_dir)
    summary = json.loads((run / "summary.json").read_text())
    model = build_model(summary["model"]["name"],
                        summary["model"].get("params"))
    dom = summary["domain"]
    out_path = Path(out_path) if out_path else run / f"plot_{figure}.csv"

    if figure == "trace":
        ev_path = run / "eigenvalue" / "eigenvalue.json"
        if not ev_path.exists():
            raise ConfigError("trace figure needs the eigenvalue stage; "
                              "run it first")
        ev = json.loads(ev_path.read_text())
        rows = (run / "eigenvalue" / "traces.csv").read_text().splitlines()
        header = rows[0].split(",")
        data = np.asarray([[float(v) for v in r.split(",")]
                           for r in rows[1:]])
        t = data[:, 0]
        single = len(ev["fits"]) == 1
        cols = ["t"]
        arrays = [t]
        for j, fit in enumerate(ev["fits"]):
            cols.append("rho" if single else header[j + 1])
            arrays.append(data[:, j + 1])
            cols.append("fit" if single else header[j + 1] + "_fit")
            if fit["params"] is None:
                arrays.append(np.full_like(t, np.nan))
            else:
                b = fit["params"]
                arrays.append(
                    b["b1"] * np.exp(b["b5"] * t)
                    * np.sin(2 * np.pi * t / b["b2"] + 2 * np.pi / b["b3"])
                    + b["b4"])
        table = np.column_stack(arrays)
        with open(out_path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for row in table:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        return out_path

    if figure not in ("heatmap", "phase"):
        raise ConfigError(f"unknown figure {figure!r}; "
                          "choose trace, heatmap or phase")

    if source == "pinn":
        net_path = run / "pinn" / "network.bin"
        if not net_path.exists():
            raise ConfigError("pinn source needs the pinn stage; run it "
                              "first or pass source='lsq'")
        net = MlpParams.load(net_path)
        if model.dim == 2:
            grid = colloc.BoxGrid(tuple(dom["lows"]), tuple(dom["highs"]),
                                  grid_n)
            pts = grid.center(np.arange(grid.n_boxes))
        else:
            _, pts = colloc.load_training_csv(
                run / "collocation" / "training.csv")
        vals = evaluate_complex(net, pts)
    else:
        field_path = run / "eigenfunction" / "field.csv"
        if not field_path.exists():
            raise ConfigError("lsq source needs the eigenfunction stage; "
                              "run it first")
        data = np.genfromtxt(field_path, delimiter=",", names=True)
        pts = np.stack([np.atleast_1d(data[f"x{d+1}"])
                        for d in range(model.dim)], axis=-1)
        vals = (np.atleast_1d(data["re1"])
                + 1j * np.atleast_1d(data["im1"]))

    mag = np.abs(vals)
    norm = mag / mag.max() if mag.max() > 0 else mag
    with open(out_path, "w", newline="") as fh:
        coords = [f"x{d+1}" for d in range(pts.shape[1])]
        if figure == "heatmap":
            fh.write(",".join(coords + ["re", "im", "abs"]) + "\n")
            for p, v in zip(pts, vals):
                fh.write(",".join(
                    [repr(float(c)) for c in p]
                    + [repr(float(v.real)), repr(float(v.imag)),
                       repr(float(abs(v)))]) + "\n")
        else:
            fh.write(",".join(coords + ["phase", "magnitude"]) + "\n")
            for p, v, nm in zip(pts, vals, norm):
                phase = float(np.angle(v)) if nm >= mask_threshold \
                    else float("nan")
                fh.write(",".join([repr(float(c)) for c in p]
                                  + [repr(phase), repr(float(nm))]) + "\n")
    return out_path


# ---------------------------------------------------------------------------
# validation

def _bilinear_interp(grid: colloc.BoxGrid, field: np.ndarray,
                     points: np.ndarray) -> np.ndarray:
    """Interpolate a cell-centered complex field on a 2D grid at points."""
    n = grid.n_per_dim
    lo = np.asarray(grid.lows)
    u = (np.asarray(points) - lo) / grid.widths - 0.5
    i0 = np.clip(np.floor(u).astype(int), 0, n - 2)
    frac = np.clip(u - i0, 0.0, 1.0)
    f = field.reshape(n, n)
    ix, iy = i0[:, 0], i0[:, 1]
    fx, fy = frac[:, 0], frac[:, 1]
    return ((1 - fx) * (1 - fy) * f[ix, iy]
            + fx * (1 - fy) * f[ix + 1, iy]
            + (1 - fx) * fy * f[ix, iy + 1]
            + fx * fy * f[ix + 1, iy + 1])


def _check_fresh(run: Path) -> None:
    summary = json.loads((run / "summary.json").read_text())
    for stage, expected in summary.get("stages", {}).items():
        mpath = run / stage / "manifest.json"
        if not mpath.exists():
            continue
        manifest = json.loads(mpath.read_text())
        if manifest.get("hash") != expected:
            raise ConfigError(
                f"{run} stage {stage!r} artifacts are stale (config hash "
                "mismatch); rerun the pipeline or pass force")
        for name, digest in manifest.get("files", {}).items():
            path = run / stage / name
            if path.exists() and _sha256_file(path) != digest:
                raise ConfigError(
                    f"{run} artifact {stage}/{name} was modified after "
                    "the run; rerun the pipeline or pass force")


def validate_runs(run_dir, reference_dir, force: bool = False) -> dict:
    """Compare a pipeline run against a reference run.

    The reference may be a grid-based run (fd stage) or another pipeline
    run on the same model and domain.  Eigenfunctions are unit-normalized
    and globally phase-aligned before the relative L2 error is taken on
    the common points; eigenvalue errors are relative per component.
    """
    run = Path(run_dir)
    ref = Path(reference_dir)
    s_run = json.loads((run / "summary.json").read_text())
    s_ref = json.loads((ref / "summary.json").read_text())
    if not force:
        if s_run["model"] != s_ref["model"]:
            raise ConfigError("runs use different models; pass force to "
                              "compare anyway")
        if s_run["domain"]["lows"] != s_ref["domain"]["lows"] or \
                s_run["domain"]["highs"] != s_ref["domain"]["highs"]:
            raise ConfigError("runs use different domains; pass force to "
                              "compare anyway")
        _check_fresh(run)
        _check_fresh(ref)

    kind = s_run.get("density", {}).get("kind", "backward")
    lam_run = complex(float(s_run["eigenvalue"]["mu"]),
                      float(s_run["eigenvalue"]["omega"]))

    dom = s_run["domain"]
    model = build_model(s_run["model"]["name"], s_run["model"].get("params"))
    data = np.genfromtxt(run / "eigenfunction" / "field.csv",
                         delimiter=",", names=True)
    pts = np.stack([np.atleast_1d(data[f"x{d+1}"])
                    for d in range(model.dim)], axis=-1)
    ids = np.atleast_1d(data["box_id"]).astype(np.int64)
    vals = np.atleast_1d(data["re1"]) + 1j * np.atleast_1d(data["im1"])

    if (ref / "fd" / "eigs.json").exists():
        fd_info = json.loads((ref / "fd" / "eigs.json").read_text())
        side = fd_info[kind]
        lam_ref = complex(float(side["mu"]), float(side["omega"]))
        fd_data = np.genfromtxt(ref / "fd" / f"{kind}_mode.csv",
                                delimiter=",", names=True)
        fd_field = np.asarray(fd_data["re1"] + 1j * fd_data["im1"])
        fd_grid = colloc.BoxGrid(tuple(dom["lows"]), tuple(dom["highs"]),
                                 int(fd_info["n_per_dim"]))
        ref_vals = _bilinear_interp(fd_grid, fd_field, pts)
    else:
        lam_ref = complex(float(s_ref["eigenvalue"]["mu"]),
                          float(s_ref["eigenvalue"]["omega"]))
        rdata = np.genfromtxt(ref / "eigenfunction" / "field.csv",
                              delimiter=",", names=True)
        rids = np.atleast_1d(rdata["box_id"]).astype(np.int64)
        rvals = (np.atleast_1d(rdata["re1"])
                 + 1j * np.atleast_1d(rdata["im1"]))
        common, ia, ib = np.intersect1d(ids, rids, return_indices=True)
        if len(common) == 0:
            raise ConfigError("runs share no training boxes")
        vals = vals[ia]
        ref_vals = rvals[ib]

    run_norm = np.linalg.norm(vals)
    ref_norm = np.linalg.norm(ref_vals)
    if run_norm == 0 or ref_norm == 0:
        raise ConfigError("an eigenfunction field is identically zero")
    nu = vals / run_norm
    nv = ref_vals / ref_norm
    aligned = align_global_phase(nu, nv)
    return {
        "eigenvalue_run": {"mu": lam_run.real, "omega": lam_run.imag},
        "eigenvalue_reference": {"mu": lam_ref.real, "omega": lam_ref.imag},
        "eigenvalue_rel_error": {
            "mu": abs(lam_run.real - lam_ref.real) / abs(lam_ref.real),
            "omega": abs(lam_run.imag - lam_ref.imag) / abs(lam_ref.imag),
            "modulus": abs(lam_run - lam_ref) / abs(lam_ref),
        },
        "eigenfunction_rel_l2_error": float(relative_l2_error(aligned, nv)),
        "points_compared": int(len(nu)),
    }


# ---------------------------------------------------------------------------
# entry point

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="oscspec",
        description="Eigenvalue/eigenfunction estimation for stochastic "
                    "oscillators from simulated trajectories")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute the staged pipeline")
    p_run.add_argument("--config", required=True,
                       help="path to a JSON config, or a preset name")
    p_run.add_argument("--out", required=True, help="run output directory")
    p_run.add_argument("--stage", action="append", default=None,
                       help="run only this stage (repeatable)")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    p_run.add_argument("--paper-scale", action="store_true",
                       help="apply the config's full-scale overrides")

    p_plot = sub.add_parser("emit-plot-data",
                            help="write plot-ready CSV arrays")
    p_plot.add_argument("--run", required=True)
    p_plot.add_argument("--figure", required=True,
                        choices=["trace", "heatmap", "phase"])
    p_plot.add_argument("--out", default=None)
    p_plot.add_argument("--grid-n", type=int, default=200)
    p_plot.add_argument("--mask-threshold", type=float, default=0.05)
    p_plot.add_argument("--source", choices=["pinn", "lsq"], default="pinn")

    p_val = sub.add_parser("validate",
                           help="compare a run against a reference run")
    p_val.add_argument("--run", required=True)
    p_val.add_argument("--reference", required=True)
    p_val.add_argument("--force", action="store_true",
                       help="compare despite model/stale-hash mismatches")
    p_val.add_argument("--out", default=None,
                       help="also write the report JSON here")

    sub.add_parser("list-presets", help="show bundled configurations")

    args = parser.parse_args(argv)
    try:
        if args.verb == "run":
            cfg = load_config(args.config, seed=args.seed,
                              paper_scale=args.paper_scale)
            run_pipeline(cfg, args.out, stages=args.stage)
            return 0
        if args.verb == "emit-plot-data":
            print(emit_plot_data(args.run, args.figure, args.out,
                                 grid_n=args.grid_n,
                                 mask_threshold=args.mask_threshold,
                                 source=args.source))
            return 0
        if args.verb == "validate":
            report = validate_runs(args.run, args.reference,
                                   force=args.force)
            text = json.dumps(report, sort_keys=True, indent=1)
            print(text)
            if args.out:
                Path(args.out).write_text(text)
            return 0
        if args.verb == "list-presets":
            for name in list_preset_names():
                cfg = json.loads(
                    _preset_root().joinpath(name + ".json").read_text())
                print(f"{name:28s} {cfg.get('description', '')}")
            return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
