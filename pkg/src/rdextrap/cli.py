"""Command-line front end.

    python3 -m rdextrap <command> --config run.json --out results/ [--seed N] [--preset desk|paper]

Commands: simulate, estimate-rdd, identify, fit-turnout, extrapolate,
reproduce-tables.  Every output embeds the sha256 of the resolved config and
the seed; reruns with the same inputs are byte-identical.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .dgp import DgpConfig, ReferendumDataset, simulate_dataset
from .equilibrium import SolverConfig
from .errors import ConfigError
from .extrap import ExtrapolationPipeline, binned_margin_by_grid, check_grid, extrapolation_bootstrap
from .ident import PreferenceEstimator, counting_rule
from .mle import TurnoutMLE
from .rdd import RddSample, fuzzy_rd_known_first_stage, ik_bandwidth, one_sided_limit, sharp_rd

COMMANDS = ("simulate", "estimate-rdd", "identify", "fit-turnout", "extrapolate", "reproduce-tables")

DEFAULTS = {
    "seed": 0,
    "replications": 20,
    "data": None,
    "turnout_data": None,
    "dgp": {},
    "solver": {},
    "rdd": {"outcomes": ["P", "H", "tau", "N"], "n_neighbors": 3},
    "identify": {"equations": None, "chi": 1.0, "shrink": True, "bandwidth": "common"},
    "turnout": {"common_sigma": True, "common_slope": False, "n_draws": 0},
    "extrapolate": {"grid": [0.01, 0.40, 20], "kappa": 0.005, "mode": "myopic", "outcome": "P",
                    "bootstrap": True, "n_outer": 20, "n_inner": 10, "n_referenda": 500,
                    "replication": 0},
}

PRESETS = {
    "desk": {"replications": 20,
             "extrapolate": {"n_outer": 20, "n_inner": 10, "n_referenda": 500}},
    "paper": {"replications": 100,
              "extrapolate": {"n_outer": 100, "n_inner": 20, "n_referenda": None}},
}

_SECTIONS = {"dgp", "solver", "rdd", "identify", "turnout", "extrapolate"}
_TOP = set(DEFAULTS) | {"preset"}


# ---------------------------------------------------------------------------
# configuration


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, preset=None, seed=None) -> dict:
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}", {"config": "missing"}) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}", {"config": str(exc)}) from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object", {"config": "not an object"})
    preset = preset or raw.get("preset")
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", {"preset": f"must be one of {sorted(PRESETS)}"})
        cfg = _merge(cfg, PRESETS[preset])
    cfg = _merge(cfg, raw)
    cfg["preset"] = preset
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def validate_config(cfg, command="reproduce-tables") -> dict:
    """Structural and semantic checks; raises :class:`ConfigError` listing every problem."""
    problems = {}
    if isinstance(cfg, (str, Path)):
        cfg = load_config(cfg)
    for k in cfg:
        if k not in _TOP:
            problems[k] = "unknown key"
    for k in _SECTIONS:
        if k in cfg and not isinstance(cfg[k], dict):
            problems[k] = "must be an object"
    seed = cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        problems["seed"] = "must be an integer in [0, 2^64)"
    reps = cfg.get("replications")
    if not isinstance(reps, int) or reps < 1:
        problems["replications"] = "must be a positive integer"

    dgp = None
    if isinstance(cfg.get("dgp"), dict):
        try:
            dgp = DgpConfig.from_dict(cfg["dgp"])
        except (TypeError, ValueError) as exc:
            problems["dgp"] = str(exc)
    if isinstance(cfg.get("solver"), dict):
        try:
            SolverConfig(**cfg["solver"])
        except (TypeError, ValueError) as exc:
            problems["solver"] = str(exc)

    if dgp is not None and command in ("identify", "reproduce-tables", "extrapolate", "fit-turnout"):
        if not counting_rule(dgp.n_jurisdictions, len(dgp.types)):
            problems["dgp.n_jurisdictions"] = (
                "counting rule fails: districts x (types + 2) must be at least 2 x types + 1")
        elif dgp.n_jurisdictions < 2:
            problems["dgp.n_jurisdictions"] = "identification needs at least two districts"

    ident = cfg.get("identify", {})
    if isinstance(ident, dict):
        bw = ident.get("bandwidth", "common")
        if not (bw in ("common", "separate") or (isinstance(bw, (int, float)) and bw > 0)):
            problems["identify.bandwidth"] = "must be 'common', 'separate' or a positive number"
        eqs = ident.get("equations")
        if eqs is not None and (not isinstance(eqs, list) or len(eqs) < 2):
            problems["identify.equations"] = "must be null or a list of at least two positions"

    rdd = cfg.get("rdd", {})
    if isinstance(rdd, dict):
        bad = [o for o in rdd.get("outcomes", []) if o not in ("P", "H", "tau", "N")]
        if bad:
            problems["rdd.outcomes"] = f"unknown outcomes {bad}"

    ex = cfg.get("extrapolate", {})
    if isinstance(ex, dict):
        kappa = ex.get("kappa")
        if not isinstance(kappa, (int, float)) or not kappa > 0:
            problems["extrapolate.kappa"] = "bin width must be positive"
        try:
            lo, hi, n = ex.get("grid")
            check_grid(np.linspace(lo, hi, int(n)))
        except (TypeError, ValueError):
            problems["extrapolate.grid"] = "must be [low, high, n] with 0 < low < high and n >= 1"
        if ex.get("mode") not in ("myopic", "full"):
            problems["extrapolate.mode"] = "must be 'myopic' or 'full'"
        for key in ("n_outer", "n_inner"):
            v = ex.get(key)
            if not isinstance(v, int) or v < 2:
                problems[f"extrapolate.{key}"] = "must be an integer of at least 2"
        nr = ex.get("n_referenda")
        if nr is not None and (not isinstance(nr, int) or nr < 1):
            problems["extrapolate.n_referenda"] = "must be null or a positive integer"

    tn = cfg.get("turnout", {})
    if isinstance(tn, dict):
        nd = tn.get("n_draws", 0)
        if not isinstance(nd, int) or nd < 0 or nd == 1:
            problems["turnout.n_draws"] = "must be 0 or an integer of at least 2"
        for flag in ("common_sigma", "common_slope"):
            if not isinstance(tn.get(flag, False), bool):
                problems[f"turnout.{flag}"] = "must be true or false"

    for key in ("data", "turnout_data"):
        p = cfg.get(key)
        if p is not None and not Path(p).exists():
            problems[key] = f"file not found: {p}"
    if problems:
        raise ConfigError("invalid configuration", problems)
    return {"ok": True, "command": command, "problems": {}}


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# outputs


class Writer:
    def __init__(self, out, cfg):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)
        self.seed = cfg["seed"]

    def csv(self, name, frame: pd.DataFrame):
        path = self.out / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_sha256={self.hash} seed={self.seed}\n")
            frame.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")
        return path

    def json(self, name, obj):
        path = self.out / name
        payload = {"config_sha256": self.hash, "seed": self.seed, **obj}
        with open(path, "w") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return None if not math.isfinite(v) else round(v, 12)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# stages


def _dgp(cfg) -> DgpConfig:
    return DgpConfig.from_dict({**cfg["dgp"], "seed": cfg["seed"]})


def _solver(cfg) -> SolverConfig:
    return SolverConfig(**cfg["solver"])


def _datasets(cfg, rep):
    """RDD and turnout datasets for one replication, read from disk when configured."""
    dgp = _dgp(cfg)
    if cfg.get("data"):
        ds = ReferendumDataset.from_csv(cfg["data"])
    else:
        ds = simulate_dataset(dgp, replication=rep, solver=_solver(cfg))
    if cfg.get("turnout_data"):
        dt = ReferendumDataset.from_csv(cfg["turnout_data"])
    elif cfg.get("data"):
        dt = ds
    else:
        dt = simulate_dataset(dgp.for_turnout(), replication=rep, solver=_solver(cfg))
    return ds, dt


def _n_reps(cfg):
    return 1 if cfg.get("data") else cfg["replications"]


def _map(fn, cfg, threads):
    args = [(cfg, r) for r in range(_n_reps(cfg))]
    if threads and threads > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(_call, [fn] * len(args), args))
    return [fn(*a) for a in args]


def _call(fn, args):
    return fn(*args)


def rdd_table(ds: ReferendumDataset, outcomes=("P", "H", "tau", "N"), n_neighbors=3) -> pd.DataFrame:
    """Sharp jumps in change outcomes and their fuzzy counterparts at a shared bandwidth."""
    rows = np.arange(len(ds))
    j = ds.district
    post, pre = ds.post, ds.pre
    F = np.where(ds.approved, ds.dlogG, 0.0)
    cluster = ds.referendum + ds.replication * (int(ds.referendum.max()) + 1)
    out = []
    for name in outcomes:
        a = np.asarray(getattr(post, name))[rows, j]
        b = np.asarray(getattr(pre, name))[rows, j]
        Y = np.log1p(a) - np.log1p(b) if name == "tau" else np.log(a) - np.log(b)
        h = ik_bandwidth(ds.margin, Y)
        sample = RddSample(ds.margin, Y, F, cluster)
        sh = sharp_rd(sample, h=h, n_neighbors=n_neighbors, label=name)
        fz = fuzzy_rd_known_first_stage(sample, h=h, n_neighbors=n_neighbors, label=name)
        fs = one_sided_limit(ds.margin, F, h)
        for design, est in (("sharp", sh), ("fuzzy", fz)):
            out.append({"outcome": name, "design": design, **est.as_row(), "first_stage": fs})
    return pd.DataFrame(out)


def _rdd_rep(cfg, rep):
    ds, _ = _datasets(cfg, rep)
    frame = rdd_table(ds, cfg["rdd"]["outcomes"], cfg["rdd"]["n_neighbors"])
    frame.insert(0, "replication", rep)
    return frame


def _identify_rep(cfg, rep, with_turnout=False):
    ds, dt = _datasets(cfg, rep)
    idc = cfg["identify"]
    est = PreferenceEstimator(equations=idc["equations"], chi=idc["chi"], shrink=idc["shrink"],
                              bandwidth=idc["bandwidth"]).fit(ds).estimate_
    res = {"replication": rep, "a": est.a, "g": est.g, "ratio": est.ratio, "se_a": est.se_a,
           "se_g": est.se_g, "se_ratio": est.se_ratio, "eta": est.eta, "se_eta": est.se_eta,
           "zeta": est.zeta, "cov": est.cov, "n_obs": est.n_obs, "n_dropped": ds.meta.get("n_dropped", 0)}
    if with_turnout:
        tc = cfg["turnout"]
        m = TurnoutMLE(n_draws=tc["n_draws"], common_sigma=tc["common_sigma"],
                       common_slope=tc["common_slope"],
                       random_state=np.random.SeedSequence(cfg["seed"], spawn_key=(rep, 10**6)))
        m.fit(dt, est.zeta, est.cov)
        res["turnout"] = m.estimate_.params
        res["turnout_se"] = m.estimate_.se
    return res


def _turnout_rep(cfg, rep):
    return _identify_rep(cfg, rep, with_turnout=True)


def _truth(cfg):
    dgp = _dgp(cfg)
    th = np.array([t.theta for t in dgp.types])
    a = np.array([t.alpha for t in dgp.types]) / th
    g = np.array([t.gamma for t in dgp.types]) / th
    mu0 = np.array([t.mu0 for t in dgp.types])
    mu1 = np.array([t.mu1 for t in dgp.types])
    s0 = np.array([t.sigma0 for t in dgp.types])
    return a, g, dgp.eta, mu0, mu1, s0


def table2(cfg, results) -> tuple[pd.DataFrame, pd.DataFrame]:
    a_t, g_t, eta_t, *_ = _truth(cfg)
    sim = not cfg.get("data")
    rows = []
    mean = lambda key: np.mean([r[key] for r in results], axis=0)
    for k in range(len(a_t)):
        for name, key, truth in (("alpha/theta", "a", a_t[k]), ("gamma/theta", "g", g_t[k]),
                                 ("alpha/gamma", "ratio", a_t[k] / g_t[k])):
            est = mean(key)[k]
            rows.append({"type": k + 1, "parameter": name, "truth": truth if sim else np.nan,
                         "estimate": est, "se": mean("se_" + key)[k],
                         "delta": est - truth if sim else np.nan})
    eta = mean("eta")
    rows.append({"type": 0, "parameter": "eta", "truth": eta_t if sim else np.nan, "estimate": eta,
                 "se": mean("se_eta"), "delta": eta - eta_t if sim else np.nan})
    per_rep = []
    for r in results:
        for k in range(len(a_t)):
            per_rep.append({"replication": r["replication"], "type": k + 1, "a": r["a"][k],
                            "g": r["g"][k], "ratio": r["ratio"][k], "se_a": r["se_a"][k],
                            "se_g": r["se_g"][k], "eta": r["eta"]})
    return pd.DataFrame(rows), pd.DataFrame(per_rep)


def table3(cfg, results) -> pd.DataFrame:
    _, _, _, mu0, mu1, s0 = _truth(cfg)
    K = len(mu0)
    sim = not cfg.get("data")
    est = np.mean([r["turnout"] for r in results], axis=0)
    se = np.mean([r["turnout_se"] for r in results], axis=0)
    names = [("mu0", k + 1, mu0[k]) for k in range(K)]
    if cfg["turnout"]["common_slope"]:
        names.append(("mu1", 0, float(np.mean(mu1))))
    else:
        names += [("mu1", k + 1, mu1[k]) for k in range(K)]
    if cfg["turnout"]["common_sigma"]:
        names.append(("sigma0", 0, s0[0]))
    else:
        names += [("sigma0", k + 1, s0[k]) for k in range(K)]
    rows = [{"parameter": n, "type": k, "truth": t if sim else np.nan, "estimate": e, "se": s,
             "delta": e - t if sim else np.nan}
            for (n, k, t), e, s in zip(names, est, se)]
    return pd.DataFrame(rows)


def run_extrapolation(cfg, rep_result=None):
    ex = cfg["extrapolate"]
    rep = ex["replication"]
    ds, dt = _datasets(cfg, rep)
    res = rep_result or _turnout_rep(cfg, rep)
    nr = ex["n_referenda"]
    sub = ds if nr is None or nr >= len(ds) else ds.subset(np.arange(nr))
    pipe = ExtrapolationPipeline(sub, np.linspace(*ex["grid"][:2], int(ex["grid"][2])), ex["mode"],
                                 ex["kappa"], ex["outcome"], chi=cfg["identify"]["chi"],
                                 solver=_solver(cfg))
    if ex["bootstrap"]:
        seed = np.random.SeedSequence(cfg["seed"], spawn_key=(rep, 2 * 10**6))
        curve = extrapolation_bootstrap(pipe, dt, res["zeta"], res["cov"], res["eta"], ex["n_outer"],
                                        ex["n_inner"], seed, cfg["turnout"]["common_sigma"],
                                        common_slope=cfg["turnout"]["common_slope"])
    else:
        curve = pipe.curve(res["zeta"], res["eta"], res["turnout"],
                           common_slope=cfg["turnout"]["common_slope"])
    cs = pipe.counterfactuals(res["zeta"], res["eta"], res["turnout"], cfg["turnout"]["common_slope"])
    margins = pd.DataFrame({"dlogG": pipe.grid, "mean_margin": binned_margin_by_grid(cs)})
    return curve, margins


def _write_extrapolation(w, curve, margins, cfg):
    frame = curve.to_frame()
    w.csv("ave_curve.csv", frame)
    w.csv("margin_by_grid.csv", margins)
    w.json("plot_data.json", {
        "panel_a": {"dlogG": margins["dlogG"].to_numpy(), "mean_margin": margins["mean_margin"].to_numpy()},
        "panel_b": {"bin_center": curve.centers, "ave": curve.mean, "count": curve.count,
                    "variance": curve.variance},
        "kappa": cfg["extrapolate"]["kappa"], "outcome": cfg["extrapolate"]["outcome"]})


def execute(command, cfg, out, threads=1) -> dict:
    validate_config(cfg, command)
    w = Writer(out, cfg)
    written = []
    if command == "simulate":
        dgp = _dgp(cfg)
        for rep in range(cfg["replications"]):
            for tag, conf in (("rdd", dgp), ("turnout", dgp.for_turnout())):
                ds = simulate_dataset(conf, replication=rep, solver=_solver(cfg))
                path = w.out / f"{tag}_rep{rep:03d}.csv"
                ds.to_csv(path, sidecar={"config_sha256": w.hash, "seed": w.seed})
                written.append(path.name)
    elif command == "estimate-rdd":
        frame = pd.concat(_map(_rdd_rep, cfg, threads), ignore_index=True)
        written.append(w.csv("rdd_estimates.csv", frame).name)
    elif command in ("identify", "fit-turnout", "reproduce-tables"):
        fn = _identify_rep if command == "identify" else _turnout_rep
        results = _map(fn, cfg, threads)
        t2, per = table2(cfg, results)
        written += [w.csv("table2.csv", t2).name, w.csv("table2_replications.csv", per).name]
        summary = {"table2": t2.to_dict("records")}
        if command != "identify":
            t3 = table3(cfg, results)
            written.append(w.csv("table3.csv", t3).name)
            summary["table3"] = t3.to_dict("records")
        if command == "reproduce-tables":
            frame = pd.concat(_map(_rdd_rep, cfg, threads), ignore_index=True)
            written.append(w.csv("rdd_estimates.csv", frame).name)
            rep = cfg["extrapolate"]["replication"]
            match = [r for r in results if r["replication"] == rep]
            curve, margins = run_extrapolation(cfg, match[0] if match else None)
            _write_extrapolation(w, curve, margins, cfg)
            written += ["ave_curve.csv", "margin_by_grid.csv", "plot_data.json"]
            summary["n_replications"] = len(results)
            written.append(w.json("summary.json", summary).name)
    elif command == "extrapolate":
        curve, margins = run_extrapolation(cfg)
        _write_extrapolation(w, curve, margins, cfg)
        written += ["ave_curve.csv", "margin_by_grid.csv", "plot_data.json"]
    return {"command": command, "written": written}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdextrap", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--threads", type=int, default=1, help="worker processes for replications")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        execute(args.command, cfg, out, args.threads)
    except ConfigError as exc:
        _error(out, exc, args.command, {"problems": exc.problems})
        return 2
    except Exception as exc:  # any stage failure is reported, not raised
        _error(out, exc, args.command, {})
        return 1
    return 0


def _error(out, exc, command, extra):
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "error": type(exc).__name__, "message": str(exc), **extra}
    with open(out / "error.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    print(f"error: {exc}", file=sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
