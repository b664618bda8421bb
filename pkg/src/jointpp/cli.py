"""Command-line entry point: ``simulate | select-knots | fit | predict | score``.

Every subcommand reads one config file (INI, or a run manifest that echoes
one) and writes into ``--out``. Failures print a single line
``<CODE>: <message>`` on stderr, remove the files written by the failing
invocation and exit with the code carried by the exception.
"""

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .config import RunConfig
from .domain import DesignSpec, assemble_dataset, holdout_split, read_tables
from .errors import ConfigError, DataError, JointPPError
from .kernels import GneitingKernel, ExponentialKernel
from .metrics import format_report, gelfand_ghosh, prediction_scores
from .predict import (
    PredictiveDraws,
    dic,
    observed_vector,
    predict_outcome,
    predict_outcome_given_signal,
    predict_signal,
    replicate_data,
)
from .preprocess import preprocess_signals
from .reduced_rank import (
    KnotSet,
    StructureBuilder,
    candidate_grid,
    select_height_knots,
    select_spatial_knots_u,
    select_spatial_knots_v,
)
from .sampler import PosteriorChain, gelman_rubin, initial_params, run_chains
from .simgen import simulate_joint, table1_experiment, truth_frames

log = logging.getLogger("jointpp")


class OutputDir:
    """Tracks files written by one invocation so they can be removed on failure."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.written = []

    def file(self, name):
        p = self.path / name
        self.written.append(p)
        return p

    def cleanup(self):
        for p in self.written:
            p.unlink(missing_ok=True)


# -- shared steps -------------------------------------------------------------


def load_data(cfg):
    plots, signals = read_tables(cfg.path(cfg.data.plots), cfg.path(cfg.data.signals))
    signals = preprocess_signals(signals, cfg.data.max_height, cfg.data.smooth)
    design = DesignSpec.parse(cfg.data.y_formula, cfg.data.z_formula)
    return assemble_dataset(
        plots, signals, design, max_height=cfg.data.max_height, standardize=cfg.data.standardize
    )


def split_data(cfg, data):
    if cfg.data.holdout_fraction == 0:
        return data, None
    return holdout_split(data, cfg.data.holdout_fraction, cfg.data.holdout_seed)


def knot_theta(cfg, train, knots_x):
    """Covariance parameters guiding knot placement: configured, or the
    moment-based starting values."""
    if cfg.knots.theta is not None:
        s2u, a, g, c, s2v, phi = cfg.knots.theta
        return GneitingKernel(s2u, a, g, c), ExponentialKernel(s2v, phi)
    probe = KnotSet(train.plot_locations[:1], train.plot_locations[:1], knots_x)
    p = initial_params(train, probe, priors=cfg.priors)
    return GneitingKernel(p.sigma2_u, p.a, p.gamma, p.c), ExponentialKernel(p.sigma2_v, p.phi_v)


def even_heights(data, n):
    if n > data.n_x:
        raise ConfigError(f"knots.n_x={n} exceeds the {data.n_x} observed heights")
    return np.linspace(data.heights.min(), data.heights.max(), n)


def select_knots(cfg, train, locations=None):
    """Knot selection; returns ``(KnotSet, trace frame)``.

    ``locations`` are the plots where ``u`` and ``v`` are needed, by default
    the training plots. Pass every plot with an observed signal so that
    held-out plots get knots of their own.
    """
    k = cfg.knots
    locs = train.plot_locations if locations is None else np.asarray(locations, dtype=float)
    n_loc = locs.shape[0]
    n_u = k.n_u or n_loc
    n_v = k.n_v or n_loc
    if n_u > n_loc or n_v > n_loc:
        raise ConfigError(f"knot counts n_u={n_u}, n_v={n_v} exceed the {n_loc} plot locations")
    rows = []
    if k.heights is not None:
        heights = np.asarray(k.heights, dtype=float)
    elif k.select:
        ku, _ = knot_theta(cfg, train, even_heights(train, k.n_x))
        heights, obj, exhaustive = select_height_knots(ku, train.heights, k.n_x)
        rows.append(("heights", len(heights), obj, "exhaustive" if exhaustive else "greedy"))
    else:
        heights = even_heights(train, k.n_x)
    columns = ["set", "size", "objective", "method"]
    if n_u == n_loc and n_v == n_loc and not k.select:
        return KnotSet(locs, locs, heights), pd.DataFrame(rows, columns=columns)
    ku, kv = knot_theta(cfg, train, heights)
    cand = candidate_grid(locs, k.candidates_per_axis)
    if n_u == n_loc and not k.select:
        su = locs
    else:
        su, tr = select_spatial_knots_u(ku, locs, heights, cand, n_u)
        rows += [("u", i, v, "greedy") for i, v in enumerate(tr)]
    if n_v == n_loc and not k.select:
        sv = locs
    else:
        sv, tr = select_spatial_knots_v(kv, locs, cand, n_v)
        rows += [("v", i, v, "greedy") for i, v in enumerate(tr)]
    return KnotSet(su, sv, heights), pd.DataFrame(rows, columns=columns)


def write_knots(out, knots):
    pd.DataFrame(knots.spatial_u, columns=["s1", "s2"]).to_csv(out.file("knots_u.csv"), index=False, float_format="%.17g")
    pd.DataFrame(knots.spatial_v, columns=["s1", "s2"]).to_csv(out.file("knots_v.csv"), index=False, float_format="%.17g")
    pd.DataFrame({"x": knots.heights}).to_csv(out.file("knots_x.csv"), index=False, float_format="%.17g")


def read_knots(path):
    path = Path(path)
    try:
        su = pd.read_csv(path / "knots_u.csv")[["s1", "s2"]].to_numpy(float)
        sv = pd.read_csv(path / "knots_v.csv")[["s1", "s2"]].to_numpy(float)
        hx = pd.read_csv(path / "knots_x.csv")["x"].to_numpy(float)
    except FileNotFoundError:
        return None
    return KnotSet(su, sv, hx)


def manifest(cfg, command, seconds, outputs, extra=None):
    rec = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_ini(),
        "base_dir": str(Path(cfg.base_dir).resolve()),
        "versions": {
            "jointpp": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "wall_time_s": seconds,
        "outputs": sorted(p.name for p in outputs),
    }
    rec.update(extra or {})
    return rec


def write_manifest(out, name, rec):
    out.file(name).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def load_chains(out_dir, data, knots, n_chains):
    chains = []
    shape = (data.n_x, knots.n_x, data.p_y)
    for k in range(1, n_chains + 1):
        d, l_ = Path(out_dir) / f"chain_{k}.csv", Path(out_dir) / f"latent_{k}.csv"
        if not d.exists():
            break
        chains.append(PosteriorChain.read_csv(d, l_, shape))
    if not chains:
        raise DataError(f"no chain CSVs in {out_dir}; run `fit` first")
    return chains


def fitted_state(cfg, out_path):
    data = load_data(cfg)
    train, hold = split_data(cfg, data)
    knots = read_knots(out_path)
    if knots is None:
        raise DataError(f"no knot CSVs in {out_path}; run `fit` first")
    return train, hold, knots, load_chains(out_path, train, knots, cfg.sampler.n_chains)


def _rng(cfg, stream):
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, stream]))


def holdout_predictions(cfg, train, hold, knots, chains):
    pc = cfg.predict
    b = StructureBuilder(train, knots)
    kw = dict(max_draws=pc.max_draws, builder=b)
    cov_hold = hold.covariates or None
    z = predict_signal(chains, train, knots, hold.signal_coords, _rng(cfg, 1), tau2_mode=pc.tau2_mode,
                       batch_size=pc.batch_size,
                       covariates={k: np.asarray(v)[hold.plot_index] for k, v in hold.covariates.items()},
                       **kw)
    y = predict_outcome(chains, train, knots, hold.plot_locations, _rng(cfg, 2), covariates=cov_hold,
                        batch_size=pc.batch_size, **kw)
    yc = predict_outcome_given_signal(chains, train, knots, hold, _rng(cfg, 3), **kw)
    return z, y, yc


# -- subcommands --------------------------------------------------------------


def cmd_simulate(cfg, out):
    sim = table1_experiment(cfg.simulate.scale, seed=cfg.simulate.seed)
    data, truth = simulate_joint(sim)
    plots, signals = data.to_tables()
    plots.to_csv(out.file("plots.csv"), index=False, float_format="%.17g")
    signals.to_csv(out.file("signals.csv"), index=False, float_format="%.17g")
    lat, tplots, params = truth_frames(data, truth)
    lat.to_csv(out.file("truth_latent.csv"), index=False, float_format="%.17g")
    tplots.to_csv(out.file("truth_plots.csv"), index=False, float_format="%.17g")
    params.to_csv(out.file("truth_params.csv"), index=False, float_format="%.17g")
    return {"n_s": data.n_s, "n_x": data.n_x}


def cmd_select_knots(cfg, out):
    data = load_data(cfg)
    train, _ = split_data(cfg, data)
    knots, trace = select_knots(cfg, train, data.plot_locations)
    write_knots(out, knots)
    trace.to_csv(out.file("knot_trace.csv"), index=False, float_format="%.17g")
    return {"n_u": knots.n_u, "n_v": knots.n_v, "n_x_star": knots.n_x}


def cmd_fit(cfg, out):
    data = load_data(cfg)
    train, _ = split_data(cfg, data)
    knots = read_knots(out.path)
    if knots is None:
        knots, _ = select_knots(cfg, train, data.plot_locations)
        write_knots(out, knots)
    chains = run_chains(train, knots, cfg.priors, cfg.sampler)
    for k, ch in enumerate(chains, start=1):
        ch.write_csv(out.file(f"chain_{k}.csv"), out.file(f"latent_{k}.csv"))
    rhat = None
    if len(chains) > 1:
        rhat = {n: gelman_rubin([ch.column(n) for ch in chains]) for n in chains[0].names}
    return {
        "chain_seeds": [ch.seed for ch in chains],
        "accept_rates": [ch.accept_rate for ch in chains],
        "chain_wall_time_s": [ch.wall_time for ch in chains],
        "rhat": rhat,
        "max_rhat": None if rhat is None else float(np.nanmax(list(rhat.values()))),
    }


def cmd_predict(cfg, out):
    train, hold, knots, chains = fitted_state(cfg, out.path)
    extra = {}
    if hold is not None:
        z, y, yc = holdout_predictions(cfg, train, hold, knots, chains)
        z.write_csv(out.file("pred_signal.csv"), cfg.predict.level)
        y.write_csv(out.file("pred_outcome.csv"), cfg.predict.level)
        yc.write_csv(out.file("pred_outcome_given_signal.csv"), cfg.predict.level)
        np.savez(out.file("pred_draws.npz"), signal=z.draws, outcome=y.draws, outcome_given_signal=yc.draws)
    if cfg.predict.targets:
        tg = pd.read_csv(cfg.path(cfg.predict.targets))
        if "x" in tg.columns:
            d = predict_signal(chains, train, knots, tg[["s1", "s2", "x"]].to_numpy(float), _rng(cfg, 4),
                               tau2_mode=cfg.predict.tau2_mode, batch_size=cfg.predict.batch_size,
                               max_draws=cfg.predict.max_draws)
            d.write_csv(out.file("pred_targets_signal.csv"), cfg.predict.level)
        else:
            cov = {c: tg[c].to_numpy(float) for c in tg.columns if c not in ("s1", "s2")}
            d = predict_outcome(chains, train, knots, tg[["s1", "s2"]].to_numpy(float), _rng(cfg, 5),
                                covariates=cov, batch_size=cfg.predict.batch_size, max_draws=cfg.predict.max_draws)
            d.write_csv(out.file("pred_targets_outcome.csv"), cfg.predict.level)
        extra["n_targets"] = len(tg)
    return extra


def cmd_score(cfg, out):
    train, hold, knots, chains = fitted_state(cfg, out.path)
    b = StructureBuilder(train, knots)
    level = cfg.predict.level
    metrics = {}
    d, p_d = dic(chains, train, knots, max_draws=cfg.predict.dic_draws, builder=b)
    metrics["p_D"] = p_d
    metrics["DIC"] = d
    reps = replicate_data(chains, train, knots, _rng(cfg, 6), max_draws=cfg.predict.max_draws, builder=b)
    G, P, D = gelfand_ghosh(reps, observed_vector(train))
    metrics.update({"G": G, "P": P, "D": D})
    if hold is not None:
        npz = out.path / "pred_draws.npz"
        if npz.exists():
            f = np.load(npz)
            zd, yd, ycd = f["signal"], f["outcome"], f["outcome_given_signal"]
        else:
            z, y, yc = holdout_predictions(cfg, train, hold, knots, chains)
            zd, yd, ycd = z.draws, y.draws, yc.draws
        joint = np.hstack([zd, yd])
        obs = np.concatenate([hold.z, hold.y])
        metrics.update(prediction_scores(joint, obs, level, prefix="joint_"))
        metrics.update(prediction_scores(yd, hold.y, level, prefix="y_"))
        metrics.update(prediction_scores(ycd, hold.y, level, prefix="y_given_signal_"))
        metrics["grs_form"] = "diagonal_gaussian"
    out.file("metrics.txt").write_text(format_report(metrics))
    return {"metrics": {k: v for k, v in metrics.items() if isinstance(v, float)}}


COMMANDS = {
    "simulate": cmd_simulate,
    "select-knots": cmd_select_knots,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "score": cmd_score,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="jointpp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"jointpp {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=name != "simulate", help="INI config or run manifest")
        sp.add_argument("--seed", type=int, help="overrides the configured seed")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--chains", type=int, help="overrides the configured chain count")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = None
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
            if args.command == "simulate":
                cfg.simulate.seed = args.seed
        if args.chains is not None:
            if args.chains < 1:
                raise ConfigError("--chains must be >= 1")
            cfg = cfg.with_chains(args.chains)
        if args.command != "simulate":
            cfg.check_files()
        out = OutputDir(args.out)
        t0 = time.perf_counter()
        extra = COMMANDS[args.command](cfg, out)
        rec = manifest(cfg, args.command, time.perf_counter() - t0, list(out.written), extra)
        write_manifest(out, f"manifest_{args.command.replace('-', '_')}.json", rec)
    except JointPPError as exc:
        if out is not None:
            out.cleanup()
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, np.linalg.LinAlgError) as exc:
        if out is not None:
            out.cleanup()
        print(f"{DataError.code}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
