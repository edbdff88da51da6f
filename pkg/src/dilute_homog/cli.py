"""Command-line front end.

Every subcommand reads a strict JSON run configuration, writes its results
into the output directory and finishes with ``manifest.json`` listing the
SHA-256 of each file written.  Exit status: 0 on success, 1 for invalid input
(configuration, placement, resolution), 2 for numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import ReflectionDivergenceError, greens_bound_check
from .config import ConfigError, RunConfig
from .corrections import (capacity, capacity_boundary_study, pair_scaling_study,
                          remainder_scaling_study, single_inclusion, superposition,
                          write_slope_csv)
from .domain import (DiluteRegime, InclusionConfiguration, PlacementError, cluster_decomposition,
                     global_volume_fraction, n_for_volume_fraction, sample_configuration)
from .grid import GridError, norms
from .montecarlo import StudyError, linearized_check, run_study
from .solver import (ConductivityBoundError, SolverError, UnderResolvedInclusionError,
                     solve_with_inclusions)

log = logging.getLogger("dilute_homog")

COMMANDS = ("sample", "solve", "single", "pair", "superpose", "capacity",
            "green-check", "linearized", "study")


def _clean(obj):
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class Writer:
    """Collects output files and their hashes."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name) -> Path:
        self.files.append(name)
        return self.dir / name

    def json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])

    def manifest(self, command, cfg, args):
        hashes = {}
        for name in sorted(set(self.files)):
            hashes[name] = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
        doc = {"command": command, "version": __version__, "seed": cfg.study.seed,
               "workers": args.workers, "config": cfg.to_dict(), "outputs": hashes}
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(_clean(doc), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return hashes


def _configuration(cfg: RunConfig, domain):
    """Explicit centers if given, otherwise a sampled configuration."""
    st = cfg.study
    if st.epsilon is None:
        raise ConfigError("study.epsilon: required for this command")
    if st.centers is not None:
        conf = InclusionConfiguration(st.epsilon, np.array(st.centers, dtype=float), None)
        conf.validate(domain)
        return conf
    n = st.n
    if n is None:
        if st.beta_bar is None:
            raise ConfigError("study: give centers, n or beta_bar")
        n = n_for_volume_fraction(domain, st.beta_bar, st.epsilon)
    log.info("sampling %d inclusions (epsilon=%g, seed=%d)", n, st.epsilon, st.seed)
    return sample_configuration(domain, st.epsilon, n, st.seed)


def _need(value, name):
    if value is None:
        raise ConfigError(f"study.{name}: required for this command")
    return value


def cmd_sample(cfg, args, out):
    domain = cfg.domain.spec()
    conf = _configuration(cfg, domain)
    cl = cluster_decomposition(conf)
    reg = DiluteRegime.of(conf, domain)
    out.json("configuration.json", json.loads(conf.to_json()))
    out.json("sample_summary.json", {
        "n": len(conf), "epsilon": conf.epsilon, "seed": conf.seed,
        "violations": conf.violations(domain),
        "global_volume_fraction": global_volume_fraction(conf, domain),
        "dilute_window": reg.in_window(),
        "cluster_sizes": {str(k): v for k, v in cl.size_histogram.items()}})


def cmd_solve(cfg, args, out):
    domain = cfg.domain.spec()
    conf = _configuration(cfg, domain)
    h = cfg.discretization.h_for(conf.epsilon)
    log.info("solving with %d inclusions at h=%g", len(conf), h)
    res = solve_with_inclusions(domain, conf, h, tol=cfg.discretization.tol)
    s = res.summary()
    s.update(h=h, n=len(conf), epsilon=conf.epsilon, norms=asdict(norms(res.field)))
    out.json("solve.json", s)
    out.json("configuration.json", json.loads(conf.to_json()))
    if args.dump_field:
        res.field.to_text(out.path("field.txt"))


def cmd_single(cfg, args, out):
    domain = cfg.domain.spec()
    st = cfg.study
    eta = np.asarray(st.eta if st.eta is not None else domain.middle, dtype=float)
    if st.epsilons:
        rule = (lambda e: cfg.discretization.h) if cfg.discretization.h else \
            (lambda e: e / cfg.discretization.h_over_epsilon)
        rep = remainder_scaling_study(domain, eta, st.epsilons, h_rule=rule,
                                      tol=cfg.discretization.tol)
        write_slope_csv(out.path("single_slopes.csv"), rep.rows)
        out.csv("far_field_profile.csv", ["r", "compensated_gradient"],
                zip(rep.profile_r, rep.profile))
        out.json("single.json", {"slopes": {r.quantity: r.fitted_slope for r in rep.rows},
                                 "passed": {r.quantity: r.passed for r in rep.rows},
                                 "levels": rep.bundles_norms})
        return
    eps = _need(st.epsilon, "epsilon")
    h = cfg.discretization.h_for(eps)
    b = single_inclusion(domain, eta, eps, h, tol=cfg.discretization.tol)
    out.json("single.json", {"C1": b.C1, "iterations": b.iterations,
                             "dipole_Ca": b.dipole.Ca, "norms": {k: asdict(v) for k, v in b.norms.items()}})
    if args.dump_field:
        b.phi1.to_text(out.path("phi1.txt"))
        b.v1.to_text(out.path("v1.txt"))


def cmd_pair(cfg, args, out):
    domain = cfg.domain.spec()
    st = cfg.study
    eps = _need(st.epsilon, "epsilon")
    seps = _need(st.separations, "separations")
    h = cfg.discretization.h_for(eps)
    rep = pair_scaling_study(domain, eps, seps, h, tol=cfg.discretization.tol)
    write_slope_csv(out.path("pair_slopes.csv"), rep.rows)
    out.json("pair.json", {"slopes": {r.quantity: r.fitted_slope for r in rep.rows},
                           "passed": {r.quantity: r.passed for r in rep.rows},
                           "levels": rep.bundles_norms})


def cmd_superpose(cfg, args, out):
    domain = cfg.domain.spec()
    conf = _configuration(cfg, domain)
    st = cfg.study
    h = cfg.discretization.h_for(conf.epsilon)
    res = superposition(domain, conf, h, order=st.order, pair_cutoff=st.pair_cutoff,
                        max_pairs=st.max_pairs, workers=args.workers, tol=cfg.discretization.tol)
    out.json("superposition.json", {"residuals": {str(k): v for k, v in res.residuals.items()},
                                    "pair_count": res.pair_count, "n": len(conf), "h": h})
    if args.dump_field:
        for k, f in res.fields.items():
            f.to_text(out.path(f"truncation_{k}.txt"))


def cmd_capacity(cfg, args, out):
    domain = cfg.domain.spec()
    st = cfg.study
    tol = cfg.discretization.tol
    if st.deltas:
        eps = _need(st.epsilon, "epsilon")
        h = cfg.discretization.h_for(eps)
        cs = capacity_boundary_study(domain, eps, st.deltas, h, tol=tol)
        out.csv("capacity_boundary.csv", ["delta", "capacity", "compensated"],
                zip(cs.deltas, cs.values, cs.compensated))
        out.json("capacity.json", {"deltas": cs.deltas, "values": cs.values,
                                   "compensated": cs.compensated, "band": cs.band})
        return
    conf = _configuration(cfg, domain)
    h = cfg.discretization.h_for(conf.epsilon)
    res = capacity(domain, conf, h, tol=tol)
    out.json("capacity.json", {"value": res.value, "delta": res.delta_list, "n": len(conf), "h": h})
    if args.dump_field:
        res.minimizer.to_text(out.path("capacity_potential.txt"))


def cmd_green(cfg, args, out):
    domain = cfg.domain.spec()
    st = cfg.study
    h = cfg.discretization.h_for(None)
    reps = greens_bound_check(domain, h, st.sample_pairs, tuple(st.derivative_orders),
                              n_sources=st.n_sources, seed=st.seed, min_sep=st.min_sep,
                              margin=st.margin)
    out.csv("green_bounds.csv", ["order", "sup_value", "pair_count", "h"], [r.row() for r in reps])


def cmd_linearized(cfg, args, out):
    domain = cfg.domain.spec()
    st = cfg.study
    eps = _need(st.epsilon, "epsilon")
    n = st.n if st.n is not None else n_for_volume_fraction(domain, _need(st.beta_bar, "beta_bar"), eps)
    h = cfg.discretization.h_for(eps)
    rep = linearized_check(domain, eps, n, st.samples, h, seed=st.seed, workers=args.workers,
                           tol=cfg.discretization.tol)
    out.json("linearized.json", asdict(rep))


def cmd_study(cfg, args, out):
    domain = cfg.domain.spec()
    st = cfg.study
    bbs = sorted(_need(st.beta_bars, "beta_bars"), reverse=True)
    d = cfg.discretization
    h_rule = (lambda e: d.h) if d.h else (lambda e: e / d.h_over_epsilon)
    try:
        rep = run_study(domain, bbs, epsilon_rule=st.epsilon_rule.rule(domain),
                        samples_rule=st.samples, h_rule=h_rule, seed=st.seed,
                        workers=args.workers, tol=d.tol)
    except StudyError as err:
        if err.partial is not None:
            err.partial.to_csv(out.path("study_partial.csv"))
        raise
    rep.to_csv(out.path("study.csv"))
    out.json("study.json", json.loads(rep.to_json().replace("NaN", "null")))


HANDLERS = {"sample": cmd_sample, "solve": cmd_solve, "single": cmd_single, "pair": cmd_pair,
            "superpose": cmd_superpose, "capacity": cmd_capacity, "green-check": cmd_green,
            "linearized": cmd_linearized, "study": cmd_study}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the validation status (1) rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dilute-homog",
                                description="Dilute-inclusion homogenisation experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--seed", type=int, help="override study.seed")
        s.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        s.add_argument("--out", help="output directory (overrides output.directory)")
        s.add_argument("--dump-field", action="store_true", help="also write fields as text")
        s.add_argument("--h", type=float, help="override discretization.h")
        s.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.study.seed = args.seed
        if args.h is not None:
            if not args.h > 0:
                raise ConfigError("--h must be positive")
            cfg.discretization.h = args.h
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        out = Writer(args.out or cfg.output.directory)
        HANDLERS[args.command](cfg, args, out)
        hashes = out.manifest(args.command, cfg, args)
    except (ConfigError, PlacementError, UnderResolvedInclusionError, ConductivityBoundError,
            GridError, OSError) as err:
        log.error("%s", err)
        return 1
    except (SolverError, StudyError, ReflectionDivergenceError, FloatingPointError) as err:
        log.error("numerical failure: %s", err)
        return 2
    except ValueError as err:
        log.error("%s", err)
        return 1
    for name, digest in hashes.items():
        log.info("wrote %s  %s", name, digest[:12])
    return 0


if __name__ == "__main__":
    sys.exit(main())
