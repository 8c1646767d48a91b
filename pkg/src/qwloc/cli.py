"""
Command-line driver: ``qwloc <subcommand> --config <path> [--seed N] [--out DIR]``.

Each run writes its data files and a ``manifest.json`` (config echo, seed,
package version, wall time, file list) into the output directory.  Files are
first written to a staging directory and moved into place only on success,
so an aborted run leaves nothing behind.  ``qwloc replay <manifest>`` reruns
a manifest; data files come out bit-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SUBCOMMANDS, ConfigError, ExperimentConfig

__all__ = ["main", "run"]

MANIFEST = "manifest.json"


def worker_count(cfg: ExperimentConfig) -> int:
    """Workers from the config, capped by ``QWLOC_THREADS`` when set."""
    n = cfg.workers
    env = os.environ.get("QWLOC_THREADS")
    if env:
        try:
            n = max(1, min(n, int(env)))
        except ValueError:
            raise ConfigError(f"QWLOC_THREADS must be an integer, got {env!r}")
    return n


def _dump(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- subcommands ----------------------------------------------------------------

def _check_perm(cfg, out: Path, log) -> list[str]:
    from .coins import check_localizing

    rep = check_localizing(cfg.permutation())
    data = {"permutation": str(cfg.permutation()), "images": list(cfg.permutation().images),
            "localizing": rep.localizing, "fixed_point_free": rep.fixed_point_free,
            "cycles": [list(c) for c in rep.cycles], "cycle_sums": [list(s) for s in rep.cycle_sums]}
    _dump(data, out / "check_perm.json")
    log(f"permutation: {data['permutation']}")
    for c, s in zip(rep.cycles, rep.cycle_sums):
        log(f"  cycle {c}: displacement sum {s}")
    log(f"localizing: {str(rep.localizing).lower()}")
    return ["check_perm.json"]


def _dispersion(cfg, out: Path, log) -> list[str]:
    from .spectral import brillouin_grid, dispersion

    res = dispersion(cfg.coin_matrix(), brillouin_grid(cfg.d, cfg.kgrid))
    res.to_csv(out / "dispersion.csv")
    _dump({"flatness": res.flatness.tolist(), "unitarity_error": res.unitarity_error,
           "kgrid": cfg.kgrid}, out / "dispersion.json")
    log(f"band variation: {', '.join(f'{v:.3e}' for v in res.flatness)}")
    return ["dispersion.csv", "dispersion.json"]


def _spectrum(cfg, out: Path, log) -> list[str]:
    from .disorder import derive_seed, sample_field
    from .lattice import BoxRegion
    from .spectral import box_exact_spectrum, hausdorff_distance, unitary_spectrum
    from .walk import WalkOperatorSpec, materialize
    from .coins import permutation_matrix

    perm = cfg.permutation()
    C_pi = permutation_matrix(perm)
    rows = []
    for L in cfg.L:
        for i in range(cfg.N):
            rs = derive_seed(cfg.seed, L, i)
            fld = sample_field(BoxRegion(L + 1, (0,) * cfg.d), cfg.phase_distribution(), rs)
            spec = WalkOperatorSpec(C_pi, fld, perm, outer=L, dimension_cap=cfg.dimension_cap)
            M, _ = materialize(spec, dense=True)
            num = unitary_spectrum(M)
            exact = box_exact_spectrum(spec)
            rows.append((L, i, len(exact), hausdorff_distance(exact, num.eigenvalues), num.max_residual))
    with open(out / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", "realization", "dimension", "hausdorff", "max_residual"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4]))])
    worst = max(r[3] for r in rows)
    _dump({"max_hausdorff": worst, "runs": len(rows)}, out / "spectrum.json")
    log(f"max Hausdorff distance exact vs numerical: {worst:.3e} over {len(rows)} runs")
    return ["spectrum.csv", "spectrum.json"]


def _arc_stats(cfg, out: Path, log) -> list[str]:
    from .coins import decompose_cycles
    from .spectral import arc_avoidance_probability, arc_hit_probability_exact

    perm = cfg.permutation()
    dist = cfg.phase_distribution()
    results = []
    for cyc in decompose_cycles(perm).cycles:
        est = arc_avoidance_probability(perm, cyc, dist, cfg.arc_length, cfg.N, cfg.seed, cfg.arc_center)
        exact = 1 - arc_hit_probability_exact(dist, len(cyc), cfg.arc_length, cfg.arc_center)
        entry = est.to_dict()
        entry["exact"] = exact
        results.append(entry)
        log(f"cycle {cyc}: avoid {est.estimate:.4f} [{est.ci_low:.4f}, {est.ci_high:.4f}], exact {exact:.4f}")
    _dump({"cycles": results}, out / "arc_stats.json")
    return ["arc_stats.json"]


def _dist_scaling(cfg, out: Path, log) -> list[str]:
    from .spectral import spectral_distance_statistics

    perm = cfg.permutation()
    dist = cfg.phase_distribution()
    entries = []
    for L in cfg.L:
        for z in cfg.z_values():
            ests = spectral_distance_statistics(z, list(cfg.eta), L, perm, dist, cfg.N, cfg.seed)
            for e in ests:
                entries.append(e.to_dict())
            lo, hi = ests[0], ests[-1]
            ratio = hi.estimate / lo.estimate if lo.estimate > 0 else float("nan")
            log(f"L={L} z={z:.4g}: P = {', '.join(f'{e.estimate:.4g}' for e in ests)}; ratio {ratio:.3g}")
    _dump({"estimates": entries}, out / "dist_scaling.json")
    return ["dist_scaling.json"]


def _dynamics(cfg, out: Path, log) -> list[str]:
    from .dynamics import localization_experiment, traces_to_csv

    perm = cfg.permutation()
    coin = None if cfg.coin is None else cfg.coin_matrix()
    start = None if cfg.start is None else (int(cfg.start[0]), tuple(int(v) for v in cfg.start[1]))
    files = []
    summary = {}
    for p in cfg.p:
        res = localization_experiment(perm, cfg.delta, cfg.phase_distribution(), cfg.n_steps, cfg.N, p=p,
                                      seed=cfg.seed, radius=cfg.radius, start=start, coin=coin,
                                      coin_seed=cfg.coin_seed, norm=cfg.norm)
        name = f"traces_p{p:g}.csv"
        traces_to_csv(res.traces, out / name)
        files.append(name)
        summary[f"{p:g}"] = res.to_dict()
        log(f"p={p:g}: median saturation ratio {res.median_ratio:.4g}, growth exponent {res.growth_exponent:.4g}")
    _dump(summary, out / "dynamics.json")
    return files + ["dynamics.json"]


def _fm_decay(cfg, out: Path, log) -> list[str]:
    from .resolvent import FMEnsemble, decay_fit, distance_profile, fractional_moment_mc, pairs_along_axis

    ens = FMEnsemble(cfg.coin_matrix(), cfg.permutation(), cfg.phase_distribution(), radius=cfg.outer)
    pairs = pairs_along_axis(cfg.d, cfg.distances)
    est = fractional_moment_mc(ens, cfg.s, cfg.z_values(), pairs, cfg.N, cfg.seed, workers=worker_count(cfg))
    r, e, S = distance_profile(est)
    fit = decay_fit(r, e, S, n_boot=cfg.n_boot, seed=cfg.seed)
    est.to_json(out / "fm_estimate.json")
    files = ["fm_estimate.json", "fm_fit.json"]
    if cfg.keep_samples:
        est.samples_to_csv(out / "fm_samples.csv")
        files.append("fm_samples.csv")
    _dump({"fit": fit.to_dict(), "distances": r.tolist(), "estimates": e.tolist()}, out / "fm_fit.json")
    log(f"gamma = {fit.gamma:.4g}, 95% CI [{fit.ci_low:.4g}, {fit.ci_high:.4g}], R^2 = {fit.r2:.4f}")
    return files


def _fv_scan(cfg, out: Path, log) -> list[str]:
    from .resolvent import finite_volume_bound_scan

    res = finite_volume_bound_scan(cfg.scan_config(), cfg.seed, workers=worker_count(cfg))
    res.to_csv(out / "fv_scan.csv")
    _dump(res.to_dict(), out / "fv_scan.json")
    for row in res.rows:
        log(f"L={row.L}: delta={row.delta:.3e} estimate={row.estimate:.4e} +- {row.stderr:.1e} "
            f"envelope={row.envelope:.4e}")
    log(f"nonincreasing: {str(res.nonincreasing).lower()}, below envelope: {str(res.all_below).lower()}")
    return ["fv_scan.csv", "fv_scan.json"]


def _verify_identities(cfg, out: Path, log) -> list[str]:
    from .disorder import derive_seed, sample_field
    from .lattice import BoxRegion
    from .resolvent import verify_geometric_identity

    C = cfg.coin_matrix()
    perm = cfg.permutation()
    rows = []
    for L in cfg.L:
        for i in range(cfg.N):
            rs = derive_seed(cfg.seed, i)
            fld = sample_field(BoxRegion(cfg.outer + 1, (0,) * cfg.d), cfg.phase_distribution(), rs)
            reps = verify_geometric_identity(L, C, perm, fld, cfg.z_values(), cfg.outer,
                                             n_random=cfg.n_random_columns, seed=rs)
            for k, rep in enumerate(reps):
                rows.append((i, k, rep))
    with open(out / "identities.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["realization", "z_index", "L", "z_re", "z_im", "single", "double", "expansion", "vanishing"])
        for i, k, rep in rows:
            w.writerow([i, k, rep.L, repr(rep.z.real), repr(rep.z.imag), repr(rep.single), repr(rep.double),
                        repr(rep.expansion), repr(rep.vanishing)])
    worst = {key: max(getattr(r, key) for _, _, r in rows) for key in ("single", "double", "expansion", "vanishing")}
    _dump({"max_deviation": worst, "runs": len(rows)}, out / "identities.json")
    log("max deviations: " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    return ["identities.csv", "identities.json"]


_HANDLERS = {
    "check-perm": _check_perm,
    "dispersion": _dispersion,
    "spectrum": _spectrum,
    "arc-stats": _arc_stats,
    "dist-scaling": _dist_scaling,
    "dynamics": _dynamics,
    "fm-decay": _fm_decay,
    "fv-scan": _fv_scan,
    "verify-identities": _verify_identities,
}


def run(subcommand: str, cfg: ExperimentConfig, out, log=print) -> dict:
    """Validate, compute, and write data files plus manifest into ``out``.

    Returns the manifest.  On any failure the output directory is left
    exactly as it was.
    """
    cfg.validate(subcommand)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".qwloc-", dir=out.parent))
    t0 = time.perf_counter()
    try:
        files = _HANDLERS[subcommand](cfg, stage, log)
        manifest = {
            "subcommand": subcommand,
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "version": __version__,
            "numpy": np.__version__,
            "wall_time_s": time.perf_counter() - t0,
            "files": sorted(files),
        }
        _dump(manifest, stage / MANIFEST)
        out.mkdir(parents=True, exist_ok=True)
        for name in files + [MANIFEST]:
            os.replace(stage / name, out / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return manifest


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qwloc", description="Random coined quantum walk experiments.")
    ap.add_argument("--version", action="version", version=f"qwloc {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", default=None, help="output directory (default: ./qwloc-<subcommand>)")
    p = sub.add_parser("replay", help="rerun a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    subcommand = args.subcommand
    try:
        if args.subcommand == "replay":
            with open(args.manifest) as fh:
                man = json.load(fh)
            subcommand = man["subcommand"]
            cfg = ExperimentConfig.from_dict(man["config"])
        else:
            subcommand = args.subcommand
            cfg = ExperimentConfig.load(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
        out = args.out or f"qwloc-{subcommand}"
        run(subcommand, cfg, out)
    except ConfigError as exc:
        print(f"qwloc: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"qwloc: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"qwloc: {subcommand} aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
