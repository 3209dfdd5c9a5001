"""Command-line front end: collect, reduce, verify, bound, synthesize and demo.

Every stage reads its predecessors' files from the output directory and
writes plain-text artifacts there. Reports are ``key=value`` lines and carry
the config hash, the data hashes and the tool version.

Exit codes: 0 success, 2 infeasible or failed certificate, 3 input or rank
error, 4 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, lmi, mor_ct, mor_dt
from .config import ConfigError, PipelineConfig, load_config
from .dictionary import DictionaryError
from .experiment import DataRichnessError, collect_pair, rank_report, read_batch, write_batch
from .reduction import EqualityError, data_hash, load_reduction, save_reduction
from .synthesis import SynthesisError, abstract_rom, refine_and_run, synthesize, write_run_csv

log = logging.getLogger("ddrom")

EXIT_OK, EXIT_CERT, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4

EXCITED_CSV, ZERO_CSV = "excited.csv", "zero_input.csv"
ARCHIVE = "reduction.txt"
REPORTS = {"collect": "collect_report.txt", "reduce": "reduce_report.txt",
           "verify": "verify_report.txt", "bound": "bound_report.txt",
           "synthesize": "synthesis_report.txt"}


class CertificateFailure(RuntimeError):
    """A check ran to completion and the certificate did not hold."""


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage, self.exc = stage, exc


def _num(v) -> str:
    return format(float(v), ".17g")


def _write_report(path, header: dict, body: list[str]) -> None:
    with open(path, "w") as fh:
        for k, v in header.items():
            fh.write(f"{k}={v}\n")
        for line in body:
            fh.write(line + "\n")


def _read_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            k, sep, v = line.strip().partition("=")
            if sep:
                out[k] = v
    return out


def _header(stage, cfg: PipelineConfig, extra=None) -> dict:
    h = {"stage": stage, "tool_version": __version__, "benchmark": cfg.name,
         "time_kind": cfg.time_kind, "config_hash": cfg.digest()}
    h.update(extra or {})
    return h


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} {path} is missing; run the upstream stage first")
    return path


def _load_batches(cfg, out: Path):
    excited = read_batch(_require(out / EXCITED_CSV, "trajectory file"), cfg.spec)
    zero = read_batch(_require(out / ZERO_CSV, "trajectory file"), cfg.spec)
    return excited, zero


# -- stages ----------------------------------------------------------------------------

def stage_collect(cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        excited, zero = collect_pair(cfg.plant, cfg.spec, cfg.experiment)
    for w in caught:
        log.warning("%s", w.message)
    write_batch(out / EXCITED_CSV, excited, cfg.spec, cfg.experiment.seed)
    write_batch(out / ZERO_CSV, zero, cfg.spec, cfg.experiment.seed)
    body, ok = [], True
    for nm, b in (("D", excited), ("Dbar", zero)):
        rep = rank_report(b.D)
        ok &= rep["full_row_rank"]
        body += [f"{nm}.rank={rep['rank']}", f"{nm}.rows={rep['rows']}",
                 f"{nm}.condition={rep['condition']:.6e}",
                 f"{nm}.verdict={'full row rank' if rep['full_row_rank'] else 'RANK DEFICIENT'}"]
    d = cfg.spec.size
    if cfg.experiment.T < d + 1:
        body.append(f"warning=T={cfg.experiment.T} is below d+1={d + 1}; at least d+1 samples "
                    "are required")
    body += [f"T={cfg.experiment.T}", f"d={d}", f"seed={cfg.experiment.seed}",
             f"derivatives={excited.derivatives}",
             f"zero_input_segment_length={cfg.experiment.zero_input_segment_length}"]
    if cfg.plant.benchmark == "pendulum_dt":
        body.append("discretization=forward Euler, step 0.05 (assumed; scheme not given)")
    _write_report(out / REPORTS["collect"],
                  _header("collect", cfg, {"data_hash": data_hash(excited, zero)}), body)
    if not ok:
        raise DataRichnessError(f"the dictionary matrices are rank deficient (d={d}); at least "
                                "d+1 samples are required")
    return EXIT_OK


def stage_reduce(cfg: PipelineConfig, out: Path) -> int:
    excited, zero = _load_batches(cfg, out)
    if cfg.plant.continuous:
        red = mor_ct.reduce_ct(excited, zero, cfg.spec, cfg.reduction)
    else:
        red = mor_dt.reduce_dt(excited, zero, cfg.spec, cfg.reduction)
    red = red.replace(meta={**red.meta, "config_hash": cfg.digest()})
    save_reduction(red, out / ARCHIVE, {"tool_version": __version__})
    rc = cfg.reduction
    body = [f"nhat={rc.nhat}", f"equality_mode={rc.equality_mode}", f"gamma={_num(rc.gamma)}",
            f"mu={_num(rc.mu)}", f"alpha={_num(red.alpha)}", f"kappa={_num(red.kappa)}",
            f"rho={_num(red.rho)}", f"lmi_phase={red.meta['lmi_phase']}",
            f"anchor_rows={red.meta['anchor_rows']}", f"anchor_scale={red.meta['anchor_scale']}",
            f"derivatives={excited.derivatives}"]
    if rc.kappa_hat is not None:
        body.append(f"kappa_hat={_num(rc.kappa_hat)}")
    body += [f"residual.{k}={_num(v)}" for k, v in sorted(red.residuals.items())]
    body += [f"R1.row{i + 1}={' '.join(_num(v) for v in row)}" for i, row in enumerate(red.R1)]
    body += [f"Ahat.row{i + 1}={' '.join(_num(v) for v in row)}" for i, row in enumerate(red.Ahat)]
    body += [f"tolerance.equality={lmi.EQ_TOL:g}", f"tolerance.lmi={lmi.LMI_TOL:g}"]
    _write_report(out / REPORTS["reduce"],
                  _header("reduce", cfg, {"data_hash": red.meta["data_hash"]}), body)
    return EXIT_OK


def _archive(cfg, out: Path, archive=None):
    path = Path(archive) if archive else out / ARCHIVE
    red = load_reduction(_require(path, "reduction archive"))
    if red.time_kind != cfg.time_kind:
        raise ConfigError(f"archive is {red.time_kind} but the config is {cfg.time_kind}")
    if red.meta.get("dictionary_hash") != cfg.spec.digest():
        raise ConfigError("archive was built with a different dictionary")
    return red, path


def stage_verify(cfg: PipelineConfig, out: Path, archive=None) -> int:
    red, path = _archive(cfg, out, archive)
    v = cfg.verification
    fn = mor_ct.verify_sf_ct if red.time_kind == "continuous" else mor_dt.verify_sf_dt
    boxes = dict(x_box=v.x_box, xhat_box=v.xhat_box, uhat_box=v.uhat_box)
    body = [f"archive={path.name}", f"samples={v.samples}", f"seed={v.seed}",
            f"x_box={v.x_box}", f"xhat_box={v.xhat_box}", f"uhat_box={v.uhat_box}",
            f"alpha={_num(red.alpha)}", f"kappa={_num(red.kappa)}", f"rho={_num(red.rho)}",
            "tolerance=1e-6*(1+|scale|)"]
    passed = True
    for label, source in (("data", None), ("plant", cfg.plant)):
        rep = fn(red, source, v.samples, v.seed, **boxes)
        passed &= rep.passed
        c = "2" if red.time_kind == "continuous" else "16"
        body += [f"sf.{label}.{c}a.violations={rep.violations_bound}",
                 f"sf.{label}.{c}a.max_excess={rep.max_excess_bound:.6e}",
                 f"sf.{label}.{c}b.violations={rep.violations_decrease}",
                 f"sf.{label}.{c}b.max_excess={rep.max_excess_decrease:.6e}"]
    if red.time_kind == "discrete":
        nu, inferred = cfg.nu()
        cert = mor_dt.relation_cert(red, cfg.reduction.eta, nu, inferred)
        rel = mor_dt.check_relation_invariance(red, cert, v.samples, v.seed, cfg.plant, v.xhat_box)
        passed &= rel.passed
        body += [f"relation.{c}" for c in cert.lines()]
        body += [f"relation.invariance.violations={rel.violations_invariance}",
                 f"relation.invariance.max_excess={rel.max_excess_invariance:.6e}",
                 f"relation.output.violations={rel.violations_output}",
                 f"relation.output.max_excess={rel.max_excess_output:.6e}"]
    body.append(f"verdict={'pass' if passed else 'FAIL'}")
    _write_report(out / REPORTS["verify"],
                  _header("verify", cfg, {"data_hash": red.meta.get("data_hash", "")}), body)
    if not passed:
        raise CertificateFailure("sampled verification found violations; see " + REPORTS["verify"])
    return EXIT_OK


def bound_lines_ct(alpha, kappa, rho, uhat_inf, s0, horizon, inferred=False):
    cert = mor_ct.ClosenessCertificate(alpha, kappa, rho, uhat_inf, s0)
    tag = " (inferred from the input box, not declared)" if inferred else ""
    body = [f"alpha={_num(alpha)}", f"kappa={_num(kappa)}", f"rho={_num(rho)}",
            f"uhat_inf={_num(uhat_inf)}{tag}", f"S0={_num(s0)}",
            f"literal_bound={_num(cert.literal(0.0))}",
            f"literal_bound_steady={_num(cert.literal(math.inf))}",
            f"envelope_sup={_num(cert.envelope_sup())}",
            f"epsilon={_num(cert.envelope_sup())}"]
    for t in np.linspace(0.0, horizon, 5):
        body.append(f"envelope.t{t:g}={_num(cert.envelope(t))}")
    return body


def stage_bound(cfg: PipelineConfig, out: Path, archive=None) -> int:
    red, path = _archive(cfg, out, archive)
    b = cfg.bound
    if red.time_kind == "continuous":
        uinf, inferred = cfg.uhat_inf()
        body = bound_lines_ct(red.alpha, red.kappa, red.rho, uinf, b.s0, b.horizon, inferred)
    else:
        nu, inferred = cfg.nu()
        cert = mor_dt.relation_cert(red, cfg.reduction.eta, nu, inferred)
        body = [f"alpha={_num(red.alpha)}", f"kappa={_num(red.kappa)}", f"rho={_num(red.rho)}",
                f"eta={_num(cert.eta)}",
                f"nu={_num(cert.nu)}" + (" (inferred from the input box, not declared)"
                                          if inferred else ""),
                f"nu_inferred={'yes' if inferred else 'no'}",
                f"rho_bar={_num(cert.rho_bar)}", f"epsilon={_num(cert.epsilon)}"]
    _write_report(out / REPORTS["bound"],
                  _header("bound", cfg, {"data_hash": red.meta.get("data_hash", ""),
                                         "archive": path.name}), body)
    return EXIT_OK


def stage_synthesize(cfg: PipelineConfig, out: Path, archive=None) -> int:
    if cfg.scenario is None:
        raise ConfigError("the config has no scenario section")
    red, path = _archive(cfg, out, archive)
    bound = _read_report(_require(out / REPORTS["bound"], "bound report"))
    eps = float(bound["epsilon"])
    sc = cfg.scenario
    prob = sc.problem
    if red.time_kind == "continuous":
        need = mor_ct.envelope_sup(0.0, red.alpha, red.kappa, red.rho, prob.uhat_inf())
        if eps < need - 1e-12:
            raise ConfigError(f"bound report epsilon {eps:.6g} is below the envelope for the "
                              f"scenario inputs ({need:.6g}); rerun bound with uhat_inf unset")
    ab = abstract_rom(red, prob, eps)
    ctl = synthesize(ab, prob)
    ctl.export(out / "controller.csv")
    covered = ctl.covers(prob.initial_box)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(sc.run_seed)
    lo, hi = prob.initial_box[:, 0], prob.initial_box[:, 1]
    body = [f"archive={path.name}", f"inflation={_num(eps)}", f"iterations={ctl.iterations}",
            f"winning_cells={int(ctl.winning.sum())}", f"initial_box_covered={covered}",
            f"state_cells={prob.state_cells}", f"input_cells={prob.input_cells}",
            "obstacles=approximate boxes, inflated by epsilon; target not deflated"]
    ok = covered
    for r in range(sc.runs):
        x0h = rng.uniform(lo, hi)
        if not covered and not ctl.winning[prob.cell_of(x0h)]:
            body.append(f"run{r:02d}=skipped (start cell not winning)")
            continue
        run = refine_and_run(red, ctl, cfg.plant, x0h, sc.run_steps)
        write_run_csv(runs_dir / f"run_{r:02d}.csv", run)
        if red.time_kind == "continuous":
            env = mor_ct.bound_ct_envelope(0.0, run.t, red.alpha, red.kappa, red.rho, prob.uhat_inf())
            within = bool(np.all(run.deviation <= env + 1e-3))
        else:
            within = bool(np.all(run.deviation <= eps + 1e-9))
        good = run.reached and not run.hit_obstacle and within
        ok &= good
        body.append(f"run{r:02d}=reached:{run.reached} hit_obstacle:{run.hit_obstacle} "
                    f"max_deviation:{_num(run.deviation.max())} within_bound:{within} "
                    f"final_time:{_num(run.t[-1])}")
    body.append(f"verdict={'pass' if ok else 'FAIL'}")
    _write_report(out / REPORTS["synthesize"],
                  _header("synthesize", cfg, {"data_hash": red.meta.get("data_hash", "")}), body)
    if not ok:
        raise CertificateFailure("reach-avoid demo failed; see " + REPORTS["synthesize"])
    return EXIT_OK


def write_manifest(out: Path) -> Path:
    """sha256 of every artifact in the directory, sorted by relative path."""
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt")
    with open(out / "manifest.txt", "w") as fh:
        for p in files:
            fh.write(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.relative_to(out).as_posix()}\n")
    return out / "manifest.txt"


def run_demo(cfg: PipelineConfig, out: Path) -> int:
    stages = [("collect", stage_collect), ("reduce", stage_reduce), ("verify", stage_verify),
              ("bound", stage_bound)]
    if cfg.scenario is not None:
        stages.append(("synthesize", stage_synthesize))
    for name, fn in stages:
        log.info("stage %s", name)
        try:
            fn(cfg, out)
        except Exception as exc:  # re-raised with the stage name for the exit-code mapping
            raise StageError(name, exc) from exc
    write_manifest(out)
    return EXIT_OK


# -- argument handling -------------------------------------------------------------------

def _exit_code(exc) -> int:
    if isinstance(exc, StageError):
        exc = exc.exc
    if isinstance(exc, (lmi.InfeasibleError, EqualityError, CertificateFailure, SynthesisError)):
        return EXIT_CERT
    if isinstance(exc, (DataRichnessError, ConfigError, DictionaryError, FileNotFoundError,
                        ValueError, KeyError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def _config(args) -> tuple[PipelineConfig, Path]:
    bench = getattr(args, "benchmark", None)
    out_flag = Path(args.out) if args.out else None
    if args.config:
        cfg = load_config(args.config, bench)
    elif bench:
        cfg = load_config(None, bench)
    elif out_flag is not None and (out_flag / "config.yaml").exists():
        cfg = load_config(out_flag / "config.yaml")
    else:
        raise ConfigError("give --config, --benchmark, or an --out directory holding config.yaml")
    sections = {
        "experiment": {"T": getattr(args, "T", None), "tau": getattr(args, "tau", None)},
        "reduction": {k: getattr(args, k, None) for k in
                      ("kappa_hat", "kappa", "mu", "eta", "nu", "gamma", "nhat")},
        "verification": {"samples": getattr(args, "samples", None)},
        "bound": {"uhat_inf": getattr(args, "uhat_inf", None), "s0": getattr(args, "s0", None)},
    }
    cfg = cfg.with_overrides(seed=args.seed, oracle_derivatives=args.oracle_derivatives,
                             output=args.out, **sections)
    return cfg, Path(cfg.output)


def _common(p, benchmark_flag=True):
    p.add_argument("--config", help="YAML pipeline config")
    if benchmark_flag:
        p.add_argument("--benchmark", help="use the built-in defaults of a benchmark")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--oracle-derivatives", action="store_true",
                   help="use exact derivatives instead of forward differences (continuous time)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddrom", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="collect, reduce, verify, bound and synthesize in one go")
    p.add_argument("benchmark", choices=["ct10", "dt10", "pendulum_ct", "pendulum_dt"])
    _common(p, benchmark_flag=False)

    p = sub.add_parser("collect", help="run the two experiments and write trajectory CSVs")
    _common(p)
    p.add_argument("--T", type=int, help="samples per experiment")
    p.add_argument("--tau", type=float, help="sampling time (continuous time)")

    p = sub.add_parser("reduce", help="solve the data-based conditions and write the archive")
    _common(p)
    for flag in ("--kappa-hat", "--kappa", "--mu", "--eta", "--nu", "--gamma"):
        p.add_argument(flag, type=float)
    p.add_argument("--nhat", type=int)

    p = sub.add_parser("verify", help="sampled check of the simulation function")
    _common(p)
    p.add_argument("--archive", help="reduction archive (default: OUT/reduction.txt)")
    p.add_argument("--samples", type=int)

    p = sub.add_parser("bound", help="closeness bound or relation certificate")
    _common(p)
    p.add_argument("--archive")
    for flag in ("--alpha", "--rho", "--kappa", "--uhat-inf", "--s0", "--eta", "--nu"):
        p.add_argument(flag, type=float)
    p.add_argument("--horizon", type=float, default=20.0)
    p.add_argument("--discrete", action="store_true",
                   help="with numeric flags: relation certificate instead of the ct bound")
    p.add_argument("--nu-inferred", action="store_true",
                   help="tag --nu as inferred from an input box rather than declared")

    p = sub.add_parser("synthesize", help="grid controller on the ROM and refined runs")
    _common(p)
    p.add_argument("--archive")
    return ap


def _bound_from_flags(args) -> int:
    """``bound`` with explicit numbers: no config or archive involved."""
    missing = [f for f in ("alpha", "rho", "kappa") if getattr(args, f) is None]
    if missing:
        raise ConfigError("numeric bound needs --alpha, --rho and --kappa")
    header = {"stage": "bound", "tool_version": __version__, "source": "flags"}
    if args.discrete:
        if args.eta is None or args.nu is None:
            raise ConfigError("the relation certificate needs --eta and --nu")
        cert = mor_dt.relation_cert({"rho": args.rho, "kappa": args.kappa, "alpha": args.alpha},
                                    args.eta, args.nu, args.nu_inferred)
        body = [f"alpha={_num(args.alpha)}", f"kappa={_num(args.kappa)}", f"rho={_num(args.rho)}",
                *cert.lines(), f"nu_inferred={'yes' if args.nu_inferred else 'no'}"]
    else:
        if args.uhat_inf is None:
            raise ConfigError("the continuous-time bound needs --uhat-inf")
        body = bound_lines_ct(args.alpha, args.kappa, args.rho, args.uhat_inf, args.s0 or 0.0,
                              args.horizon)
    lines = [f"{k}={v}" for k, v in header.items()] + body
    print("\n".join(lines))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_report(Path(args.out) / REPORTS["bound"], header, body)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "bound" and args.alpha is not None:
            return _bound_from_flags(args)
        cfg, out = _config(args)
        if args.command == "demo":
            code = run_demo(cfg, out)
        else:
            stage = {"collect": stage_collect, "reduce": stage_reduce, "verify": stage_verify,
                     "bound": stage_bound, "synthesize": stage_synthesize}[args.command]
            kw = {"archive": args.archive} if getattr(args, "archive", None) else {}
            if args.command != "collect":
                _require(out, "artifact directory")
            report = out / REPORTS[args.command]
            report.unlink(missing_ok=True)
            try:
                code = stage(cfg, out, **kw)
            except Exception as exc:
                raise StageError(args.command, exc) from exc
            finally:
                if report.exists():
                    print(report.read_text(), end="")
        if args.command == "demo":
            for name in REPORTS.values():
                if (out / name).exists():
                    print(f"== {name}")
                    print((out / name).read_text(), end="")
            print(f"artifacts in {out}")
        return code
    except Exception as exc:
        code = _exit_code(exc)
        if code == EXIT_INTERNAL:
            log.exception("internal error")
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
