"""Command-line front end: ``defuse estimate | screen | validate | bench``.

Any config key can be set with ``--section.key=value`` (or ``--section.key value``);
such flags override ``--config`` file values, which override built-in defaults.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import config_hash, load_file, pipeline_from, resolve
from .errors import ConfigError, DefuseError, NumericalError, ValidationError

log = logging.getLogger("defuse")

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

REPORT_COLUMNS = ("contrast", "beta_lc_only", "se_lc_only", "beta1", "se1", "beta2", "se2", "ci_low", "ci_high",
                  "ci_level", "beta_dagger", "selected", "notes")
SCREEN_COLUMNS = ("contrast", "source", "delta", "tau", "selected")


class StageTracker:
    """Remembers the pipeline stage in progress so failures can name it."""

    def __init__(self):
        self.current = "config"

    def __call__(self, name: str) -> None:
        self.current = name
        log.info("stage: %s", name)


def _parse_extras(args) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognised argument {tok!r}; config flags look like --section.key=value")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(args):
                raise ConfigError(f"{tok} needs a value")
            i += 1
            value = args[i]
        out[key] = value
        i += 1
    return out


def _resolve(ctx: click.Context, config_path, flags: dict[str, str]) -> tuple[dict, dict[str, str]]:
    overrides = _parse_extras(ctx.args)
    overrides.update({k: v for k, v in flags.items() if v is not None})
    file_cfg = load_file(config_path) if config_path else None
    cfg = resolve(file_cfg, overrides)
    explicit = set(overrides) | {f"{s}.{k}" for s, vals in (file_cfg or {}).items() for k in vals}
    return cfg, explicit


def _header(cfg: dict) -> str:
    # Where files go and how chatty the run is cannot change any number, so
    # neither enters the hash; identical runs then match across directories.
    hashed = {**cfg, "run": {k: v for k, v in cfg["run"].items() if k not in ("out", "verbosity")}}
    return f"# defuse {__version__} config={config_hash(hashed)}"


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fail(exc: Exception, stage: str) -> None:
    code = EXIT_NUMERICAL if isinstance(exc, NumericalError) else EXIT_VALIDATION
    click.echo(f"error during {stage}: {type(exc).__name__}: {exc}", err=True)
    sys.exit(code)


def _run(stage: StageTracker, fn):
    try:
        return fn()
    except DefuseError as exc:
        _fail(exc, stage.current)


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: str, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


_EXTRA = dict(ignore_unknown_options=True, allow_extra_args=True)


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config file.")(f)
    f = click.option("--out", default=None, help="Output directory (run.out).")(f)
    f = click.option("--seed", default=None, type=int, help="Root seed (run.seed).")(f)
    f = click.option("-v", "--verbose", count=True, help="Log stage progress to stderr.")(f)
    return f


def _flags(out, seed, verbose) -> dict[str, str | None]:
    return {"run.out": out, "run.seed": None if seed is None else str(seed),
            "run.verbosity": str(verbose) if verbose else None}


@click.group()
@click.version_option(__version__, prog_name="defuse")
def main():
    """Fuse labeled, blockwise-missing and unlabeled samples to estimate GLM coefficients."""


# ---------------------------------------------------------------------------
# estimate / screen / validate
# ---------------------------------------------------------------------------


def _contrasts(ds, glm):
    dim = glm.dim(len(ds.predictors))
    if glm.contrast is not None:
        return [("contrast", np.asarray(glm.contrast, float))]
    names = (["(Intercept)"] if glm.intercept else []) + [ds.covariate_names[j] for j in ds.predictors]
    from .data import unit_contrast

    return [(names[j], unit_contrast(j, dim)) for j in range(dim)]


def _load(manifest, stage: StageTracker):
    from .data import load_dataset

    stage("load")
    return load_dataset(manifest)


def _report_row(label, rep, has_sources: bool) -> dict:
    lo, hi = rep.ci
    row = dict(contrast=label, beta_lc_only=rep.beta_lc_only, se_lc_only=rep.se_lc_only, beta2=rep.beta2,
               se2=rep.se2, ci_low=lo, ci_high=hi, ci_level=rep.ci_level, notes=";".join(rep.notes))
    if has_sources:
        row.update(beta1=rep.beta1, se1=rep.se1, beta_dagger=rep.beta_dagger,
                   selected=";".join(str(r) for r in rep.selected))
    return row


def _screen_rows(label, screening) -> list[dict]:
    if screening is None:
        return []
    return [dict(contrast=label, source=r, delta=d, tau=t, selected=int(s)) for r, d, t, s in screening.rows()]


@main.command(context_settings=_EXTRA)
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@_common
@click.option("--no-screening", is_flag=True, help="Keep every source; skip the screening step.")
@click.option("--no-rescreen-recalibrate", is_flag=True, help="Reuse the first calibration after screening.")
@click.pass_context
def estimate(ctx, manifest, config_path, out, seed, verbose, no_screening, no_rescreen_recalibrate):
    """Run the full fusion pipeline on MANIFEST and write a report CSV."""
    stage = StageTracker()
    flags = _flags(out, seed, verbose)
    if no_screening:
        flags["screening.enabled"] = "false"
    if no_rescreen_recalibrate:
        flags["screening.recalibrate"] = "false"

    def body():
        cfg, _ = _resolve(ctx, config_path, flags)
        _setup_logging(cfg["run"]["verbosity"])
        pipe = pipeline_from(cfg)
        ds, glm = _load(manifest, stage)
        from .estimator import FusionContext

        fusion = FusionContext(ds, glm, pipe, stage=stage)
        reports, screens = [], []
        for label, c in _contrasts(ds, glm):
            rep = fusion.estimate(c)
            reports.append(_report_row(label, rep, ds.R > 0))
            screens += _screen_rows(label, rep.screening)
        stage("write")
        dest = _out_dir(cfg)
        header = _header(cfg)
        _write_csv(dest / "estimate_report.csv", header, REPORT_COLUMNS, reports)
        if ds.R and pipe.screening_enabled:
            _write_csv(dest / "screening.csv", header, SCREEN_COLUMNS, screens)
        for row in reports:
            click.echo(" ".join(f"{k}={_fmt(row.get(k))}" for k in REPORT_COLUMNS if row.get(k) not in (None, "")))
        click.echo(f"report={dest / 'estimate_report.csv'}")

    _run(stage, body)


@main.command(context_settings=_EXTRA)
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@_common
@click.pass_context
def screen(ctx, manifest, config_path, out, seed, verbose):
    """Screen the blockwise-missing sources of MANIFEST for misalignment."""
    stage = StageTracker()

    def body():
        cfg, _ = _resolve(ctx, config_path, _flags(out, seed, verbose))
        _setup_logging(cfg["run"]["verbosity"])
        ds, glm = _load(manifest, stage)
        if ds.R == 0:
            raise ValidationError("manifest has no blockwise-missing sources to screen")
        from .estimator import FusionContext

        fusion = FusionContext(ds, glm, pipeline_from(cfg), stage=stage)
        rows = []
        for label, c in _contrasts(ds, glm):
            rows += _screen_rows(label, fusion.screen(fusion.calibrate(c)))
        stage("write")
        dest = _out_dir(cfg)
        _write_csv(dest / "screening.csv", _header(cfg), SCREEN_COLUMNS, rows)
        for row in rows:
            click.echo(" ".join(f"{k}={_fmt(row[k])}" for k in SCREEN_COLUMNS))

    _run(stage, body)


@main.command(context_settings=_EXTRA)
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@_common
@click.pass_context
def validate(ctx, manifest, config_path, out, seed, verbose):
    """Check MANIFEST: columns, alignment sets and density-ratio overlap."""
    stage = StageTracker()

    def body():
        cfg, _ = _resolve(ctx, config_path, _flags(out, seed, verbose))
        _setup_logging(cfg["run"]["verbosity"])
        ds, _ = _load(manifest, stage)
        stage("overlap")
        from .data import validate_overlap

        diags = validate_overlap(ds, tol=cfg["nuisance"]["eps_clip"], K=cfg["nuisance"]["K"], seed=cfg["run"]["seed"])
        click.echo(f"n={ds.n} N={ds.N} R={ds.R} p={ds.p}")
        for d in diags:
            click.echo(f"overlap {d.source}: ratio_min={d.ratio_min:.4g} ratio_max={d.ratio_max:.4g} "
                       f"outside_tolerance={d.n_flagged}")
        click.echo("ok")

    _run(stage, body)


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _scenario(setting: str, sim: dict, seed: int, **changes):
    from .simbench import ScenarioSpec

    kw = dict(setting=setting, n=sim["n"], N=sim["N"], rho=sim["rho"] or None, R=sim["R"] or None,
              shift=sim["shift"] if sim["shift"] >= 0 else None, nonlinearity=sim["nonlinearity"],
              omega_size=sim["omega_size"], gamma_size=sim["gamma_size"], misaligned=sim["misaligned"],
              strength=sim["strength"], mean_matched=sim["mean_matched"],
              noise=sim["noise"] if sim["noise"] > 0 else None, seed=seed)
    kw.update(changes)
    try:
        return ScenarioSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _print_checks(checks, reps: int) -> None:
    from .simbench import LOW_PRECISION_REPS

    note = f" (low precision: reps={reps} < {LOW_PRECISION_REPS})" if reps < LOW_PRECISION_REPS else ""
    for ch in checks:
        click.echo(f"{'PASS' if ch.passed else 'FAIL'} {ch.name}: {ch.value:.4f} target {ch.target}{note}")


@main.command(context_settings=_EXTRA)
@click.argument("setting", type=click.Choice(["I", "II", "III", "IV", "V", "VI"]))
@_common
@click.option("--reps", default=None, type=int, help="Replications (simbench.reps).")
@click.option("--shift", default=None, type=float, help="Covariate-shift magnitude (simbench.shift).")
@click.option("--strength", default=None, type=float, help="Setting V misalignment strength.")
@click.option("--mean-matched", is_flag=True, default=None, help="Setting V mean-matched misalignment.")
@click.pass_context
def bench(ctx, setting, config_path, out, seed, verbose, reps, shift, strength, mean_matched):
    """Run the Monte Carlo benchmark for SETTING and write summary CSVs."""
    stage = StageTracker()
    flags = _flags(out, seed, verbose)
    flags.update({"simbench.reps": None if reps is None else str(reps),
                  "simbench.shift": None if shift is None else str(shift),
                  "simbench.strength": None if strength is None else str(strength),
                  "simbench.mean_matched": "true" if mean_matched else None})

    def body():
        from . import simbench as sb

        cfg, explicit = _resolve(ctx, config_path, flags)
        _setup_logging(cfg["run"]["verbosity"])
        sim, root = cfg["simbench"], cfg["run"]["seed"]
        if sim["reps"] < 2:
            raise ConfigError("simbench.reps must be at least 2")
        base = pipeline_from(cfg)
        header = _header({**cfg, "bench": {"setting": setting}})
        dest = _out_dir(cfg)
        stage("simulate")
        spec = _scenario(setting, sim, root)
        result = sb.run_monte_carlo(spec, reps=sim["reps"], oracle_rows=sim["oracle_rows"], base=base)
        stage("write")
        sb.write_rows(dest / f"summary_{setting}.csv", header, sb.SUMMARY_COLUMNS, sb.summary_rows(result))
        for row in result.summary():
            if row["coefficient"] == "all":
                click.echo(f"{row['method']}: RE={row['re']:.3f} coverage={row['coverage']:.3f}")
        checks = sb.acceptance_checks(result)
        if setting == "V":
            runs = [result]
            if "simbench.strength" not in explicit and not sim["mean_matched"]:
                stage("simulate")
                runs = []
                for s in sb.STRENGTH_GRID:
                    runs.append(result if s == spec.strength else sb.run_monte_carlo(
                        _scenario(setting, sim, root, strength=s), reps=sim["reps"],
                        oracle_rows=sim["oracle_rows"], base=base))
                runs.append(sb.run_monte_carlo(_scenario(setting, sim, root, strength=1.0, mean_matched=True),
                                               reps=sim["reps"], oracle_rows=sim["oracle_rows"], base=base))
            stage("write")
            rows = []
            for res in runs:
                for row in sb.screening_rows(res):
                    rows.append(dict(row, mean_matched=int(res.spec.mean_matched)))
            sb.write_rows(dest / f"screening_{setting}.csv", header, sb.SCREENING_COLUMNS + ("mean_matched",), rows)
            for row in rows:
                click.echo(f"strength={row['shift']:g} mean_matched={row['mean_matched']} {row['method']}: "
                           f"AUC={row['auc']:.3f} F1={row['f1']:.3f}")
            checks += sb.screening_checks(runs)
        if result.failures:
            click.echo(f"failed replications: {len(result.failures)} of {sim['reps']}")
        _print_checks(checks, sim["reps"])

    _run(stage, body)


if __name__ == "__main__":  # pragma: no cover
    main()
