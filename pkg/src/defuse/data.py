"""Fused datasets: one labeled-complete source, R labeled sources with blockwise
missing covariates, and one unlabeled-complete sample.

Covariates are referenced by 0-based column index into ``covariate_names``.
Arrays stored on a :class:`FusedDataset` are marked read-only.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli

from .errors import (
    AlignmentViolation,
    ConfigError,
    EmptySource,
    MissingColumn,
    NonNumericCell,
    ValidationError,
)
from .glm import LINKS, mean_deriv, mean_fn


class Kind(str, Enum):
    LC = "lc"
    LM = "lm"
    UC = "uc"


@dataclass(frozen=True)
class SourceKind:
    kind: Kind
    index: int | None = None  # 1-based r for LM sources

    def __post_init__(self):
        if (self.kind is Kind.LM) != (self.index is not None):
            raise ValueError("only LM sources carry an index")

    def __str__(self):
        return f"lm.{self.index}" if self.kind is Kind.LM else self.kind.value


LC = SourceKind(Kind.LC)
UC = SourceKind(Kind.UC)


def LM(r: int) -> SourceKind:
    return SourceKind(Kind.LM, r)


def _frozen(a, ndim) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite value in data")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LabeledMissingSource:
    """One blockwise-missing labeled source LM_r."""

    observed: tuple[int, ...]  # Gamma_r, sorted
    omega: tuple[int, ...]  # Omega_r, subset of observed
    x: np.ndarray  # (n_r, |Gamma_r|), columns ordered as ``observed``
    y: np.ndarray
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "observed", tuple(int(j) for j in self.observed))
        object.__setattr__(self, "omega", tuple(sorted(int(j) for j in self.omega)))
        object.__setattr__(self, "x", _frozen(self.x, 2))
        object.__setattr__(self, "y", _frozen(self.y, 1))
        if list(self.observed) != sorted(set(self.observed)):
            raise ValidationError("observed columns must be sorted and unique")
        if not set(self.omega) <= set(self.observed):
            raise AlignmentViolation(
                f"alignment set {self.omega} is not contained in observed set {self.observed}"
            )
        if self.x.shape != (self.y.shape[0], len(self.observed)):
            raise ValidationError("LM covariate block does not match observed columns")
        if self.y.shape[0] == 0:
            raise EmptySource(f"source {self.name or 'lm'} has no rows")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def columns(self, cols: Sequence[int]) -> np.ndarray:
        """Covariate columns by global index; all must be observed."""
        pos = {j: k for k, j in enumerate(self.observed)}
        try:
            idx = [pos[j] for j in cols]
        except KeyError as exc:
            raise MissingColumn(f"column {exc.args[0]} is not observed in this source") from None
        return self.x[:, idx]


@dataclass(frozen=True)
class FusedDataset:
    covariate_names: tuple[str, ...]
    predictors: tuple[int, ...]  # target model predictors A
    lc_x: np.ndarray
    lc_y: np.ndarray
    uc_x: np.ndarray
    omega0: tuple[int, ...] = ()
    lm: tuple[LabeledMissingSource, ...] = ()
    outcome_name: str = "y"

    def __post_init__(self):
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "predictors", tuple(int(j) for j in self.predictors))
        object.__setattr__(self, "omega0", tuple(sorted(int(j) for j in self.omega0)))
        object.__setattr__(self, "lm", tuple(self.lm))
        object.__setattr__(self, "lc_x", _frozen(self.lc_x, 2))
        object.__setattr__(self, "lc_y", _frozen(self.lc_y, 1))
        object.__setattr__(self, "uc_x", _frozen(self.uc_x, 2))
        p = len(self.covariate_names)
        if self.lc_x.shape[0] == 0:
            raise EmptySource("LC source has no rows")
        if self.uc_x.shape[0] == 0:
            raise EmptySource("UC source has no rows")
        if self.lc_x.shape != (self.lc_y.shape[0], p) or self.uc_x.shape[1] != p:
            raise ValidationError("covariate matrices do not match covariate_names")
        everything = set(range(p))
        if not set(self.predictors) <= everything or not set(self.omega0) <= everything:
            raise ValidationError("predictor or alignment index out of range")
        for src in self.lm:
            if not set(src.observed) <= everything:
                raise ValidationError("LM observed index out of range")

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def n(self) -> int:
        return self.lc_y.shape[0]

    @property
    def N(self) -> int:
        return self.uc_x.shape[0]

    @property
    def R(self) -> int:
        return len(self.lm)

    @property
    def rho(self) -> tuple[float, ...]:
        return tuple(src.n / self.n for src in self.lm)

    def omega(self, r: int) -> tuple[int, ...]:
        return self.lm[r - 1].omega


@dataclass(frozen=True)
class GlmSpec:
    """Working GLM ``E[Y|A] = g(gamma'A)`` with a unit contrast ``c``.

    With ``intercept`` the design vector is ``(1, X_A)`` and the contrast has
    length ``|A| + 1``.
    """

    link: str = "identity"
    contrast: np.ndarray | None = None
    intercept: bool = True

    def __post_init__(self):
        if self.link not in LINKS:
            raise ConfigError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if self.contrast is not None:
            c = np.asarray(self.contrast, dtype=float)
            if abs(np.linalg.norm(c) - 1.0) > 1e-12:
                raise ConfigError("contrast must have unit Euclidean norm")
            object.__setattr__(self, "contrast", c)

    def g(self, eta):
        return mean_fn(self.link, np.asarray(eta, dtype=float))

    def gdot(self, eta):
        return mean_deriv(self.link, np.asarray(eta, dtype=float))

    def design(self, x_pred: np.ndarray) -> np.ndarray:
        x_pred = np.asarray(x_pred, dtype=float)
        if self.intercept:
            return np.column_stack([np.ones(x_pred.shape[0]), x_pred])
        return x_pred

    def dim(self, n_predictors: int) -> int:
        return n_predictors + int(self.intercept)


def unit_contrast(j: int, dim: int) -> np.ndarray:
    c = np.zeros(dim)
    c[j] = 1.0
    return c


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptySource(f"{path}: file is empty") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumericCell(f"{path}:{lineno}: column {name!r} has non-numeric cell {cell!r}") from None
                if not math.isfinite(v):
                    raise NonNumericCell(f"{path}:{lineno}: column {name!r} is missing or non-finite")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise EmptySource(f"{path}: no data rows")
    return header, np.array(rows, dtype=float)


def _as_list(value, key, section) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [value]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"[{section}] {key} must be a list of column names")
    return list(value)


def _pick(header, data, names, path) -> np.ndarray:
    missing = [c for c in names if c not in header]
    if missing:
        raise MissingColumn(f"{path}: declared column(s) {missing} absent")
    return data[:, [header.index(c) for c in names]]


def load_manifest(manifest_path: str | os.PathLike) -> dict:
    with open(manifest_path, "rb") as fh:
        try:
            return tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{manifest_path}: {exc}") from None


def load_dataset(manifest_path, data_dir=None) -> tuple[FusedDataset, GlmSpec]:
    """Read a manifest and its CSVs into a validated dataset and model spec.

    Relative CSV paths resolve against ``data_dir`` (default: the manifest's
    directory). Files are only read.
    """
    manifest_path = Path(manifest_path)
    root = Path(data_dir) if data_dir is not None else manifest_path.parent
    man = load_manifest(manifest_path)
    for sec in ("lc", "uc"):
        if sec not in man:
            raise ConfigError(f"manifest lacks a [{sec}] section")
    model = man.get("model", {})

    lc = man["lc"]
    lc_path = root / lc["path"]
    header, data = _read_csv(lc_path)
    outcome = lc.get("outcome")
    if not outcome:
        raise ConfigError("[lc] outcome is required")
    if outcome not in header:
        raise MissingColumn(f"{lc_path}: outcome column {outcome!r} absent")
    cov_names = [h for h in header if h != outcome]
    declared = _as_list(lc.get("observed"), "observed", "lc")
    if declared:
        if set(declared) != set(cov_names):
            extra = sorted(set(declared) - set(cov_names))
            if extra:
                raise MissingColumn(f"{lc_path}: declared column(s) {extra} absent")
            raise ValidationError(f"{lc_path}: undeclared columns {sorted(set(cov_names) - set(declared))}")
        cov_names = declared
    idx = {c: j for j, c in enumerate(cov_names)}
    lc_x = _pick(header, data, cov_names, lc_path)
    lc_y = data[:, header.index(outcome)]

    def indices(names, section):
        bad = [c for c in names if c not in idx]
        if bad:
            raise MissingColumn(f"[{section}] references unknown covariate(s) {bad}")
        return sorted(idx[c] for c in names)

    omega0 = indices(_as_list(lc.get("omega"), "omega", "lc"), "lc")
    predictors = _as_list(model.get("predictors", lc.get("predictors")), "predictors", "model")
    pred_idx = [idx[c] for c in predictors] if predictors else list(range(len(cov_names)))
    if predictors:
        indices(predictors, "model")

    uc = man["uc"]
    uc_path = root / uc["path"]
    uh, ud = _read_csv(uc_path)
    if outcome in uh:
        raise ValidationError(f"{uc_path}: UC source must not carry the outcome column {outcome!r}")
    uc_x = _pick(uh, ud, cov_names, uc_path)

    lm_sec = man.get("lm", {})
    keys = sorted(lm_sec, key=lambda k: int(k))
    if [int(k) for k in keys] != list(range(1, len(keys) + 1)):
        raise ConfigError("LM sections must be numbered lm.1 .. lm.R")
    sources = []
    for k in keys:
        sec = lm_sec[k]
        name = f"lm.{k}"
        path = root / sec["path"]
        h, d = _read_csv(path)
        obs_names = _as_list(sec.get("observed"), "observed", name)
        if not obs_names:
            raise ConfigError(f"[{name}] observed is required")
        obs = indices(obs_names, name)
        om = indices(_as_list(sec.get("omega"), "omega", name), name)
        if not set(om) <= set(obs):
            raise AlignmentViolation(f"[{name}] omega {sorted(set(om) - set(obs))} not among observed columns")
        y_name = sec.get("outcome", outcome)
        if y_name not in h:
            raise MissingColumn(f"{path}: outcome column {y_name!r} absent")
        ordered = [cov_names[j] for j in obs]
        sources.append(
            LabeledMissingSource(
                observed=tuple(obs), omega=tuple(om), x=_pick(h, d, ordered, path),
                y=d[:, h.index(y_name)], name=name,
            )
        )

    ds = FusedDataset(
        covariate_names=tuple(cov_names), predictors=tuple(pred_idx), lc_x=lc_x, lc_y=lc_y,
        uc_x=uc_x, omega0=tuple(omega0), lm=tuple(sources), outcome_name=outcome,
    )
    missing_pred = set(ds.predictors) - set(range(ds.p))
    if missing_pred:
        raise MissingColumn(f"predictors {sorted(missing_pred)} not present")

    link = model.get("link", "identity")
    intercept = bool(model.get("intercept", True))
    contrast = model.get("contrast")
    if contrast is not None:
        contrast = np.asarray(contrast, dtype=float)
        dim = len(ds.predictors) + int(intercept)
        if contrast.shape != (dim,):
            raise ConfigError(f"contrast must have length {dim}")
        nrm = np.linalg.norm(contrast)
        if nrm == 0:
            raise ConfigError("contrast must be nonzero")
        contrast = contrast / nrm
    glm = GlmSpec(link=link, contrast=contrast, intercept=intercept)
    if link == "logit":
        for y in [ds.lc_y] + [s.y for s in ds.lm]:
            if not np.all((y == 0) | (y == 1)):
                raise ValidationError("logit link requires a 0/1 outcome")
    return ds, glm


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: Sequence[str], data: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow([_fmt(v) for v in row])


def save_dataset(ds: FusedDataset, directory, glm: GlmSpec | None = None) -> Path:
    """Write ``ds`` as CSVs plus ``manifest.toml``; returns the manifest path.

    Floats are written with ``repr`` so a reload reproduces every value exactly.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = list(ds.covariate_names)
    y = ds.outcome_name
    _write_csv(d / "lc.csv", names + [y], np.column_stack([ds.lc_x, ds.lc_y]))
    _write_csv(d / "uc.csv", names, ds.uc_x)

    def q(cols):
        return "[" + ", ".join(f'"{names[j]}"' for j in cols) + "]"

    lines = []
    if glm is not None:
        lines += ["[model]", f"predictors = {q(ds.predictors)}", f'link = "{glm.link}"',
                  f"intercept = {'true' if glm.intercept else 'false'}"]
        if glm.contrast is not None:
            lines.append("contrast = [" + ", ".join(_fmt(v) for v in glm.contrast) + "]")
        lines.append("")
    else:
        lines += ["[model]", f"predictors = {q(ds.predictors)}", ""]
    lines += ["[lc]", 'path = "lc.csv"', f'outcome = "{y}"', f"omega = {q(ds.omega0)}", ""]
    for r, src in enumerate(ds.lm, start=1):
        fname = f"lm{r}.csv"
        _write_csv(d / fname, [names[j] for j in src.observed] + [y], np.column_stack([src.x, src.y]))
        lines += [f"[lm.{r}]", f'path = "{fname}"', f'outcome = "{y}"', f"observed = {q(src.observed)}",
                  f"omega = {q(src.omega)}", ""]
    lines += ["[uc]", 'path = "uc.csv"', ""]
    path = d / "manifest.toml"
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


@dataclass
class OverlapDiagnostic:
    source: str
    ratio_min: float
    ratio_max: float
    n_flagged: int
    flagged: bool = field(init=False)

    def __post_init__(self):
        self.flagged = self.n_flagged > 0


def validate_overlap(ds: FusedDataset, tol: float = 0.01, K: int = 5, seed: int = 0) -> list[OverlapDiagnostic]:
    """Report the range of estimated density ratios per source.

    Ratios are estimated out-of-fold without clipping; any estimate outside
    ``[tol, 1/tol]`` is flagged. Advisory only; nothing here blocks estimation.
    """
    from .nuisance import fit_density_ratio, make_fold_plan

    plan = make_fold_plan(ds, K=K, seed=seed)
    out = []
    pairs = [(LC, ds.omega0)] + [(LM(r), ds.omega(r)) for r in range(1, ds.R + 1)]
    for kind, cols in pairs:
        model = fit_density_ratio(ds, kind, cols, plan, eps_clip=0.0)
        ratio = model.oof
        bad = int(np.sum((ratio < tol) | (ratio > 1.0 / tol)))
        out.append(OverlapDiagnostic(str(kind), float(ratio.min()), float(ratio.max()), bad))
    return out
