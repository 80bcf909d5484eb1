"""Three-stage fused estimator of a GLM contrast ``c'gamma`` on the UC population.

Stages:

1. ``fit_preliminary``: importance-weighted GLM fit on LC, then a Newton step on
   the debiased estimating equation; gives ``c'gamma_tilde`` and per-row
   influence terms.
2. ``calibrate_lm`` / ``fuse_lm``: control variates built from each
   blockwise-missing source, reweighted by a calibration family whose
   parameters minimize the plug-in variance (a finite-dimensional QP).
3. ``build_ss_refinement`` / ``fuse_ss``: a second control variate on the full
   covariates, calibrated the same way and centred with the unlabeled sample.

Every objective here is an exact quadratic in the calibration parameters
because the debiasing operators are linear smoothers: the operator is applied
to each basis column once and the columns are recombined.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .data import FusedDataset, GlmSpec, unit_contrast
from .errors import EmptyOverlap, IllConditioned, NonConvergence, SingularJacobian
from .glm import fit_glm
from .nuisance import (
    NuisanceConfig,
    NuisanceFit,
    _gauss_kernel,
    assign_folds,
    fit_conditional_mean,
    fit_nuisances,
    make_fold_plan,
    median_bandwidth,
)

FAMILIES = ("constant", "linear", "krr")
STRATEGIES = ("cm", "rm")
DEGENERATE_VAR = 1e-12
MAX_COND = 1e12
# Folds used to cross-fit the calibration coefficients. More folds than the
# nuisance plan keeps the efficiency loss of cross-fitting small at modest n.
CALIBRATION_FOLDS = 20


@dataclass
class EstimatorConfig:
    family: str = "linear"
    strategy: str = "cm"
    ci_level: float = 0.95
    one_step: bool = True
    control_learner: str = "poly2"
    ss_learner: str = "auto"
    ss_family: str | None = None  # defaults to ``family``
    z_max: int = 8
    m_centers: int = 200
    ridge: float = 1e-8
    newton_tol: float = 1e-10
    max_iter: int = 100
    krr_grid: tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.ss_family is not None and self.ss_family not in FAMILIES:
            raise ValueError(f"ss_family must be one of {FAMILIES}")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")


def _var(a):
    return np.var(a, axis=0)


def _cov(a, b=None):
    """(1/n) cross-covariance with columns of ``a`` (and ``b``)."""
    ac = a - a.mean(axis=0)
    bc = ac if b is None else b - b.mean(axis=0)
    return ac.T @ bc / a.shape[0]


# ---------------------------------------------------------------------------
# Stage 1: preliminary estimator
# ---------------------------------------------------------------------------


@dataclass
class PreliminaryEstimate:
    gamma_tilde: np.ndarray
    gamma_iw: np.ndarray
    jacobian: np.ndarray  # UC-averaged  gdot(gamma'A) A A'
    score_raw: np.ndarray  # per LC row: J^{-1} A (Y - g(gamma'A))
    score_rows: np.ndarray  # debiased transform of score_raw
    converged: bool
    newton_steps: int
    ee_norm: float  # norm of the debiased estimating equation at gamma_tilde

    def lc_only(self, c: np.ndarray) -> tuple[float, float]:
        n = self.score_rows.shape[0]
        return float(c @ self.gamma_tilde), float(np.sqrt(_var(self.score_rows @ c) / n))


def _design(ds: FusedDataset, glm: GlmSpec, x: np.ndarray) -> np.ndarray:
    return glm.design(x[:, list(ds.predictors)])


def debiased_equation(ds, glm, nuis: NuisanceFit, gamma):
    a = _design(ds, glm, ds.lc_x)
    eta = a @ gamma
    d = a * (ds.lc_y - glm.g(eta))[:, None]
    return nuis.op_lc.transform(d).mean(axis=0)


def _debiased_hessian(ds, glm, nuis, gamma):
    a = _design(ds, glm, ds.lc_x)
    q = a.shape[1]
    w = glm.gdot(a @ gamma)
    outer = (w[:, None, None] * a[:, :, None] * a[:, None, :]).reshape(a.shape[0], q * q)
    h = nuis.op_lc.transform(outer).mean(axis=0).reshape(q, q)
    return 0.5 * (h + h.T)


def fit_preliminary(ds: FusedDataset, glm: GlmSpec, nuis: NuisanceFit,
                    cfg: EstimatorConfig | None = None) -> PreliminaryEstimate:
    """Importance-weighted start, then Newton on the debiased equation."""
    cfg = cfg or EstimatorConfig()
    a = _design(ds, glm, ds.lc_x)
    y = ds.lc_y
    if glm.link == "logit" and not np.all((y == 0) | (y == 1)):
        raise ValueError("logit link requires a 0/1 outcome")
    gamma_iw = fit_glm(a, y, glm.link, weights=nuis.ratio_lc.oof, max_iter=cfg.max_iter)

    gamma = gamma_iw.copy()
    u = debiased_equation(ds, glm, nuis, gamma)
    scale0 = max(1.0, float(np.linalg.norm(u)))
    steps = 0
    max_steps = 1 if cfg.one_step else cfg.max_iter
    while steps < max_steps:
        h = _debiased_hessian(ds, glm, nuis, gamma)
        try:
            step = np.linalg.solve(h, u)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian("debiased Hessian is singular") from exc
        if not np.all(np.isfinite(step)) or np.linalg.norm(step) > 1e6 * (1 + np.linalg.norm(gamma)):
            raise NonConvergence("Newton step on the debiased equation diverged")
        gamma = gamma + step
        steps += 1
        u = debiased_equation(ds, glm, nuis, gamma)
        if np.linalg.norm(u) <= cfg.newton_tol * scale0:
            break
    ee_norm = float(np.linalg.norm(u))
    converged = ee_norm <= max(cfg.newton_tol * scale0, 1e-8)
    if not cfg.one_step and not converged:
        raise NonConvergence(f"debiased equation not solved in {cfg.max_iter} Newton steps")

    a_uc = _design(ds, glm, ds.uc_x)
    w = glm.gdot(a_uc @ gamma)
    jac = (a_uc * w[:, None]).T @ a_uc / a_uc.shape[0]
    jac = 0.5 * (jac + jac.T)
    if np.linalg.eigvalsh(jac).min() <= 1e-10:
        raise SingularJacobian("UC Jacobian is not positive definite")
    resid = y - glm.g(a @ gamma)
    score_raw = np.linalg.solve(jac, (a * resid[:, None]).T).T
    score_rows = nuis.op_lc.transform(score_raw)
    return PreliminaryEstimate(gamma, gamma_iw, jac, score_raw, score_rows, converged, steps, ee_norm)


# ---------------------------------------------------------------------------
# Calibration families
# ---------------------------------------------------------------------------


@dataclass
class CalibrationFamily:
    """Reweighting functions ``w(Z; delta) = basis(Z) @ delta``.

    ``basis`` always starts with a constant column, so ``delta = 0`` gives
    ``w = 0`` and ``delta = e_1`` gives ``w = 1`` in every family.
    """

    kind: str
    z_names: tuple[str, ...] = ()
    z_mean: np.ndarray | None = None
    z_sd: np.ndarray | None = None
    centers: np.ndarray | None = None
    bandwidth: float = 1.0

    @classmethod
    def fit(cls, kind, z_ref, names=(), m_centers=200, seed=0):
        if kind not in FAMILIES:
            raise ValueError(f"unknown calibration family {kind!r}")
        z_ref = np.asarray(z_ref, dtype=float).reshape(len(z_ref), -1)
        if kind == "constant" or z_ref.shape[1] == 0:
            return cls("constant" if z_ref.shape[1] == 0 else kind, tuple(names))
        mu = z_ref.mean(axis=0)
        sd = z_ref.std(axis=0)
        sd[sd < 1e-12] = 1.0
        fam = cls(kind, tuple(names), mu, sd)
        if kind == "krr":
            zs = (z_ref - mu) / sd
            m = min(m_centers, zs.shape[0])
            rng = np.random.default_rng([seed, 31337])
            fam.centers = zs[np.sort(rng.choice(zs.shape[0], m, replace=False))]
            fam.bandwidth = median_bandwidth(fam.centers)
        return fam

    def basis(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(len(z), -1)
        one = np.ones((z.shape[0], 1))
        if self.kind == "constant":
            return one
        zs = (z - self.z_mean) / self.z_sd
        if self.kind == "linear":
            return np.hstack([one, zs])
        return np.hstack([one, _gauss_kernel(zs, self.centers, self.bandwidth)])

    @property
    def dim(self) -> int:
        if self.kind == "constant":
            return 1
        if self.kind == "linear":
            return 1 + len(self.z_mean)
        return 1 + len(self.centers)

    def one(self) -> np.ndarray:
        d = np.zeros(self.dim)
        d[0] = 1.0
        return d

    def penalty_mask(self) -> np.ndarray:
        m = np.zeros(self.dim)
        if self.kind == "krr":
            m[1:] = 1.0
        return m


def default_z_columns(ds: FusedDataset, r: int, z_max: int = 8) -> tuple[list[int], bool]:
    """``X_{Gamma_r & A}`` plus Y, capped at ``z_max`` columns by LC variance.

    Returns covariate indices and whether Y is included.
    """
    src = ds.lm[r - 1]
    cols = [j for j in src.observed if j in ds.predictors]
    items = [(float(np.var(ds.lc_x[:, j])), j) for j in cols]
    items.append((float(np.var(ds.lc_y)), -1))
    items.sort(key=lambda t: (-t[0], t[1]))
    keep = items[:z_max]
    x_cols = sorted(j for _, j in keep if j >= 0)
    return x_cols, any(j < 0 for _, j in keep)


# ---------------------------------------------------------------------------
# Stage 2: control variates from blockwise-missing sources
# ---------------------------------------------------------------------------


@dataclass
class ControlFunction:
    """Values of one source's control function on LC rows and on LM_r rows."""

    r: int
    strategy: str
    lc: np.ndarray
    lm: np.ndarray
    factor: float


def _lm_inputs(ds, r):
    """``(X_Gamma_r, Y)`` with the model covariates and Y leading; returns the anchor count.

    A quadratic learner on many auxiliaries keeps only products that involve
    these leading columns (more than eight inputs in total).
    """
    src = ds.lm[r - 1]
    lead = [j for j in src.observed if j in ds.predictors]
    rest = [j for j in src.observed if j not in ds.predictors]
    x_lc = np.column_stack([ds.lc_x[:, lead], ds.lc_y, ds.lc_x[:, rest]])
    x_lm = np.column_stack([src.columns(lead), src.y, src.columns(rest)])
    anchors = len(lead) + 1 if x_lc.shape[1] > 8 else None
    return x_lc, x_lm, anchors


def build_control_variate(ds: FusedDataset, pre: PreliminaryEstimate, r: int, c: np.ndarray,
                          glm: GlmSpec, nuis: NuisanceFit, strategy: str = "cm",
                          learner: str = "poly2") -> ControlFunction:
    """Cross-fitted control function of ``(X_{Gamma_r}, Y)`` for source r.

    ``cm`` regresses ``c'S`` on ``(X_{Gamma_r}, Y)``; ``rm`` projects it on the
    score of a reduced GLM using ``X_{Gamma_r & A}`` only. Both are scaled by
    ``rho_r / (1 + rho_r)``.
    """
    rho = ds.rho[r - 1]
    factor = rho / (1.0 + rho)
    plan = nuis.plan
    f_lc, f_lm = plan.lc, plan.lm[r - 1]
    target = pre.score_raw @ c
    if strategy == "cm":
        x_lc, x_lm, anchors = _lm_inputs(ds, r)
        model = fit_conditional_mean(x_lc, target, f_lc, learner, seed=plan.seed + 17 * r, anchors=anchors)
        return ControlFunction(r, strategy, factor * model.oof, factor * model.predict(x_lm, f_lm), factor)
    if strategy != "rm":
        raise ValueError(f"unknown strategy {strategy!r}")
    src = ds.lm[r - 1]
    shared = [j for j in ds.predictors if j in src.observed]
    if not shared:
        raise EmptyOverlap(f"source {r} observes none of the target predictors")
    a_lc = glm.design(ds.lc_x[:, shared])
    a_lm = glm.design(src.columns(shared))
    u_lc = np.empty_like(a_lc)
    u_lm = np.empty_like(a_lm)
    for k in range(plan.K):
        tr = f_lc != k
        g_red = fit_glm(a_lc[tr], ds.lc_y[tr], glm.link)
        te, tm = f_lc == k, f_lm == k
        u_lc[te] = a_lc[te] * (ds.lc_y[te] - glm.g(a_lc[te] @ g_red))[:, None]
        u_lm[tm] = a_lm[tm] * (src.y[tm] - glm.g(a_lm[tm] @ g_red))[:, None]
    model = fit_conditional_mean(u_lc, target, f_lc, "linear", seed=plan.seed + 17 * r)
    return ControlFunction(r, strategy, factor * model.oof, factor * model.predict(u_lm, f_lm), factor)


@dataclass
class SourceBlock:
    r: int
    family: CalibrationFamily
    basis_lc: np.ndarray  # phi * psi(Z) on LC rows
    basis_lm: np.ndarray  # on LM_r rows
    v: np.ndarray  # debiased LC transform of basis_lc
    w: np.ndarray  # debiased LM_r transform of basis_lm
    rho: float


@dataclass
class ControlVariateSet:
    """Calibrated control variates for one contrast.

    ``delta`` is the stacked calibration vector over ``blocks``; entries of
    sources outside ``active`` are zero.
    """

    u: np.ndarray  # debiased c'S on LC rows
    s_raw: np.ndarray  # c'S on LC rows
    blocks: list[SourceBlock]
    active: tuple[int, ...]
    delta: np.ndarray
    q_value: float
    penalty: np.ndarray
    strategy: str
    dropped: np.ndarray
    # Cross-fitted calibration: row k solves the QP without fold k and is
    # applied to fold-k rows only when forming the point estimate.
    delta_folds: np.ndarray | None = None
    lc_folds: np.ndarray | None = None
    lm_folds: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.u.shape[0]

    def slices(self) -> dict[int, slice]:
        out, start = {}, 0
        for b in self.blocks:
            out[b.r] = slice(start, start + b.family.dim)
            start += b.family.dim
        return out

    def _restrict(self, delta, active):
        d = np.array(delta, dtype=float)
        sl = self.slices()
        for b in self.blocks:
            if b.r not in active:
                d[sl[b.r]] = 0.0
        return d

    def objective(self, delta, active=None) -> float:
        """Plug-in variance of sqrt(n)(beta_1(delta) - target)."""
        active = self.active if active is None else tuple(active)
        d = self._restrict(delta, active)
        sl = self.slices()
        resid = self.u.copy()
        extra = 0.0
        for b in self.blocks:
            if b.r not in active:
                continue
            dr = d[sl[b.r]]
            resid = resid - b.v @ dr
            extra += float(_var(b.w @ dr)) / b.rho
        return float(_var(resid)) + extra

    def penalized_objective(self, delta, active=None) -> float:
        d = self._restrict(delta, self.active if active is None else tuple(active))
        return self.objective(d, active) + float(np.sum(self.penalty * d**2))

    def zero(self) -> np.ndarray:
        return np.zeros_like(self.delta)

    def ones(self) -> np.ndarray:
        d = np.zeros_like(self.delta)
        for b in self.blocks:
            d[self.slices()[b.r]] = b.family.one()
        return self._restrict(d, self.active)

    def augmentation(self, delta=None, active=None) -> dict[int, float]:
        """Per-source ``mean_LM(debiased phi w) - mean_LC(debiased phi w)``.

        Without an explicit ``delta`` the cross-fitted calibration is used, so
        no row is weighted by a coefficient estimated from that same row.
        """
        active = self.active if active is None else tuple(active)
        sl = self.slices()
        if delta is None and self.delta_folds is not None:
            out = {}
            for b in self.blocks:
                if b.r not in active:
                    continue
                dk = self.delta_folds[:, sl[b.r]]
                lm = np.einsum("ij,ij->i", b.w, dk[self.lm_folds[b.r]])
                lc = np.einsum("ij,ij->i", b.v, dk[self.lc_folds])
                out[b.r] = float(np.mean(lm) - np.mean(lc))
            return out
        d = self.delta if delta is None else np.asarray(delta, float)
        return {
            b.r: float(np.mean(b.w @ d[sl[b.r]]) - np.mean(b.v @ d[sl[b.r]]))
            for b in self.blocks if b.r in active
        }

    def control_values(self, r: int, delta=None) -> tuple[np.ndarray, np.ndarray]:
        """Calibrated control ``phi * w(Z)`` on LC rows and LM_r rows."""
        d = self.delta if delta is None else np.asarray(delta, float)
        b = next(b for b in self.blocks if b.r == r)
        dr = d[self.slices()[r]]
        return b.basis_lc @ dr, b.basis_lm @ dr

    def s1_raw(self) -> np.ndarray:
        """``c'S - sum_r phi_r w_r`` per LC row (untransformed)."""
        out = self.s_raw.copy()
        for r in self.active:
            out -= self.control_values(r)[0]
        return out

    def s1_debiased(self) -> np.ndarray:
        d = self.delta
        sl = self.slices()
        out = self.u.copy()
        for b in self.blocks:
            if b.r in self.active:
                out -= b.v @ d[sl[b.r]]
        return out

    def lm_variance(self) -> float:
        sl = self.slices()
        return sum(float(_var(b.w @ self.delta[sl[b.r]])) / b.rho for b in self.blocks if b.r in self.active)


def make_source_blocks(ds: FusedDataset, controls: Sequence[ControlFunction], nuis: NuisanceFit,
                       family: str, cfg: EstimatorConfig) -> list[SourceBlock]:
    blocks = []
    for cf in controls:
        r = cf.r
        src = ds.lm[r - 1]
        x_cols, with_y = default_z_columns(ds, r, cfg.z_max)
        z_lc = ds.lc_x[:, x_cols]
        z_lm = src.columns(x_cols)
        names = [ds.covariate_names[j] for j in x_cols]
        if with_y:
            z_lc = np.column_stack([z_lc, ds.lc_y])
            z_lm = np.column_stack([z_lm, src.y])
            names.append(ds.outcome_name)
        fam = CalibrationFamily.fit(family, z_lc, names, cfg.m_centers, seed=nuis.plan.seed + r)
        b_lc = cf.lc[:, None] * fam.basis(z_lc)
        b_lm = cf.lm[:, None] * fam.basis(z_lm)
        blocks.append(SourceBlock(r, fam, b_lc, b_lm, nuis.op_lc.transform(b_lc),
                                  nuis.op_lm[r - 1].transform(b_lm), ds.rho[r - 1]))
    return blocks


def _solve_qp(gram, rhs, penalty, ridge):
    """argmin  d'(G + diag(penalty))d - 2 rhs'd  over the non-degenerate columns."""
    dim = gram.shape[0]
    delta = np.zeros(dim)
    keep = np.diag(gram) >= DEGENERATE_VAR
    if not keep.any():
        return delta, ~keep
    g = gram[np.ix_(keep, keep)] + np.diag(penalty[keep]) + ridge * np.eye(keep.sum())
    cond = np.linalg.cond(g)
    if not np.isfinite(cond) or cond > MAX_COND:
        raise IllConditioned(f"calibration system condition number {cond:.3g} exceeds {MAX_COND:.0e}")
    delta[keep] = np.linalg.solve(g, rhs[keep])
    return delta, ~keep


def _gram(u, vs, ws, rhos, rows_lc=None, rows_lm=None):
    v = np.hstack(vs)
    uu = u
    if rows_lc is not None:
        v, uu = v[rows_lc], u[rows_lc]
    gram = _cov(v)
    start = 0
    for i, (w, rho) in enumerate(zip(ws, rhos)):
        ww = w if rows_lm is None else w[rows_lm[i]]
        k = w.shape[1]
        gram[start : start + k, start : start + k] += _cov(ww) / rho
        start += k
    return gram, _cov(v, uu[:, None]).ravel()


def _leave_fold_out(x: np.ndarray, labels: np.ndarray, K: int):
    """Per-fold ``(count, sum, cross-product)`` of ``x`` over rows outside the fold."""
    n = x.shape[0]
    counts = np.bincount(labels, minlength=K).astype(float)
    sums = np.zeros((K, x.shape[1]))
    np.add.at(sums, labels, x)
    cross = np.zeros((K, x.shape[1], x.shape[1]))
    for k in range(K):
        xk = x[labels == k]
        cross[k] = xk.T @ xk
    tot_s, tot_c = x.sum(axis=0), x.T @ x
    return n - counts, tot_s - sums, tot_c - cross


def _cov_from(count, s, c):
    m = s / count
    return c / count - np.outer(m, m)


def _crossfit_solutions(u, vs, ws, rhos, lc_labels, lm_labels, K, penalty, ridge):
    """QP solutions with each calibration fold left out (rows ``k`` of the result)."""
    dims = [v.shape[1] for v in vs]
    total = sum(dims)
    lc = _leave_fold_out(np.column_stack([np.hstack(vs), u]), lc_labels, K)
    lm = [_leave_fold_out(w, lab, K) for w, lab in zip(ws, lm_labels)]
    out = np.zeros((K, total))
    for k in range(K):
        full = _cov_from(lc[0][k], lc[1][k], lc[2][k])
        gram, rhs = full[:total, :total].copy(), full[:total, total]
        start = 0
        for (cnt, s, c), rho, d in zip(lm, rhos, dims):
            gram[start : start + d, start : start + d] += _cov_from(cnt[k], s[k], c[k]) / rho
            start += d
        out[k] = _solve_qp(gram, rhs, penalty, ridge)[0]
    return out


def calibrate_lm(ds: FusedDataset, pre: PreliminaryEstimate, c: np.ndarray,
                 controls: Sequence[ControlFunction], nuis: NuisanceFit, family: str = "linear",
                 cfg: EstimatorConfig | None = None, active: Sequence[int] | None = None,
                 blocks: list[SourceBlock] | None = None) -> ControlVariateSet:
    """Minimize the plug-in variance jointly over all active sources."""
    cfg = cfg or EstimatorConfig()
    if blocks is None:
        blocks = make_source_blocks(ds, controls, nuis, family, cfg)
    active = tuple(b.r for b in blocks) if active is None else tuple(sorted(active))
    plan = nuis.plan
    u = pre.score_rows @ c
    s_raw = pre.score_raw @ c
    total = sum(b.family.dim for b in blocks)
    act_blocks = [b for b in blocks if b.r in active]
    mask = np.concatenate([b.family.penalty_mask() for b in blocks]) if blocks else np.zeros(0)
    act_mask = np.concatenate([np.full(b.family.dim, b.r in active) for b in blocks]) if blocks else np.zeros(0, bool)
    penalty = np.zeros(total)
    delta = np.zeros(total)
    dropped = np.zeros(total, dtype=bool)
    if act_blocks:
        vs = [b.v for b in act_blocks]
        ws = [b.w for b in act_blocks]
        rhos = [b.rho for b in act_blocks]
        gram, rhs = _gram(u, vs, ws, rhos)
        amask = mask[act_mask]
        if amask.any():
            scale = np.zeros_like(amask)
            start = 0
            for b in act_blocks:
                k = b.family.dim
                diag = np.diag(gram)[start : start + k]
                scale[start : start + k] = float(np.mean(diag[1:])) if k > 1 else 0.0
                start += k
            mult = _select_krr_penalty(ds, nuis, u, act_blocks, gram, rhs, amask * scale, cfg)
            pen_act = mult * amask * scale
        else:
            pen_act = np.zeros_like(amask)
        d_act, drop_act = _solve_qp(gram, rhs, pen_act, cfg.ridge)
        delta[act_mask] = d_act
        penalty[act_mask] = pen_act
        dropped[act_mask] = drop_act
    n_folds = min(CALIBRATION_FOLDS, ds.n, *(ds.lm[b.r - 1].n for b in blocks))
    lc_lab = assign_folds(ds.n, n_folds, plan.seed, 101)
    lm_lab = {b.r: assign_folds(ds.lm[b.r - 1].n, n_folds, plan.seed, 101 + b.r) for b in blocks}
    folds = np.zeros((n_folds, total))
    if act_blocks:
        folds[:, act_mask] = _crossfit_solutions(u, vs, ws, rhos, lc_lab, [lm_lab[b.r] for b in act_blocks],
                                                 n_folds, pen_act, cfg.ridge)
    cv = ControlVariateSet(u, s_raw, blocks, active, delta, 0.0, penalty, controls[0].strategy if controls else "cm",
                           dropped, folds, lc_lab, lm_lab)
    cv.q_value = cv.objective(delta)
    return cv


def _select_krr_penalty(ds, nuis, u, blocks, gram, rhs, base, cfg):
    """Pick the penalty multiplier by held-out plug-in variance across folds."""
    n = ds.n
    grid = [g / np.sqrt(n) for g in cfg.krr_grid]
    plan = nuis.plan
    vs = [b.v for b in blocks]
    ws = [b.w for b in blocks]
    rhos = [b.rho for b in blocks]
    lm_folds = [plan.lm[b.r - 1] for b in blocks]
    scores = np.zeros(len(grid))
    v_all = np.hstack(vs)
    for k in range(plan.K):
        tr_lc = plan.lc != k
        g_tr, r_tr = _gram(u, vs, ws, rhos, tr_lc, [f != k for f in lm_folds])
        te_lc = plan.lc == k
        for i, lam in enumerate(grid):
            try:
                d, _ = _solve_qp(g_tr, r_tr, lam * base, cfg.ridge)
            except IllConditioned:
                scores[i] = np.inf
                continue
            val = float(_var(u[te_lc] - v_all[te_lc] @ d))
            start = 0
            for w, rho, f in zip(ws, rhos, lm_folds):
                kk = w.shape[1]
                val += float(_var(w[f == k] @ d[start : start + kk])) / rho
                start += kk
            scores[i] += val
    return grid[int(np.argmin(scores))]


@dataclass
class LmFusion:
    beta1: float
    se1: float
    v_terms: dict[int, float]
    active: tuple[int, ...]


def fuse_lm(pre: PreliminaryEstimate, cv: ControlVariateSet, c: np.ndarray,
            active: Sequence[int] | None = None) -> LmFusion:
    active = cv.active if active is None else tuple(sorted(active))
    beta0, _ = pre.lc_only(c)
    v_terms = cv.augmentation(None, active)
    q = cv.objective(cv.delta, active)
    return LmFusion(beta0 + sum(v_terms.values()), float(np.sqrt(q / cv.n)), v_terms, active)


# ---------------------------------------------------------------------------
# Stage 3: semi-supervised refinement
# ---------------------------------------------------------------------------


@dataclass
class SsRefinement:
    phi2_lc: np.ndarray
    phi2_uc: np.ndarray
    family: CalibrationFamily
    basis_lc: np.ndarray
    basis_uc_mean: np.ndarray
    p: np.ndarray  # debiased transform of basis_lc
    m1: np.ndarray  # debiased S1 on LC rows
    const: float  # LM-side variance carried over from stage 2
    zeta: np.ndarray
    t_value: float
    penalty: np.ndarray
    zeta_folds: np.ndarray | None = None
    lc_folds: np.ndarray | None = None

    def objective(self, zeta) -> float:
        return float(_var(self.m1 - self.p @ np.asarray(zeta, float))) + self.const

    def penalized_objective(self, zeta) -> float:
        z = np.asarray(zeta, float)
        return self.objective(z) + float(np.sum(self.penalty * z**2))

    def shift(self, zeta=None) -> float:
        """``mean_UC(phi2 h) - mean_LC(debiased phi2 h)``, cross-fitted by default."""
        if zeta is None and self.zeta_folds is not None:
            # UC rows never enter the fit of zeta, so pair the full UC mean with
            # the fold-size weighted average of the fold solutions.
            share = np.bincount(self.lc_folds, minlength=self.zeta_folds.shape[0]) / self.p.shape[0]
            lc = np.einsum("ij,ij->i", self.p, self.zeta_folds[self.lc_folds])
            return float(self.basis_uc_mean @ (share @ self.zeta_folds) - np.mean(lc))
        z = self.zeta if zeta is None else np.asarray(zeta, float)
        return float(self.basis_uc_mean @ z - np.mean(self.p @ z))


def _ss_columns(ds: FusedDataset, z_max: int) -> list[int]:
    cols = sorted(ds.predictors, key=lambda j: (-float(np.var(ds.lc_x[:, j])), j))[:z_max]
    return sorted(cols)


def build_ss_refinement(ds: FusedDataset, cv: ControlVariateSet, nuis: NuisanceFit, family: str = "linear",
                        cfg: EstimatorConfig | None = None) -> SsRefinement:
    """Control variate ``phi2(X) h(X; zeta)`` with ``phi2 ~ E_LC[S1 | X]``."""
    cfg = cfg or EstimatorConfig()
    plan = nuis.plan
    s1 = cv.s1_raw()
    learner, anchors = cfg.ss_learner, None
    # Model covariates go first so that anchored products pair them with every column.
    order = list(ds.predictors) + [j for j in range(ds.p) if j not in ds.predictors]
    if learner == "auto":
        # Scores are A times a residual, so products with the model covariates
        # carry the signal; the full quadratic expansion is kept for small p.
        learner = "poly2"
        anchors = None if ds.p <= 8 else min(len(ds.predictors), cfg.z_max)
    model = fit_conditional_mean(ds.lc_x[:, order], s1, plan.lc, learner, seed=plan.seed + 997, anchors=anchors)
    phi2_lc = model.oof
    phi2_uc = model.predict(ds.uc_x[:, order], plan.uc)
    cols = _ss_columns(ds, cfg.z_max)
    fam = CalibrationFamily.fit(family, ds.lc_x[:, cols], [ds.covariate_names[j] for j in cols],
                                cfg.m_centers, seed=plan.seed + 4242)
    b_lc = phi2_lc[:, None] * fam.basis(ds.lc_x[:, cols])
    b_uc_mean = np.zeros(fam.dim)
    for start in range(0, ds.N, 8192):
        sl = slice(start, start + 8192)
        b_uc_mean += (phi2_uc[sl, None] * fam.basis(ds.uc_x[sl][:, cols])).sum(axis=0)
    b_uc_mean /= ds.N
    p = nuis.op_lc.transform(b_lc)
    m1 = cv.s1_debiased()
    const = cv.lm_variance()
    gram = _cov(p)
    rhs = _cov(p, m1[:, None]).ravel()
    pen = np.zeros(fam.dim)
    if fam.kind == "krr":
        mask = fam.penalty_mask()
        scale = float(np.mean(np.diag(gram)[1:]))
        mult = _select_ss_penalty(p, m1, plan, mask * scale, cfg)
        pen = mult * mask * scale
    zeta, _ = _solve_qp(gram, rhs, pen, cfg.ridge)
    n_folds = min(CALIBRATION_FOLDS, ds.n)
    labels = assign_folds(ds.n, n_folds, plan.seed, 211)
    zeta_folds = _crossfit_solutions(m1, [p], [], [], labels, [], n_folds, pen, cfg.ridge)
    ss = SsRefinement(phi2_lc, phi2_uc, fam, b_lc, b_uc_mean, p, m1, const, zeta, 0.0, pen, zeta_folds, labels)
    ss.t_value = ss.objective(zeta)
    return ss


def _select_ss_penalty(p, m1, plan, base, cfg):
    grid = [g / np.sqrt(p.shape[0]) for g in cfg.krr_grid]
    scores = np.zeros(len(grid))
    for k in range(plan.K):
        tr, te = plan.lc != k, plan.lc == k
        gram = _cov(p[tr])
        rhs = _cov(p[tr], m1[tr, None]).ravel()
        for i, lam in enumerate(grid):
            try:
                z, _ = _solve_qp(gram, rhs, lam * base, cfg.ridge)
            except IllConditioned:
                scores[i] = np.inf
                continue
            scores[i] += float(_var(m1[te] - p[te] @ z))
    return grid[int(np.argmin(scores))]


# ---------------------------------------------------------------------------
# Reports and orchestration
# ---------------------------------------------------------------------------


@dataclass
class EstimateReport:
    contrast: np.ndarray
    beta_lc_only: float
    beta1: float
    beta2: float
    se_lc_only: float
    se1: float
    se2: float
    ci_level: float
    ci: tuple[float, float]
    v_terms: dict[int, float]
    selected: tuple[int, ...]
    beta_dagger: float
    gamma_tilde: np.ndarray
    q_value: float
    t_value: float
    screening: object | None = None
    notes: tuple[str, ...] = ()

    def interval(self, stage: str = "beta2") -> tuple[float, float]:
        est = {"lc_only": self.beta_lc_only, "beta1": self.beta1, "beta2": self.beta2}[stage]
        se = {"lc_only": self.se_lc_only, "beta1": self.se1, "beta2": self.se2}[stage]
        z = float(norm.ppf(0.5 + self.ci_level / 2.0))
        return est - z * se, est + z * se


def fuse_ss(pre: PreliminaryEstimate, cv: ControlVariateSet, ss: SsRefinement, c: np.ndarray,
            ci_level: float = 0.95, screening=None, notes=()) -> EstimateReport:
    lm = fuse_lm(pre, cv, c)
    beta0, se0 = pre.lc_only(c)
    beta2 = lm.beta1 + ss.shift()
    se2 = float(np.sqrt(ss.t_value / cv.n))
    z = float(norm.ppf(0.5 + ci_level / 2.0))
    dagger = beta0 + sum(cv.augmentation(cv.ones()).values())
    return EstimateReport(
        contrast=np.asarray(c, float), beta_lc_only=beta0, beta1=lm.beta1, beta2=beta2,
        se_lc_only=se0, se1=lm.se1, se2=se2, ci_level=ci_level, ci=(beta2 - z * se2, beta2 + z * se2),
        v_terms=lm.v_terms, selected=cv.active, beta_dagger=dagger, gamma_tilde=pre.gamma_tilde,
        q_value=cv.q_value, t_value=ss.t_value, screening=screening, notes=tuple(notes),
    )


@dataclass
class PipelineConfig:
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    screening_enabled: bool = True
    screening_epsilon: float = 0.02
    screening_basis: str = "quadratic"
    recalibrate: bool = True
    seed: int = 0


class FusionContext:
    """Shared stages for one dataset: fold plan, nuisances, preliminary fit.

    Per-contrast work (controls, calibration, screening, SS step) is cheap
    relative to this and can be repeated for several configurations.
    """

    def __init__(self, ds: FusedDataset, glm: GlmSpec, config: PipelineConfig | None = None, stage=None):
        self.ds = ds
        self.glm = glm
        self.config = config or PipelineConfig()
        self.stage = stage or (lambda name: None)  # progress hook; the CLI uses it to name failing stages
        self.stage("nuisances")
        plan = make_fold_plan(ds, K=self.config.nuisance.K, seed=self.config.seed)
        self.nuis = fit_nuisances(ds, plan, self.config.nuisance)
        self.stage("preliminary")
        self.pre = fit_preliminary(ds, glm, self.nuis, self.config.estimator)
        self._controls: dict = {}

    @property
    def dim(self) -> int:
        return self.glm.dim(len(self.ds.predictors))

    def controls(self, c, strategy=None) -> list[ControlFunction]:
        cfg = self.config.estimator
        strategy = strategy or cfg.strategy
        key = (tuple(np.round(c, 15)), strategy)
        if key not in self._controls:
            self.stage("control variates")
            self._controls[key] = [
                build_control_variate(self.ds, self.pre, r, c, self.glm, self.nuis, strategy, cfg.control_learner)
                for r in range(1, self.ds.R + 1)
            ]
        return self._controls[key]

    def calibrate(self, c, family=None, strategy=None, active=None) -> ControlVariateSet:
        cfg = self.config.estimator
        family = family or cfg.family
        ctrl = self.controls(c, strategy)
        self.stage("calibrate")
        return calibrate_lm(self.ds, self.pre, c, ctrl, self.nuis, family, cfg, active)

    def screen(self, cv: ControlVariateSet):
        from .screening import screen_sources

        sc = self.config
        self.stage("screen")
        return screen_sources(self.ds, cv, self.nuis, basis=sc.screening_basis, epsilon=sc.screening_epsilon)

    def estimate(self, c, family=None, strategy=None, ss_family=None, screening=None,
                 recalibrate=None, active=None) -> EstimateReport:
        """Full pipeline for one contrast."""
        cfg = self.config
        family = family or cfg.estimator.family
        ss_family = ss_family or cfg.estimator.ss_family or family
        screening = cfg.screening_enabled if screening is None else screening
        recalibrate = cfg.recalibrate if recalibrate is None else recalibrate
        c = np.asarray(c, float)
        notes = []
        cv = self.calibrate(c, family, strategy, active)
        report = None
        if self.ds.R and screening:
            report = self.screen(cv)
            sel = tuple(report.selected)
            if recalibrate:
                self.stage("re-calibrate")
                cv = calibrate_lm(self.ds, self.pre, c, self.controls(c, strategy), self.nuis, family,
                                  cfg.estimator, sel, blocks=cv.blocks)
            else:
                cv = replace(cv, active=sel)
                cv.q_value = cv.objective(cv.delta)
        elif self.ds.R:
            notes.append("screening skipped")
        self.stage("SS refinement")
        ss = build_ss_refinement(self.ds, cv, self.nuis, ss_family, cfg.estimator)
        self.stage("fuse")
        return fuse_ss(self.pre, cv, ss, c, cfg.estimator.ci_level, report, notes)


def estimate_full_vector(ds: FusedDataset, glm: GlmSpec, contrasts=None, config: PipelineConfig | None = None,
                         context: FusionContext | None = None) -> list[EstimateReport]:
    """One report per contrast (default: every coordinate), sharing stage 1."""
    ctx = context or FusionContext(ds, glm, config)
    if contrasts is None:
        contrasts = [unit_contrast(j, ctx.dim) for j in range(ctx.dim)]
    return [ctx.estimate(np.asarray(c, float)) for c in contrasts]
