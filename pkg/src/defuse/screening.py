"""Debiased mean-squared-discrepancy screening of blockwise-missing sources.

For source r the calibrated control ``v = phi_r w_r(Z_r; delta_r)`` should have
the same conditional mean given ``X_{Omega_r}`` in LM_r as in LC when the
source is aligned. The statistic

    Delta_r = max { L(h) : h = theta'psi(X_{Omega_r}), E_UC[h^2] <= 1 }

with ``L`` a debiased estimate of ``E_UC[h (m_r - m_ref)]`` has a closed form
because ``L`` is linear in ``theta``. Sources with ``Delta_r >= tau`` are
dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FusedDataset
from .errors import SingularNormalization
from .nuisance import ConditionalMeanModel, NuisanceFit, fit_conditional_mean

BASES = ("constant", "linear", "quadratic")
MAX_BASIS = 15
SIGMA_RIDGE = 1e-10


@dataclass
class DiscrepancyBasis:
    """Fixed basis ``psi_1 = 1, psi_2, ...`` on UC-standardized ``X_{Omega_r}``."""

    kind: str
    columns: tuple[int, ...]
    mu: np.ndarray
    sd: np.ndarray
    terms: tuple[tuple[int, ...], ...]  # () constant, (i,) linear, (i, j) product
    sigma: np.ndarray | None = None

    @classmethod
    def fit(cls, kind: str, columns, x_uc: np.ndarray, max_dim: int = MAX_BASIS) -> "DiscrepancyBasis":
        if kind not in BASES:
            raise ValueError(f"screening basis must be one of {BASES}")
        columns = tuple(columns)
        z = np.asarray(x_uc, float)[:, list(columns)]
        mu, sd = z.mean(axis=0), z.std(axis=0)
        sd[sd < 1e-12] = 1.0
        k = len(columns)
        terms: list[tuple[int, ...]] = [()]
        if kind != "constant":
            terms += [(i,) for i in range(k)]
        if kind == "quadratic":
            terms += [(i, i) for i in range(k)]
            terms += [(i, j) for i in range(k) for j in range(i + 1, k)]
        basis = cls(kind, columns, mu, sd, tuple(terms[:max_dim]))
        psi = basis.evaluate(np.asarray(x_uc, float))
        basis.sigma = psi.T @ psi / psi.shape[0] + SIGMA_RIDGE * np.eye(basis.d)
        return basis

    @property
    def d(self) -> int:
        return len(self.terms)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Basis matrix for rows of the full covariate matrix ``x``."""
        z = (np.asarray(x, float)[:, list(self.columns)] - self.mu) / self.sd
        out = np.ones((z.shape[0], self.d))
        for j, t in enumerate(self.terms):
            for i in t:
                out[:, j] *= z[:, i]
        return out


def threshold(d: int, n: int, epsilon: float = 0.02) -> float:
    """``tau = (d / n) ** (1/2 - epsilon)``."""
    if not 0.0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 1/2)")
    return float((d / n) ** (0.5 - epsilon))


@dataclass
class DiscrepancyFit:
    """Cross-fitted conditional means of the control and their evaluations."""

    r: int
    general: bool  # True when the two-stage reference fit was used
    m_r: ConditionalMeanModel
    m_ref: ConditionalMeanModel
    v_lc: np.ndarray
    v_lm: np.ndarray
    m_r_lm: np.ndarray  # out-of-fold m_r on LM_r rows
    m_ref_lc: np.ndarray  # out-of-fold reference mean on LC rows
    m_r_uc: np.ndarray
    m_ref_uc: np.ndarray


def fit_discrepancy_models(ds: FusedDataset, cv, r: int, nuis: NuisanceFit, learner: str = "poly2") -> DiscrepancyFit:
    """``m_r = E_LM[v | X_Omega_r]`` and its LC-side reference.

    With ``Omega_0`` inside ``Omega_r`` the reference is the same regression on
    LC. Otherwise it is two-stage: regress v on ``X_{Omega_0 u Omega_r}`` over
    LC, then regress those predictions on ``X_{Omega_r}`` over UC.
    """
    plan = nuis.plan
    src = ds.lm[r - 1]
    om = list(src.omega)
    v_lc, v_lm = cv.control_values(r)
    f_lm = plan.lm[r - 1]
    seed = plan.seed + 7 * r
    x_lm = src.columns(om)
    m_r = fit_conditional_mean(x_lm, v_lm, f_lm, learner, seed=seed)
    m_r_uc = m_r.predict(ds.uc_x[:, om], plan.uc)
    general = not set(ds.omega0) <= set(om)
    if not general:
        m_ref = fit_conditional_mean(ds.lc_x[:, om], v_lc, plan.lc, learner, seed=seed + 1)
        m_ref_lc = m_ref.oof
        m_ref_uc = m_ref.predict(ds.uc_x[:, om], plan.uc)
    else:
        both = sorted(set(ds.omega0) | set(om))
        stage1 = fit_conditional_mean(ds.lc_x[:, both], v_lc, plan.lc, learner, seed=seed + 1)
        s_uc = stage1.predict(ds.uc_x[:, both], plan.uc)
        m_ref = fit_conditional_mean(ds.uc_x[:, om], s_uc, plan.uc, learner, seed=seed + 2)
        # The LC residual is taken against the first-stage fit, which is the
        # conditional mean that the LC-side correction has to remove.
        m_ref_lc = stage1.oof
        m_ref_uc = m_ref.oof
    return DiscrepancyFit(r, general, m_r, m_ref, v_lc, v_lm, m_r.oof, m_ref_lc, m_r_uc, m_ref_uc)


def discrepancy_vector(ds: FusedDataset, fit: DiscrepancyFit, basis: DiscrepancyBasis, nuis: NuisanceFit) -> np.ndarray:
    """``b`` with ``L(theta'psi) = theta'b``."""
    src = ds.lm[fit.r - 1]
    psi_uc = basis.evaluate(ds.uc_x)
    psi_lm = basis.evaluate(_full_lm(ds, fit.r))
    psi_lc = basis.evaluate(ds.lc_x)
    r_lm = nuis.ratio_lm[fit.r - 1].oof
    r_lc = nuis.ratio_lc.oof
    plug = psi_uc.T @ (fit.m_r_uc - fit.m_ref_uc) / ds.N
    lm_term = psi_lm.T @ (r_lm * (fit.v_lm - fit.m_r_lm)) / src.n
    lc_term = psi_lc.T @ (r_lc * (fit.v_lc - fit.m_ref_lc)) / ds.n
    return plug + lm_term - lc_term


def _full_lm(ds: FusedDataset, r: int) -> np.ndarray:
    """LM_r covariates laid out in full-width columns (unobserved set to NaN)."""
    src = ds.lm[r - 1]
    out = np.full((src.n, ds.p), np.nan)
    out[:, list(src.observed)] = src.x
    return out


def debiased_objective(ds: FusedDataset, fit: DiscrepancyFit, basis: DiscrepancyBasis, nuis: NuisanceFit,
                       theta) -> float:
    return float(np.asarray(theta, float) @ discrepancy_vector(ds, fit, basis, nuis))


def compute_delta(b: np.ndarray, sigma: np.ndarray) -> tuple[float, np.ndarray]:
    """Maximize ``theta'b`` over the ellipsoid ``theta' sigma theta <= 1``."""
    b = np.asarray(b, float)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularNormalization("basis second-moment matrix is not positive definite") from exc
    if not np.any(b):
        e1 = np.zeros_like(b)
        e1[0] = 1.0 / np.sqrt(sigma[0, 0])
        return 0.0, e1
    s_inv_b = np.linalg.solve(chol.T, np.linalg.solve(chol, b))
    delta = float(np.sqrt(max(b @ s_inv_b, 0.0)))
    return delta, s_inv_b / delta


@dataclass
class ScreeningReport:
    delta: dict[int, float]
    tau: dict[int, float]
    d: dict[int, int]
    selected: tuple[int, ...]
    theta: dict[int, np.ndarray]
    fits: dict[int, DiscrepancyFit] = field(repr=False, default_factory=dict)
    b: dict[int, np.ndarray] = field(repr=False, default_factory=dict)
    basis: str = "quadratic"
    epsilon: float = 0.02

    def rows(self):
        """(source, delta, tau, selected) tuples in source order."""
        return [(r, self.delta[r], self.tau[r], r in self.selected) for r in sorted(self.delta)]


def screen_sources(ds: FusedDataset, cv, nuis: NuisanceFit, basis: str = "quadratic", epsilon: float = 0.02,
                   learner: str = "poly2") -> ScreeningReport:
    """Screen every source and select ``{r : Delta_r < tau_r}``.

    ``tau_r`` uses that source's basis dimension, so sources with different
    alignment sets get thresholds matched to their own basis.
    """
    deltas, taus, dims, thetas, fits, bs = {}, {}, {}, {}, {}, {}
    for blk in cv.blocks:
        r = blk.r
        src = ds.lm[r - 1]
        bas = DiscrepancyBasis.fit(basis, src.omega, ds.uc_x)
        fit = fit_discrepancy_models(ds, cv, r, nuis, learner)
        b = discrepancy_vector(ds, fit, bas, nuis)
        deltas[r], thetas[r] = compute_delta(b, bas.sigma)
        dims[r] = bas.d
        taus[r] = threshold(bas.d, ds.n, epsilon)
        fits[r], bs[r] = fit, b
    selected = tuple(r for r in sorted(deltas) if deltas[r] < taus[r])
    return ScreeningReport(deltas, taus, dims, selected, thetas, fits, bs, basis, epsilon)
