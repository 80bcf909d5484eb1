"""Cross-fitted nuisance models: fold plans, density ratios, conditional means,
and the debiasing operator that combines them.

The conditional-mean learners shipped here are ridge regressions on a feature
map (``linear``, ``poly2``, ``krr``), i.e. linear smoothers. Once the ridge
penalty is fixed, predictions are linear in the response, which is what lets
the debiasing operator act column-by-column and be recombined afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LC, UC, FusedDataset, Kind, SourceKind
from .errors import DegenerateLabels, FoldMismatch, FoldTooSmall, SingularDesign
from .glm import fit_glm

LEARNERS = ("linear", "poly2", "krr", "forest")
RIDGE_GRID = (1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)  # multiplied by n_train
LINEAR_RIDGE = 1e-8


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------


def _source_code(kind: SourceKind) -> int:
    if kind.kind is Kind.LC:
        return 0
    if kind.kind is Kind.UC:
        return 1
    return 1 + kind.index


def assign_folds(n: int, K: int, seed: int, stream: int = 0) -> np.ndarray:
    """Balanced random fold labels in ``0..K-1``; sizes differ by at most one."""
    if n < K:
        raise FoldTooSmall(f"source with {n} rows cannot be split into {K} folds")
    rng = np.random.default_rng([seed, stream])
    labels = np.empty(n, dtype=np.int64)
    labels[rng.permutation(n)] = np.arange(n) % K
    return labels


@dataclass(frozen=True)
class FoldPlan:
    """Fold labels (0-based) for every source of one dataset."""

    K: int
    seed: int
    lc: np.ndarray
    uc: np.ndarray
    lm: tuple[np.ndarray, ...] = ()

    def labels(self, kind: SourceKind) -> np.ndarray:
        if kind.kind is Kind.LC:
            return self.lc
        if kind.kind is Kind.UC:
            return self.uc
        return self.lm[kind.index - 1]


def make_fold_plan(ds: FusedDataset, K: int = 5, seed: int = 0) -> FoldPlan:
    if K < 2:
        raise ValueError("K must be at least 2")
    lc = assign_folds(ds.n, K, seed, _source_code(LC))
    uc = assign_folds(ds.N, K, seed, _source_code(UC))
    lm = tuple(
        assign_folds(src.n, K, seed, _source_code(SourceKind(Kind.LM, r)))
        for r, src in enumerate(ds.lm, start=1)
    )
    for a in (lc, uc, *lm):
        a.setflags(write=False)
    return FoldPlan(K=K, seed=seed, lc=lc, uc=uc, lm=lm)


# ---------------------------------------------------------------------------
# Feature maps and ridge smoothers
# ---------------------------------------------------------------------------


def _standardizer(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def quadratic_features(z: np.ndarray, anchors: int | None = None) -> np.ndarray:
    """Columns ``z_j`` then ``z_i z_j`` for ``i <= j`` (no constant).

    With ``anchors`` only products whose first factor is one of the leading
    ``anchors`` columns are kept.
    """
    d = z.shape[1]
    cols = [z]
    for i in range(d if anchors is None else min(anchors, d)):
        cols.append(z[:, i : i + 1] * z[:, i:])
    return np.hstack(cols) if d else np.empty((z.shape[0], 0))


def _gauss_kernel(a, b, bandwidth):
    sq = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))


def median_bandwidth(z: np.ndarray) -> float:
    sq = (z**2).sum(1)[:, None] + (z**2).sum(1)[None, :] - 2.0 * z @ z.T
    d = np.sqrt(np.maximum(sq[np.triu_indices(z.shape[0], 1)], 0.0))
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 1e-12 else 1.0


class FeatureMap:
    """Non-constant features for one learner, fitted on training inputs."""

    def __init__(self, kind: str, x_train: np.ndarray, seed: int = 0, n_centers: int = 100,
                 anchors: int | None = None):
        self.kind = kind
        self.d = x_train.shape[1]
        self.anchors = anchors
        if kind == "linear":
            return
        self.mu, self.sd = _standardizer(x_train)
        if kind == "krr" and self.d:
            z = (x_train - self.mu) / self.sd
            m = min(n_centers, z.shape[0])
            rng = np.random.default_rng([seed, 7919])
            self.centers = z[np.sort(rng.choice(z.shape[0], m, replace=False))]
            self.bandwidth = median_bandwidth(self.centers)
            kcc = _gauss_kernel(self.centers, self.centers, self.bandwidth)
            s, v = np.linalg.eigh(kcc)
            keep = s > 1e-8 * s.max()
            self.whiten = v[:, keep] / np.sqrt(s[keep])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d == 0:
            return np.empty((x.shape[0], 0))
        if self.kind == "linear":
            return x
        z = (x - self.mu) / self.sd
        if self.kind == "poly2":
            return quadratic_features(z, self.anchors)
        if self.kind == "krr":
            return _gauss_kernel(z, self.centers, self.bandwidth) @ self.whiten
        raise ValueError(f"unknown feature map {self.kind!r}")


def _loo_score(fc, d, lams):
    """Leave-one-out MSE (summed over standardized response columns) per penalty."""
    n = fc.shape[0]
    s, v = np.linalg.eigh(fc.T @ fc)
    s = np.maximum(s, 0.0)
    fv = fc @ v
    proj = fv.T @ (d - d.mean(axis=0))
    scale = d.var(axis=0)
    scale[scale < 1e-300] = 1.0
    out = []
    for lam in lams:
        shrink = 1.0 / (s + lam)
        fitted = fv @ (shrink[:, None] * proj) + d.mean(axis=0)
        hat = 1.0 / n + (fv**2) @ shrink
        resid = (d - fitted) / np.maximum(1.0 - hat, 1e-8)[:, None]
        out.append(float(np.sum(np.mean(resid**2, axis=0) / scale)))
    return np.array(out)


@dataclass
class RidgeFold:
    """One fold's linear smoother: ``pred(x) = mean(D_tr) + (f(x) - fbar) @ op @ D_tr``."""

    fmap: FeatureMap
    fbar: np.ndarray
    op: np.ndarray  # (q, n_train)

    def weights(self, x: np.ndarray) -> np.ndarray:
        """Smoother weights; rows of the result sum to one."""
        g = self.fmap(x) - self.fbar
        return 1.0 / self.op.shape[1] + g @ self.op

    def mean_weights(self, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
        """Column means of ``weights(x)`` without forming the full matrix."""
        q = self.op.shape[0]
        fsum = np.zeros(q)
        for start in range(0, x.shape[0], chunk):
            fsum += self.fmap(x[start : start + chunk]).sum(axis=0)
        g = fsum / x.shape[0] - self.fbar
        return 1.0 / self.op.shape[1] + g @ self.op


def fit_ridge_fold(
    x_tr: np.ndarray, learner: str, d_ref: np.ndarray | None = None, seed: int = 0,
    lam: float | None = None, anchors: int | None = None,
) -> tuple[RidgeFold, float]:
    """Fit a ridge smoother on one training split.

    The penalty is fixed for ``linear`` and selected by leave-one-out on the
    reference response ``d_ref`` for ``poly2``/``krr`` (unless given).
    """
    fmap = FeatureMap(learner, x_tr, seed=seed, anchors=anchors)
    f = fmap(x_tr)
    n_tr, q = f.shape
    if q == 0:
        return RidgeFold(fmap, np.empty(0), np.empty((0, n_tr))), 0.0
    fbar = f.mean(axis=0)
    fc = f - fbar
    if lam is None:
        if learner == "linear" or d_ref is None:
            lam = LINEAR_RIDGE if learner == "linear" else 1e-3 * n_tr
        else:
            dr = np.asarray(d_ref, dtype=float).reshape(n_tr, -1)
            lams = [g * n_tr for g in RIDGE_GRID]
            lam = lams[int(np.argmin(_loo_score(fc, dr, lams)))]
    gram = fc.T @ fc
    gram[np.diag_indices(q)] += lam
    try:
        op = np.linalg.solve(gram, fc.T)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign("ridge system is singular") from exc
    if not np.all(np.isfinite(op)):
        raise SingularDesign("ridge system produced non-finite weights")
    return RidgeFold(fmap, fbar, op), lam


class ConditionalMeanModel:
    """Cross-fitted regression of a (possibly multi-column) response.

    ``predict(x, fold)`` uses the model trained without ``fold``; ``oof`` holds
    out-of-fold predictions for the training rows.
    """

    def __init__(self, learner, input_dim, folds, models, coefs, means, oof):
        self.learner = learner
        self.input_dim = input_dim
        self.folds = folds
        self._models = models
        self._coefs = coefs
        self._means = means
        self.oof = oof

    @property
    def K(self) -> int:
        return len(self._models)

    def predict(self, x: np.ndarray, fold: int | np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            x = x.reshape(-1, self.input_dim)
        folds = np.broadcast_to(np.asarray(fold), (x.shape[0],))
        if folds.size and (folds.min() < 0 or folds.max() >= self.K):
            raise FoldMismatch("row references a fold without a trained predictor")
        out = None
        for k in np.unique(folds):
            sel = folds == k
            pk = self._predict_fold(x[sel], int(k))
            if out is None:
                out = np.empty((x.shape[0],) + pk.shape[1:])
            out[sel] = pk
        if out is None:
            out = np.empty((0,) + self.oof.shape[1:])
        return out

    def predict_mean(self, x: np.ndarray) -> np.ndarray:
        """Average of the K fold models (for rows outside every training split)."""
        return np.mean([self._predict_fold(np.asarray(x, float), k) for k in range(self.K)], axis=0)

    def _predict_fold(self, x, k):
        m = self._models[k]
        if isinstance(m, RidgeFold):
            g = m.fmap(x) - m.fbar
            return self._means[k] + g @ self._coefs[k]
        pred = np.asarray(m.predict(x), dtype=float)
        return pred.reshape((x.shape[0],) + self.oof.shape[1:])

    def coef(self, k: int = 0) -> np.ndarray:
        """``(intercept, slopes...)`` of a ``linear`` fold model on the raw inputs."""
        m = self._models[k]
        if not isinstance(m, RidgeFold) or m.fmap.kind != "linear":
            raise ValueError("coefficients are only defined for the linear learner")
        slopes = self._coefs[k]
        intercept = self._means[k] - m.fbar @ slopes
        if slopes.ndim == 1:
            return np.concatenate([[intercept], slopes])
        return np.vstack([intercept[None, :], slopes])


def _make_forest(seed):
    from sklearn.ensemble import RandomForestRegressor

    return RandomForestRegressor(n_estimators=100, min_samples_leaf=5, random_state=seed, n_jobs=1)


def fit_conditional_mean(
    x: np.ndarray, d: np.ndarray, folds: np.ndarray, learner: str = "linear", seed: int = 0,
    lam: float | None = None, anchors: int | None = None,
) -> ConditionalMeanModel:
    """Cross-fit ``E[d | x]``; one model per fold, trained on the other folds.

    ``learner`` is one of ``linear``, ``poly2``, ``krr``, ``forest`` or any
    object with ``fit``/``predict`` (cloned per fold via ``sklearn.base.clone``).
    ``anchors`` restricts ``poly2`` products to the leading input columns.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    d = np.asarray(d, dtype=float)
    folds = np.asarray(folds)
    K = int(folds.max()) + 1
    models, coefs, means = [], [], []
    for k in range(K):
        tr = folds != k
        if not tr.any():
            raise FoldTooSmall("a fold covers every row")
        if isinstance(learner, str) and learner != "forest":
            if learner not in LEARNERS:
                raise ValueError(f"unknown learner {learner!r}")
            fold, _ = fit_ridge_fold(x[tr], learner, d[tr], seed=seed + k, lam=lam, anchors=anchors)
            dm = d[tr].mean(axis=0)
            c = fold.op @ d[tr]
            models.append(fold)
            coefs.append(c)
            means.append(dm)
        else:
            if learner == "forest":
                est = _make_forest(seed + k)
            else:
                from sklearn.base import clone

                est = clone(learner)
            est.fit(x[tr] if x.shape[1] else np.zeros((tr.sum(), 1)), d[tr])
            if x.shape[1] == 0:
                est = _ConstantPredictor(d[tr].mean(axis=0))
            models.append(est)
            coefs.append(None)
            means.append(None)
    model = ConditionalMeanModel(learner if isinstance(learner, str) else type(learner).__name__,
                                 x.shape[1], folds, models, coefs, means, d)
    model.oof = model.predict(x, folds)
    return model


class _ConstantPredictor:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def predict(self, x):
        return np.broadcast_to(self.value, (len(x),) + self.value.shape).copy()


# ---------------------------------------------------------------------------
# Density ratios
# ---------------------------------------------------------------------------


class DensityRatioModel:
    """Cross-fitted estimate of ``p_UC(x) / p_source(x)`` on alignment columns."""

    def __init__(self, target, input_columns, eps_clip, fits, oof):
        self.target = target
        self.input_columns = tuple(input_columns)
        self.eps_clip = eps_clip
        self._fits = fits  # per fold: (mu, sd, coef, log_prior_correction)
        self.oof = oof

    def _clip(self, r):
        if self.eps_clip > 0:
            return np.clip(r, self.eps_clip, 1.0 / self.eps_clip)
        return r

    def predict(self, x: np.ndarray, fold: int | np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        folds = np.broadcast_to(np.asarray(fold), (x.shape[0],))
        if not self.input_columns:
            return np.ones(x.shape[0])
        if folds.size and (folds.min() < 0 or folds.max() >= len(self._fits)):
            raise FoldMismatch("row references a fold without a trained ratio model")
        out = np.empty(x.shape[0])
        for k in np.unique(folds):
            sel = folds == k
            mu, sd, coef, corr = self._fits[int(k)]
            feats = np.column_stack([np.ones(sel.sum()), quadratic_features((x[sel] - mu) / sd)])
            out[sel] = np.exp(np.clip(feats @ coef + corr, -700, 700))
        return self._clip(out)


def source_covariates(ds: FusedDataset, kind: SourceKind, cols: Sequence[int]) -> np.ndarray:
    cols = list(cols)
    if kind.kind is Kind.LC:
        return ds.lc_x[:, cols]
    if kind.kind is Kind.UC:
        return ds.uc_x[:, cols]
    return ds.lm[kind.index - 1].columns(cols)


def fit_density_ratio(
    ds: FusedDataset, source: SourceKind, input_columns: Sequence[int], plan: FoldPlan,
    eps_clip: float = 0.01, penalty: float = 1.0,
) -> DensityRatioModel:
    """Classifier-based ratio ``p_UC / p_source`` with out-of-fold predictions.

    For fold k a ridge-penalized logistic model on quadratic features separates
    UC rows from source rows outside fold k; the ratio is its odds times
    ``n_source_train / n_uc_train``.
    """
    cols = tuple(input_columns)
    folds = plan.labels(source)
    n_src = folds.shape[0]
    if not cols:
        return DensityRatioModel(source, cols, eps_clip, [], np.ones(n_src))
    xs = source_covariates(ds, source, cols)
    xu = ds.uc_x[:, list(cols)]
    uf = plan.uc
    fits = []
    for k in range(plan.K):
        a, b = xs[folds != k], xu[uf != k]
        if a.shape[0] == 0 or b.shape[0] == 0:
            raise DegenerateLabels("one source is empty in a training split")
        pooled = np.vstack([a, b])
        mu, sd = _standardizer(pooled)
        feats = np.column_stack([np.ones(pooled.shape[0]), quadratic_features((pooled - mu) / sd)])
        lab = np.concatenate([np.zeros(a.shape[0]), np.ones(b.shape[0])])
        pen = np.full(feats.shape[1], penalty)
        pen[0] = 0.0
        coef = fit_glm(feats, lab, "logit", penalty=pen)
        fits.append((mu, sd, coef, np.log(a.shape[0] / b.shape[0])))
    model = DensityRatioModel(source, cols, eps_clip, fits, None)
    model.oof = model.predict(xs, folds)
    return model


# ---------------------------------------------------------------------------
# Debiasing operator
# ---------------------------------------------------------------------------


def dml_apply(d, ratio, m_pred, uc_mean):
    """``ratio * (d - m_pred) + uc_mean`` with broadcasting over columns."""
    d = np.asarray(d, dtype=float)
    r = np.asarray(ratio, dtype=float)
    if d.ndim == 2:
        r = r[:, None]
    return r * (d - m_pred) + uc_mean


class DMLOperator:
    """Debiased transform for one labeled source.

    ``transform(D)[i] = r(x_i) * (D_i - m(x_i)) + mean_UC(m)`` with ``r`` and
    ``m`` from models never trained on row i. The conditional-mean smoother
    is frozen at construction, so the map is linear in ``D``.
    """

    def __init__(self, x_src, folds, ratio, x_uc, learner="poly2", reference=None, seed=0,
                 uc_folds=None):
        x_src = np.asarray(x_src, dtype=float)
        self.identity = x_src.shape[1] == 0
        self.folds = np.asarray(folds)
        self.n = self.folds.shape[0]
        self.ratio = np.ones(self.n) if ratio is None else np.asarray(ratio, dtype=float)
        if learner not in ("linear", "poly2", "krr"):
            raise ValueError("the debiasing operator needs a linear-smoother learner (linear, poly2, krr)")
        self.learner = learner
        self.K = int(self.folds.max()) + 1
        self._tr, self._te, self._w_te, self._w_uc = [], [], [], []
        if self.identity:
            return
        x_uc = np.asarray(x_uc, dtype=float)
        for k in range(self.K):
            tr = np.flatnonzero(self.folds != k)
            te = np.flatnonzero(self.folds == k)
            ref = None if reference is None else np.asarray(reference, float)[tr]
            fold, _ = fit_ridge_fold(x_src[tr], learner, ref, seed=seed + k)
            self._tr.append(tr)
            self._te.append(te)
            self._w_te.append(fold.weights(x_src[te]))
            self._w_uc.append(fold.mean_weights(x_uc))

    def conditional_mean(self, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Out-of-fold fitted means per row and, per row, the UC plug-in mean."""
        d = np.asarray(d, dtype=float)
        m = np.empty_like(d)
        ucm = np.empty_like(d)
        for tr, te, w_te, w_uc in zip(self._tr, self._te, self._w_te, self._w_uc):
            dt = d[tr]
            m[te] = w_te @ dt
            ucm[te] = w_uc @ dt
        return m, ucm

    def transform(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if d.shape[0] != self.n:
            raise FoldMismatch("response length does not match the source")
        if self.identity:
            return d.copy()
        m, ucm = self.conditional_mean(d)
        return dml_apply(d, self.ratio, m, ucm)


def dml_transform(op: DMLOperator, d: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Transformed column plus its empirical mean and (1/n) variance."""
    col = op.transform(d)
    return col, float(np.mean(col, axis=0)) if col.ndim == 1 else col.mean(axis=0), (
        float(np.var(col)) if col.ndim == 1 else col.var(axis=0)
    )


@dataclass
class NuisanceConfig:
    K: int = 5
    eps_clip: float = 0.01
    ratio_learner: str = "logistic"
    cmean_learner: str = "poly2"
    ratio_penalty: float = 1.0


@dataclass
class NuisanceFit:
    """Everything fitted once per dataset: fold plan, ratios, debiasing operators."""

    plan: FoldPlan
    ratio_lc: DensityRatioModel
    ratio_lm: tuple[DensityRatioModel, ...]
    op_lc: DMLOperator
    op_lm: tuple[DMLOperator, ...]


def fit_nuisances(ds: FusedDataset, plan: FoldPlan, cfg: NuisanceConfig | None = None) -> NuisanceFit:
    cfg = cfg or NuisanceConfig()
    if cfg.ratio_learner != "logistic":
        raise ValueError(f"unknown ratio learner {cfg.ratio_learner!r}")
    ratio_lc = fit_density_ratio(ds, LC, ds.omega0, plan, cfg.eps_clip, cfg.ratio_penalty)
    op_lc = DMLOperator(ds.lc_x[:, list(ds.omega0)], plan.lc, ratio_lc.oof, ds.uc_x[:, list(ds.omega0)],
                        cfg.cmean_learner, reference=ds.lc_y, seed=plan.seed)
    ratio_lm, op_lm = [], []
    for r, src in enumerate(ds.lm, start=1):
        kind = SourceKind(Kind.LM, r)
        rm = fit_density_ratio(ds, kind, src.omega, plan, cfg.eps_clip, cfg.ratio_penalty)
        ratio_lm.append(rm)
        op_lm.append(DMLOperator(src.columns(src.omega), plan.labels(kind), rm.oof,
                                 ds.uc_x[:, list(src.omega)], cfg.cmean_learner, reference=src.y,
                                 seed=plan.seed + 101 * r))
    return NuisanceFit(plan, ratio_lc, tuple(ratio_lm), op_lc, tuple(op_lm))
