"""Link functions and a small damped-Newton GLM solver."""

from __future__ import annotations

import numpy as np

from .errors import NonConvergence, SingularJacobian

LINKS = ("identity", "logit")


def mean_fn(link: str, eta: np.ndarray) -> np.ndarray:
    if link == "identity":
        return eta
    if link == "logit":
        # Stable sigmoid.
        out = np.empty_like(eta, dtype=float)
        pos = eta >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
        e = np.exp(eta[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    raise ValueError(f"unknown link {link!r}")


def mean_deriv(link: str, eta: np.ndarray) -> np.ndarray:
    if link == "identity":
        return np.ones_like(eta, dtype=float)
    if link == "logit":
        mu = mean_fn(link, eta)
        return mu * (1.0 - mu)
    raise ValueError(f"unknown link {link!r}")


def _objective(link, design, y, weights, gamma, penalty):
    eta = design @ gamma
    if link == "identity":
        loss = 0.5 * np.sum(weights * (y - eta) ** 2)
    else:
        # Negative Bernoulli log-likelihood; y may be fractional (working responses).
        loss = np.sum(weights * (np.logaddexp(0.0, eta) - y * eta))
    return loss + 0.5 * np.sum(penalty * gamma**2)


def fit_glm(
    design: np.ndarray,
    y: np.ndarray,
    link: str,
    weights: np.ndarray | None = None,
    penalty: np.ndarray | float = 0.0,
    gamma0: np.ndarray | None = None,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> np.ndarray:
    """Solve ``sum_i w_i a_i (y_i - g(a_i'gamma)) - penalty * gamma = 0``.

    Damped Newton with step halving on the (penalized, weighted) negative
    log-likelihood. ``penalty`` may be a scalar or a per-coefficient vector.

    Raises
    ------
    NonConvergence
        If the score norm does not fall below ``tol`` within ``max_iter`` steps.
    SingularJacobian
        If the weighted Hessian cannot be factorized.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, q = design.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    pen = np.broadcast_to(np.asarray(penalty, dtype=float), (q,))
    gamma = np.zeros(q) if gamma0 is None else np.array(gamma0, dtype=float)
    scale = max(float(np.sum(w)), 1.0)

    obj = _objective(link, design, y, w, gamma, pen)
    for _ in range(max_iter):
        eta = design @ gamma
        resid = y - mean_fn(link, eta)
        score = design.T @ (w * resid) - pen * gamma
        if np.linalg.norm(score) / scale <= tol:
            return gamma
        hess = (design * (w * mean_deriv(link, eta))[:, None]).T @ design + np.diag(pen)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian("GLM Hessian is singular") from exc
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("GLM Newton step is not finite")
        t = 1.0
        while True:
            cand = gamma + t * step
            cand_obj = _objective(link, design, y, w, cand, pen)
            if cand_obj <= obj + 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10:
            raise NonConvergence("GLM Newton step diverged")
        gamma, obj = cand, cand_obj
    eta = design @ gamma
    score = design.T @ (w * (y - mean_fn(link, eta))) - pen * gamma
    if np.linalg.norm(score) / scale <= max(tol, 1e-8):
        return gamma
    raise NonConvergence(f"GLM Newton did not converge in {max_iter} iterations")
