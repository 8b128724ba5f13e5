"""Gaussian densities over branch state sequences and their Kalman algebra.

A branch's states form one long jointly-Gaussian vector.  To keep matrix
sizes bounded, states older than the last L steps are split off into
"frozen" chunks: their marginals are kept but they are treated as
independent of the live window and are never touched again.  All
operations here work on the live window only, are pure (inputs are never
mutated) and resymmetrise covariances on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .trees import Genealogy, branch_length, validate_genealogy

SYM_TOL = 1e-9
JITTER = 1e-9


def _sym(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2.0


def _chol_with_jitter(S: np.ndarray) -> np.ndarray:
    """Cholesky factor of S, retrying once with a small diagonal jitter."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return np.linalg.cholesky(S + JITTER * np.eye(S.shape[0]))


def gauss_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """log N(x; mean, cov) via Cholesky."""
    L = _chol_with_jitter(cov)
    diff = solve_triangular(L, np.asarray(x, dtype=float) - mean, lower=True)
    return float(
        -0.5 * diff @ diff
        - np.log(np.diag(L)).sum()
        - 0.5 * len(x) * np.log(2.0 * np.pi)
    )


@dataclass(frozen=True)
class GaussianBranchComponent:
    """Gaussian over the state sequence of one branch ending at a known step.

    ``genealogy`` is the alive part of the branch's marks (tree-relative, no
    trailing zeros).  ``mean``/``cov`` cover the live window; earlier states
    sit in ``frozen_means``/``frozen_covs`` chunks, ordered oldest first.
    """

    genealogy: Genealogy
    mean: np.ndarray
    cov: np.ndarray
    nx: int
    frozen_means: tuple[np.ndarray, ...] = ()
    frozen_covs: tuple[np.ndarray, ...] = ()

    @property
    def length(self) -> int:
        n = sum(fm.shape[0] for fm in self.frozen_means) + self.mean.shape[0]
        return n // self.nx

    @property
    def live_length(self) -> int:
        return self.mean.shape[0] // self.nx

    @property
    def last_mean(self) -> np.ndarray:
        return self.mean[-self.nx:]

    def full_mean(self) -> np.ndarray:
        return np.concatenate([*self.frozen_means, self.mean])

    def full_cov(self) -> np.ndarray:
        n = self.length * self.nx
        out = np.zeros((n, n))
        at = 0
        for fc in self.frozen_covs:
            m = fc.shape[0]
            out[at : at + m, at : at + m] = fc
            at += m
        out[at:, at:] = self.cov
        return out

    def check(self) -> None:
        """Raise if sizes or genealogy are inconsistent (debug aid)."""
        marks = validate_genealogy(self.genealogy)
        if marks[-1] == 0:
            raise ValueError("component genealogy must be the alive prefix")
        if branch_length(marks) != self.length:
            raise ValueError(
                f"{self.length} states but genealogy implies {branch_length(marks)}"
            )


def component_from_moments(genealogy, mean, cov, nx) -> GaussianBranchComponent:
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = _sym(np.atleast_2d(np.asarray(cov, dtype=float)))
    return GaussianBranchComponent(tuple(genealogy), mean, cov, nx)


def predict_augment_survive(
    c: GaussianBranchComponent, F: np.ndarray, d: np.ndarray, Q: np.ndarray
) -> GaussianBranchComponent:
    """Append the surviving next state: mark 1, one more n_x block.

    The marginal over the existing states is untouched; the new block is
    the usual Kalman-predicted moment with cross terms against the live
    window.
    """
    nx = c.nx
    if F.shape != (nx, nx):
        raise ValueError(f"transition matrix {F.shape} does not match n_x={nx}")
    P = c.cov
    last = slice(P.shape[0] - nx, P.shape[0])
    new_mean = np.concatenate([c.mean, F @ c.mean[last] + d])
    cross = P[:, last] @ F.T
    corner = F @ P[last, last] @ F.T + Q
    top = np.hstack([P, cross])
    bottom = np.hstack([cross.T, corner])
    new_cov = _sym(np.vstack([top, bottom]))
    return replace(
        c, genealogy=c.genealogy + (1,), mean=new_mean, cov=new_cov
    )


def spawn_component(
    c: GaussianBranchComponent,
    F: np.ndarray,
    d: np.ndarray,
    Q: np.ndarray,
    mode: int,
) -> GaussianBranchComponent:
    """Single-state component for a branch spawned with ``mode`` >= 2.

    Only the last state of the parent participates; the child's genealogy
    is the parent's alive marks plus the spawning mode.
    """
    if mode < 2:
        raise ValueError(f"spawning modes start at 2, got {mode}")
    nx = c.nx
    if F.shape != (nx, nx):
        raise ValueError(f"transition matrix {F.shape} does not match n_x={nx}")
    P = c.cov
    last = slice(P.shape[0] - nx, P.shape[0])
    mean = F @ c.mean[last] + d
    cov = _sym(F @ P[last, last] @ F.T + Q)
    return GaussianBranchComponent(c.genealogy + (mode,), mean, cov, nx)


def innovation(
    c: GaussianBranchComponent, H: np.ndarray, R: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted measurement and innovation covariance for the last state."""
    nx = c.nx
    last = slice(len(c.mean) - nx, len(c.mean))
    zhat = H @ c.mean[last]
    S = _sym(H @ c.cov[last, last] @ H.T + R)
    return zhat, S


def gate(
    z: np.ndarray,
    c: GaussianBranchComponent,
    H: np.ndarray,
    R: np.ndarray,
    threshold: float,
) -> bool:
    """Ellipsoidal gate: squared Mahalanobis innovation distance <= threshold."""
    zhat, S = innovation(c, H, R)
    L = _chol_with_jitter(S)
    w = solve_triangular(L, np.asarray(z, dtype=float) - zhat, lower=True)
    return float(w @ w) <= threshold


def update_last_state(
    c: GaussianBranchComponent, z: np.ndarray, H: np.ndarray, R: np.ndarray
) -> tuple[GaussianBranchComponent, float]:
    """Condition the live window on a measurement of the last state.

    Returns the updated component and the log of the predictive likelihood
    N(z; H x_last, H P_last H' + R).  The cross covariances inside the live
    window make this a fixed-interval smoothing update for the recent past;
    frozen chunks stay fixed by construction.
    """
    nx = c.nx
    z = np.asarray(z, dtype=float)
    n = len(c.mean)
    last = slice(n - nx, n)
    zhat = H @ c.mean[last]
    S = _sym(H @ c.cov[last, last] @ H.T + R)
    L = _chol_with_jitter(S)
    innov = z - zhat
    white = solve_triangular(L, innov, lower=True)
    loglik = float(
        -0.5 * white @ white
        - np.log(np.diag(L)).sum()
        - 0.5 * len(z) * np.log(2.0 * np.pi)
    )
    PHt = c.cov[:, last] @ H.T
    K = cho_solve((L, True), PHt.T).T
    new_mean = c.mean + K @ innov
    new_cov = _sym(c.cov - K @ S @ K.T)
    return replace(c, mean=new_mean, cov=new_cov), loglik


def l_scan_truncate_component(
    c: GaussianBranchComponent, L: int
) -> GaussianBranchComponent:
    """Freeze live states older than the last L: drop their cross terms."""
    if L < 1:
        raise ValueError(f"window must be >= 1, got {L}")
    w = c.live_length
    if w <= L:
        return c
    cut = (w - L) * c.nx
    frozen_mean = c.mean[:cut].copy()
    frozen_cov = _sym(c.cov[:cut, :cut].copy())
    return replace(
        c,
        mean=c.mean[cut:].copy(),
        cov=_sym(c.cov[cut:, cut:].copy()),
        frozen_means=c.frozen_means + (frozen_mean,),
        frozen_covs=c.frozen_covs + (frozen_cov,),
    )


class EndCase(NamedTuple):
    """Probability that the branch ended at a given step, with its Gaussian."""

    beta: float
    comp: GaussianBranchComponent


@dataclass(frozen=True)
class BranchDensity:
    """Mixture over branch end times: step kappa -> (beta, Gaussian component)."""

    start_time: int
    components: dict[int, EndCase]

    def beta(self, kappa: int) -> float:
        case = self.components.get(kappa)
        return case.beta if case is not None else 0.0

    def beta_total(self) -> float:
        return sum(case.beta for case in self.components.values())

    def most_likely_end(self) -> int:
        # ties broken toward the latest end time
        return max(self.components, key=lambda k: (self.components[k].beta, k))


def l_scan_truncate(d: BranchDensity, L: int) -> BranchDensity:
    """Apply the window truncation to every end-time component.

    Returns the input object itself when nothing needed truncating.
    """
    new = {}
    changed = False
    for k, case in d.components.items():
        comp = l_scan_truncate_component(case.comp, L)
        changed = changed or comp is not case.comp
        new[k] = EndCase(case.beta, comp)
    if not changed:
        return d
    return BranchDensity(d.start_time, new)


@dataclass(frozen=True)
class PPPComponent:
    """One intensity term for undetected trees: weight, start time, component.

    The genealogy is all ones (alive since birth, never spawned).
    """

    log_weight: float
    start_time: int
    comp: GaussianBranchComponent

    @property
    def weight(self) -> float:
        return float(np.exp(self.log_weight))
