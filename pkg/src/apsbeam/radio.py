"""SINR, rates, power constraints and the ZF / MRT reference precoders.

Array conventions used throughout:

* ``H_hab``  -- (B, U, N_b) complex, row ``[c, u]`` is the channel from the HAB of
  cluster ``c`` to user ``u``.
* ``W_hab``  -- (B, N_b, K) complex, column ``k`` of ``W_hab[c]`` is the beam for
  the k-th user of cluster ``c`` (global user id ``c * K + k``).
* ``H_haps`` -- (U, N_b0) complex and ``W_haps`` -- (N_b0, U) complex.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

POWER_TOL = 1e-9
# relative slack for rounding left over by a previous projection; keeps projection idempotent
PROJECT_SLACK = 1e-12
ZF_COND_LIMIT = 1e12


@dataclass(frozen=True)
class BeamformingMatrix:
    bs_id: int
    W: np.ndarray
    P_max: float
    per_beam: bool = False  # True: every column capped at P_max (HAPS rule)

    def column_powers(self) -> np.ndarray:
        return np.sum(np.abs(self.W) ** 2, axis=0)

    def is_feasible(self, tol: float = POWER_TOL) -> bool:
        p = self.column_powers()
        if self.per_beam:
            return bool(np.all(p <= self.P_max + tol))
        return bool(p.sum() <= self.P_max + tol)


@dataclass(frozen=True)
class RateReport:
    sinr_hab: np.ndarray
    sinr_haps: np.ndarray
    rates: np.ndarray

    @property
    def sum_rate(self) -> float:
        return float(self.rates.sum())

    @property
    def reward(self) -> float:
        return reward(self.rates)


def project_power(beams: BeamformingMatrix) -> BeamformingMatrix:
    """Scale ``W`` down onto the feasible set; feasible input comes back untouched."""
    W = beams.W
    if not np.all(np.isfinite(W)):
        raise ValueError(f"non-finite beamforming weights at BS {beams.bs_id}")
    p = np.sum(np.abs(W) ** 2, axis=0)
    limit = beams.P_max * (1.0 + PROJECT_SLACK)
    if beams.per_beam:
        over = p > limit
        if not over.any():
            return beams
        scale = np.ones_like(p)
        scale[over] = np.sqrt(beams.P_max / p[over])
        return replace(beams, W=W * scale[None, :])
    total = p.sum()
    if total <= limit:
        return beams
    return replace(beams, W=W * np.sqrt(beams.P_max / total))


def hab_gains(H_hab: np.ndarray, W_hab: np.ndarray) -> np.ndarray:
    """|h_{c,u} w_{c,k}|^2 for every HAB c, user u and beam k, shape (B, U, K)."""
    return np.abs(np.einsum("cun,cnk->cuk", H_hab, W_hab)) ** 2


def hab_sinrs(H_hab: np.ndarray, W_hab: np.ndarray, noise: float) -> np.ndarray:
    B, U, _ = H_hab.shape
    K = W_hab.shape[2]
    if U != B * K:
        raise ValueError(f"{U} users cannot be split into {B} clusters of {K}")
    if W_hab.shape[:2] != (B, H_hab.shape[2]):
        raise ValueError(f"beam shape {W_hab.shape} does not match channel shape {H_hab.shape}")
    g = hab_gains(H_hab, W_hab)
    users = np.arange(U)
    signal = g[users // K, users, users % K]
    interference = g.sum(axis=(0, 2)) - signal
    return signal / (interference + noise)


def haps_sinrs(H_haps: np.ndarray, W_haps: np.ndarray, noise: float) -> np.ndarray:
    if H_haps.shape[1] != W_haps.shape[0] or H_haps.shape[0] != W_haps.shape[1]:
        raise ValueError(f"beam shape {W_haps.shape} does not match channel shape {H_haps.shape}")
    g = np.abs(H_haps @ W_haps) ** 2
    signal = np.diag(g)
    interference = g.sum(axis=1) - signal
    return signal / (interference + noise)


def sinr_hab(u: int, H_hab: np.ndarray, W_hab: np.ndarray, noise: float) -> float:
    """SINR of user ``u`` on the HAB layer; every HAB beam not meant for ``u`` interferes."""
    B, U, N = H_hab.shape
    K = W_hab.shape[2]
    if W_hab.shape[:2] != (B, N):
        raise ValueError(f"beam shape {W_hab.shape} does not match channel shape {H_hab.shape}")
    c, k = divmod(u, K)
    signal = abs(H_hab[c, u] @ W_hab[c, :, k]) ** 2
    interference = 0.0
    for cc in range(B):
        for kk in range(K):
            if cc * K + kk != u:
                interference += abs(H_hab[cc, u] @ W_hab[cc, :, kk]) ** 2
    return float(signal / (interference + noise))


def sinr_haps(u: int, H_haps: np.ndarray, W_haps: np.ndarray, noise: float) -> float:
    if H_haps.shape[1] != W_haps.shape[0]:
        raise ValueError(f"beam shape {W_haps.shape} does not match channel shape {H_haps.shape}")
    h = H_haps[u]
    g = np.abs(h @ W_haps) ** 2
    return float(g[u] / (g.sum() - g[u] + noise))


def user_rate(sinr_hab_u: float, sinr_haps_u: float) -> float:
    """Dual-connectivity rate: the two layers use disjoint bands, so rates add."""
    return float(np.log2(1.0 + sinr_hab_u) + np.log2(1.0 + sinr_haps_u))


def reward(rates) -> float:
    return float(np.mean(rates))


def rate_report(H_hab, W_hab, H_haps, W_haps, noise: float) -> RateReport:
    s_hab = hab_sinrs(H_hab, W_hab, noise)
    s_haps = haps_sinrs(H_haps, W_haps, noise)
    rates = np.log2(1.0 + s_hab) + np.log2(1.0 + s_haps)
    return RateReport(s_hab, s_haps, rates)


def _baseline_powers(n_users: int, P_max: float, per_beam: bool) -> np.ndarray:
    return np.full(n_users, P_max if per_beam else P_max / n_users)


def mrt_precoder(H: np.ndarray, P_max: float, per_beam: bool = False,
                 bs_id: int = -1) -> BeamformingMatrix:
    """Matched-filter beams, one unit-norm column per row of ``H`` scaled to the power policy."""
    H = np.atleast_2d(H)
    norms = np.linalg.norm(H, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero channel row at BS {bs_id}")
    p = _baseline_powers(H.shape[0], P_max, per_beam)
    W = H.conj().T / norms[None, :] * np.sqrt(p)[None, :]
    return BeamformingMatrix(bs_id, W, P_max, per_beam)


def zf_precoder(H: np.ndarray, P_max: float, per_beam: bool = False,
                bs_id: int = -1) -> BeamformingMatrix:
    """Zero-forcing beams H^H (H H^H)^-1, columns normalised then scaled to the power policy."""
    H = np.atleast_2d(H)
    n_users, n_ant = H.shape
    if n_users > n_ant:
        raise ValueError(f"BS {bs_id}: {n_users} users exceed {n_ant} antennas")
    gram = H @ H.conj().T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > ZF_COND_LIMIT:
        raise np.linalg.LinAlgError(
            f"BS {bs_id}: channel matrix is rank deficient (Gram condition number {cond:.3g})")
    D = H.conj().T @ np.linalg.inv(gram)
    D = D / np.linalg.norm(D, axis=0)[None, :]
    p = _baseline_powers(n_users, P_max, per_beam)
    return BeamformingMatrix(bs_id, D * np.sqrt(p)[None, :], P_max, per_beam)


def baseline_beams(method: str, H_hab: np.ndarray, H_haps: np.ndarray, K: int,
                   P_hab: float, P_haps: float, haps_per_beam: bool = True):
    """(W_hab, W_haps) for ``method`` in {"zf", "mrt"} from perfect CSI."""
    precoder = {"zf": zf_precoder, "mrt": mrt_precoder}[method]
    B = H_hab.shape[0]
    W_hab = np.stack([
        precoder(H_hab[c, c * K:(c + 1) * K], P_hab, per_beam=False, bs_id=c + 1).W
        for c in range(B)
    ])
    W_haps = precoder(H_haps, P_haps, per_beam=haps_per_beam, bs_id=0).W
    return W_hab, W_haps
