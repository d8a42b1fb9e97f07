"""Time-correlated Rician channels between airborne base stations and ground users.

Every link combines free-space path loss with log-normal shadowing, a
planar-array LoS response and an AR(1) (Jakes) scattered component. All
random draws go through an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import j0

from .scenario import BsPose, ScenarioConfig, UserState, geometry, geometry_arrays

SPEED_OF_LIGHT = 3e8


@dataclass(frozen=True)
class ChannelParams:
    f_c: float = 2e9
    c: float = SPEED_OF_LIGHT
    X: float = 10.0
    rho: Optional[float] = None  # None -> Jakes value from the Doppler shift
    shadow_var_db_hab: float = 3.0
    shadow_var_db_haps: float = 3.0
    xi: float = 1.0
    noise_w: float = 1e-13
    freeze_shadowing: bool = False

    def __post_init__(self):
        if self.rho is not None and not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must lie in [0, 1], got {self.xi}")
        if self.X < 0:
            raise ValueError(f"Rician factor must be non-negative, got {self.X}")
        if self.noise_w <= 0:
            raise ValueError(f"noise power must be positive, got {self.noise_w}")
        if self.f_c <= 0 or self.c <= 0:
            raise ValueError("carrier frequency and speed of light must be positive")
        if self.shadow_var_db_hab < 0 or self.shadow_var_db_haps < 0:
            raise ValueError("shadowing variances must be non-negative")

    @property
    def wavelength(self) -> float:
        return self.c / self.f_c

    @property
    def d_x(self) -> float:
        return self.wavelength / 2

    @property
    def d_y(self) -> float:
        return self.wavelength / 2

    def resolve_rho(self, v: float, T_c: float) -> float:
        if self.rho is not None:
            return float(self.rho)
        return doppler_rho(v, T_c, self.f_c, self.c)

    def shadow_var_db(self, haps: bool) -> float:
        if self.freeze_shadowing:
            return 0.0
        return self.shadow_var_db_haps if haps else self.shadow_var_db_hab


def doppler_rho(v: float, T_c: float, f_c: float, c: float = SPEED_OF_LIGHT) -> float:
    """Jakes correlation J0(2 pi f_d T_c) with maximum Doppler f_d = v f_c / c."""
    f_d = v * f_c / c
    return float(j0(2 * np.pi * f_d * T_c))


def crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) samples."""
    shape = (shape,) if np.ndim(shape) == 0 else tuple(shape)
    z = rng.standard_normal((*shape, 2))
    return (z[..., 0] + 1j * z[..., 1]) / np.sqrt(2.0)


def path_loss_db(d, f_c: float, c: float = SPEED_OF_LIGHT):
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    return 20.0 * np.log10(c / (4 * np.pi * f_c * d))


def large_scale_gain(d, params: ChannelParams, rng: Optional[np.random.Generator] = None,
                     shadow_var_db: float = 0.0, return_db: bool = False):
    """Linear large-scale gain; ``rng=None`` or zero variance disables shadowing."""
    L_db = path_loss_db(d, params.f_c, params.c)
    if rng is not None and shadow_var_db > 0:
        L_db = L_db - rng.normal(0.0, math.sqrt(shadow_var_db), size=np.shape(L_db))
    if return_db:
        return L_db
    return 10.0 ** (L_db / 10.0)


def steering_vector(theta, phi, n_antennas: int, params: ChannelParams) -> np.ndarray:
    """UPA response a(theta, phi) kron b(theta, phi); broadcasts over angle arrays.

    Returns an array of shape ``theta.shape + (n_antennas,)``; antenna index is
    ``m * sqrt(N) + n`` with m the horizontal and n the vertical element.
    """
    side = math.isqrt(n_antennas)
    if side * side != n_antennas:
        raise ValueError(f"antenna count {n_antennas} is not a perfect square")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    lam = params.wavelength
    # cos of the float nearest pi/2 is ~6e-17; snap it so nadir is exactly all-ones
    cos_t = np.where(np.abs(np.abs(theta) - np.pi / 2) <= 1e-12, 0.0, np.cos(theta))
    d_h = params.d_x * cos_t * np.sin(phi) / lam
    d_v = params.d_y * cos_t * np.cos(phi) / lam
    idx = np.arange(side)
    a = np.exp(2j * np.pi * d_h[..., None] * idx)
    b = np.exp(2j * np.pi * d_v[..., None] * idx)
    out = a[..., :, None] * b[..., None, :]
    return out.reshape(*theta.shape, n_antennas)


def advance_nlos(prev: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    prev = np.asarray(prev)
    if rho == 1.0:
        return prev.copy()
    z = crandn(rng, prev.shape)
    if rho == 0.0:
        return z
    return rho * prev + math.sqrt(1.0 - rho * rho) * z


def compose_small_scale(los: np.ndarray, nlos: np.ndarray, X: float) -> np.ndarray:
    los = np.asarray(los)
    nlos = np.asarray(nlos)
    if los.shape != nlos.shape:
        raise ValueError(f"LoS shape {los.shape} does not match NLoS shape {nlos.shape}")
    if X == 0:
        return nlos.copy()
    return math.sqrt(X / (1.0 + X)) * los + math.sqrt(1.0 / (1.0 + X)) * nlos


def corrupt_csi(h: np.ndarray, xi: float, rng: np.random.Generator, scale=1.0) -> np.ndarray:
    """Imperfect estimate ``xi h + sqrt(1 - xi^2) e``.

    ``scale`` is the standard deviation of the error entries (per row when an
    array); the simulator passes sqrt(L) so reliability is path-loss independent.
    """
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    h = np.asarray(h)
    if xi == 1.0:
        return h.copy()
    scale = np.asarray(scale, dtype=float)
    if scale.ndim:
        scale = scale[..., None]
    e = crandn(rng, h.shape) * scale
    return xi * h + math.sqrt(1.0 - xi * xi) * e


@dataclass
class ChannelRealization:
    h: np.ndarray
    hhat_nlos: np.ndarray
    hhat_los: np.ndarray
    L: float
    h_tilde: Optional[np.ndarray] = None

    @property
    def hhat(self) -> np.ndarray:
        return self.h / math.sqrt(self.L)


def realize_channel(bs: BsPose, user: UserState, state: Optional[ChannelRealization],
                    params: ChannelParams, rng: np.random.Generator, rho: float,
                    shadow_rng: Optional[np.random.Generator] = None) -> ChannelRealization:
    """One slot of one link. ``state=None`` marks the episode start (fresh NLoS draw)."""
    d, theta, phi = geometry(bs, user)
    L = float(large_scale_gain(d, params, shadow_rng, params.shadow_var_db(bs.is_haps)))
    los = steering_vector(theta, phi, bs.antenna_count, params)
    if state is None:
        nlos = crandn(rng, bs.antenna_count)
    else:
        nlos = advance_nlos(state.hhat_nlos, rho, rng)
    hhat = compose_small_scale(los, nlos, params.X)
    return ChannelRealization(h=hhat * math.sqrt(L), hhat_nlos=nlos, hhat_los=los, L=L)


class ChannelField:
    """All (BS, user) links of the network, advanced one slot at a time.

    Row ``b`` of the gain matrix ``L`` and of ``H[b]`` belongs to ``layout[b]``
    (0 = HAPS). HAB channels to every user are kept because they carry the
    inter-cluster interference.
    """

    def __init__(self, cfg: ScenarioConfig, params: ChannelParams, layout: Sequence[BsPose]):
        self.cfg = cfg
        self.params = params
        self.layout = list(layout)
        self.rho = params.resolve_rho(cfg.v, cfg.T_c)
        self.nlos: Optional[List[np.ndarray]] = None
        self.H: List[np.ndarray] = []
        self.L = np.zeros((len(self.layout), cfg.U))

    def _realize(self, user_xy, nlos_rng, shadow_rng, fresh: bool):
        if fresh:
            self.nlos = [crandn(nlos_rng, (len(user_xy), bs.antenna_count)) for bs in self.layout]
        else:
            self.nlos = [advance_nlos(n, self.rho, nlos_rng) for n in self.nlos]
        H = []
        for b, bs in enumerate(self.layout):
            d, theta, phi = geometry_arrays(bs.position, user_xy)
            var = self.params.shadow_var_db(bs.is_haps)
            L = large_scale_gain(d, self.params, shadow_rng, var)
            los = steering_vector(theta, phi, bs.antenna_count, self.params)
            hhat = compose_small_scale(los, self.nlos[b], self.params.X)
            self.L[b] = L
            H.append(hhat * np.sqrt(L)[:, None])
        self.H = H
        return H

    def reset(self, user_xy: np.ndarray, nlos_rng, shadow_rng) -> List[np.ndarray]:
        return self._realize(np.asarray(user_xy, float), nlos_rng, shadow_rng, fresh=True)

    def advance(self, user_xy: np.ndarray, nlos_rng, shadow_rng) -> List[np.ndarray]:
        if self.nlos is None:
            raise RuntimeError("advance() before reset()")
        return self._realize(np.asarray(user_xy, float), nlos_rng, shadow_rng, fresh=False)

    @property
    def H_haps(self) -> np.ndarray:
        return self.H[0]

    @property
    def H_hab(self) -> np.ndarray:
        """(B, U, N_b) stack of HAB-to-user channels."""
        return np.stack(self.H[1:])

    def csi(self, b: int, users: Sequence[int], xi: float, rng: np.random.Generator) -> np.ndarray:
        rows = self.H[b][list(users)]
        return corrupt_csi(rows, xi, rng, scale=np.sqrt(self.L[b, list(users)]))
