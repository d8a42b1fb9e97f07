"""Network geometry and ground-user mobility.

Cluster centres sit on a square grid with spacing ``l``; one HAB hovers above
each centre and the HAPS sits above the centroid of all centres. Users move
in straight lines and pick a fresh heading whenever a step would carry them
out of their cluster disc.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

MAX_HEADING_RETRIES = 64


@dataclass(frozen=True)
class ScenarioConfig:
    B: int = 4
    K: int = 4
    q: float = 2000.0
    l: float = 6000.0
    hab_altitude: float = 2000.0
    haps_altitude: float = 20000.0
    v: float = 1.0
    T_c: float = 0.02
    T: int = 50
    n_hab_antennas: int = 36
    n_haps_antennas: int = 64

    def __post_init__(self):
        if self.B < 1 or self.K < 1:
            raise ValueError(f"need B >= 1 and K >= 1, got B={self.B}, K={self.K}")
        if self.q <= 0:
            raise ValueError(f"cluster radius must be positive, got {self.q}")
        if self.l < 0:
            raise ValueError(f"cluster spacing must be non-negative, got {self.l}")
        if self.v < 0 or self.T_c < 0:
            raise ValueError("speed and slot duration must be non-negative")
        if self.hab_altitude <= 0 or self.haps_altitude <= 0:
            raise ValueError("altitudes must be positive")
        if self.T < 1:
            raise ValueError(f"episode length must be >= 1, got {self.T}")
        for n in (self.n_hab_antennas, self.n_haps_antennas):
            if n < 1 or math.isqrt(n) ** 2 != n:
                raise ValueError(f"antenna count {n} is not a perfect square")

    @property
    def U(self) -> int:
        return self.K * self.B

    @property
    def D_max(self) -> float:
        return self.v * self.T_c

    @property
    def clusters_overlap(self) -> bool:
        return self.B > 1 and self.l < 2 * self.q


@dataclass(frozen=True)
class UserState:
    user_id: int
    cluster_id: int
    x: float
    y: float
    heading: float

    @property
    def position(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class BsPose:
    """A base station; ``bs_id == 0`` is the HAPS, ``bs_id == b`` serves cluster ``b - 1``."""

    bs_id: int
    x: float
    y: float
    z: float
    antenna_count: int

    @property
    def is_haps(self) -> bool:
        return self.bs_id == 0

    @property
    def position(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)


def cluster_centers(cfg: ScenarioConfig) -> np.ndarray:
    """(B, 2) array of cluster centres, filled row by row on a ceil(sqrt(B)) grid."""
    side = math.ceil(math.sqrt(cfg.B))
    idx = np.arange(cfg.B)
    return np.stack([(idx % side) * cfg.l, (idx // side) * cfg.l], axis=1).astype(float)


def build_layout(cfg: ScenarioConfig) -> List[BsPose]:
    """HAPS first, then one HAB per cluster centre."""
    centers = cluster_centers(cfg)
    cx, cy = centers.mean(axis=0)
    poses = [BsPose(0, float(cx), float(cy), cfg.haps_altitude, cfg.n_haps_antennas)]
    for b, (x, y) in enumerate(centers, start=1):
        poses.append(BsPose(b, float(x), float(y), cfg.hab_altitude, cfg.n_hab_antennas))
    return poses


def spawn_users(cfg: ScenarioConfig, rng: np.random.Generator) -> List[UserState]:
    centers = cluster_centers(cfg)
    users = []
    for c in range(cfg.B):
        r = cfg.q * np.sqrt(rng.random(cfg.K))
        ang = rng.uniform(0.0, 2 * np.pi, cfg.K)
        headings = rng.uniform(0.0, 2 * np.pi, cfg.K)
        for k in range(cfg.K):
            users.append(UserState(
                user_id=c * cfg.K + k,
                cluster_id=c,
                x=float(centers[c, 0] + r[k] * np.cos(ang[k])),
                y=float(centers[c, 1] + r[k] * np.sin(ang[k])),
                heading=float(headings[k]),
            ))
    return users


def step_mobility(user: UserState, cfg: ScenarioConfig, rng: np.random.Generator,
                  centers: np.ndarray | None = None) -> UserState:
    if centers is None:
        centers = cluster_centers(cfg)
    cx, cy = centers[user.cluster_id]
    step = cfg.D_max
    heading = user.heading
    for _ in range(MAX_HEADING_RETRIES + 1):
        nx = user.x + step * math.cos(heading)
        ny = user.y + step * math.sin(heading)
        if math.hypot(nx - cx, ny - cy) <= cfg.q:
            return replace(user, x=nx, y=ny, heading=heading)
        heading = float(rng.uniform(0.0, 2 * np.pi))
    return replace(user, heading=heading)


def geometry(bs: BsPose, user: UserState) -> Tuple[float, float, float]:
    """Distance, elevation and azimuth of ``user`` as seen from ``bs``."""
    d, theta, phi = geometry_arrays(np.array(bs.position), np.array([[user.x, user.y]]))
    return float(d[0]), float(theta[0]), float(phi[0])


def geometry_arrays(bs_xyz: Sequence[float], user_xy: np.ndarray):
    """Vectorised :func:`geometry` for one BS and an (n, 2) array of ground users."""
    bs_xyz = np.asarray(bs_xyz, dtype=float)
    user_xy = np.atleast_2d(np.asarray(user_xy, dtype=float))
    dx = user_xy[:, 0] - bs_xyz[0]
    dy = user_xy[:, 1] - bs_xyz[1]
    dz = bs_xyz[2]
    d = np.sqrt(dx * dx + dy * dy + dz * dz)
    if np.any(d == 0):
        raise ValueError("user and base station are co-located")
    theta = np.arcsin(np.clip(dz / d, -1.0, 1.0))
    phi = np.arctan2(dy, dx)
    return d, theta, phi


def positions(users: Sequence[UserState]) -> np.ndarray:
    return np.array([[u.x, u.y] for u in users], dtype=float)
