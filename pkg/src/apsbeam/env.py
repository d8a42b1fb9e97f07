"""Episode-level simulator shared by training, evaluation and the baselines.

Random streams are derived from the master seed by stable string labels, so
adding a new consumer never shifts the draws seen by existing ones, and all
methods evaluated on the same (phase, episode) see identical channels.
"""
from __future__ import annotations

import hashlib
import zlib
from typing import Sequence

import numpy as np

from .channel import ChannelField, ChannelParams
from .radio import BeamformingMatrix, project_power
from .scenario import ScenarioConfig, build_layout, cluster_centers, positions, spawn_users, step_mobility


def stream(seed: int, label: str, *keys: int) -> np.random.Generator:
    """Generator for ``label`` keyed by integers (episode index, ...)."""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8")), *[int(k) for k in keys]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class Environment:
    """Users, mobility and the full channel field for one episode at a time."""

    def __init__(self, scenario: ScenarioConfig, channel: ChannelParams,
                 p_max_hab: float = 40.0, p_max_haps: float = 100.0, haps_per_beam: bool = True):
        self.cfg = scenario
        self.params = channel
        self.layout = build_layout(scenario)
        self.centers = cluster_centers(scenario)
        self.p_max_hab = p_max_hab
        self.p_max_haps = p_max_haps
        self.haps_per_beam = haps_per_beam
        self.field = ChannelField(scenario, channel, self.layout)
        self.users = []
        self.slot = 0
        self._digest = hashlib.sha256()

    def reset(self, seed: int, phase: str, episode: int) -> None:
        self._mob = stream(seed, f"{phase}/mobility", episode)
        self._shadow = stream(seed, f"{phase}/shadowing", episode)
        self._nlos = stream(seed, f"{phase}/nlos", episode)
        self._csi = stream(seed, f"{phase}/csi-noise", episode)
        self.users = spawn_users(self.cfg, self._mob)
        self.field.reset(positions(self.users), self._nlos, self._shadow)
        self.slot = 0
        self._digest = hashlib.sha256()
        self._record()

    def step(self) -> None:
        self.users = [step_mobility(u, self.cfg, self._mob, self.centers) for u in self.users]
        self.field.advance(positions(self.users), self._nlos, self._shadow)
        self.slot += 1
        self._record()

    def _record(self):
        for H in self.field.H:
            self._digest.update(np.ascontiguousarray(H).tobytes())

    @property
    def draw_digest(self) -> str:
        """Hash of every channel realisation seen so far this episode."""
        return self._digest.hexdigest()

    @property
    def H_hab(self) -> np.ndarray:
        return self.field.H_hab

    @property
    def H_haps(self) -> np.ndarray:
        return self.field.H_haps

    def cluster_users(self, c: int) -> Sequence[int]:
        K = self.cfg.K
        return range(c * K, (c + 1) * K)

    def hab_csi(self, c: int) -> np.ndarray:
        """Imperfect CSI seen by the HAB of cluster ``c``: its own users only."""
        return self.field.csi(c + 1, self.cluster_users(c), self.params.xi, self._csi)

    def haps_csi(self) -> np.ndarray:
        return self.field.csi(0, range(self.cfg.U), self.params.xi, self._csi)

    def project_hab(self, W: np.ndarray, c: int) -> np.ndarray:
        return project_power(BeamformingMatrix(c + 1, W, self.p_max_hab, per_beam=False)).W

    def project_haps(self, W: np.ndarray) -> np.ndarray:
        return project_power(BeamformingMatrix(0, W, self.p_max_haps, per_beam=self.haps_per_beam)).W
