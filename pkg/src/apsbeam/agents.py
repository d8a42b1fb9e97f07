"""Stochastic actors for the HAB and HAPS agents, and the training/evaluation loops.

All HAB agents share one network; the HAPS has its own. Each agent sees only
its own users' corrupted CSI plus its previous (executed) beams, outputs a
diagonal Gaussian over the real and imaginary beam weights, and every agent
is rewarded with the network-wide mean user rate.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import neuralcore as nc
from .config import RunConfig
from .env import Environment, stream
from .radio import baseline_beams, rate_report

log = logging.getLogger(__name__)

HAB = "hab"
HAPS = "haps"
TRAIN_LOG_FIELDS = ("episode", "mean_reward", "loss_hab", "loss_haps", "entropy_hab", "entropy_haps")
HALF_LOG_2PI_E = 0.5 * math.log(2 * math.pi * math.e)


class CheckpointMismatch(ValueError):
    """Checkpoint head sizes do not fit the requested configuration."""


class Actor:
    """conv(4->C) -> conv(C->C) -> dense(512) -> four linear heads (mu/log-std, re/im)."""

    def __init__(self, kind: str, rows: int, n_antennas: int, rng: np.random.Generator,
                 kernel: int = 3, hidden: int = 512, channels: int = 16, init_log_std: float = 0.0):
        self.kind = kind
        self.rows = rows
        self.n_antennas = n_antennas
        self.kernel = kernel
        self.hidden = hidden
        self.channels = channels
        self.conv1 = nc.Conv2d(4, channels, (kernel, kernel), rng)
        self.conv2 = nc.Conv2d(channels, channels, (kernel, kernel), rng)
        self.fc = nc.Dense(channels * rows * n_antennas, hidden, rng)
        A = self.action_size
        self.mu_re = nc.Dense(hidden, A, rng)
        self.log_std_re = nc.Dense(hidden, A, rng)
        self.mu_im = nc.Dense(hidden, A, rng)
        self.log_std_im = nc.Dense(hidden, A, rng)
        # start with exploration noise below the mean's spread so the state matters
        self.log_std_re.params.bias.value[:] = init_log_std
        self.log_std_im.params.bias.value[:] = init_log_std

    @property
    def action_size(self) -> int:
        """Number of complex beam weights (one real head output each)."""
        return self.rows * self.n_antennas

    @property
    def state_shape(self) -> Tuple[int, int, int]:
        return (4, self.rows, self.n_antennas)

    def layers(self) -> Dict[str, nc.LayerParams]:
        names = ("conv1", "conv2", "fc", "mu_re", "log_std_re", "mu_im", "log_std_im")
        return {f"{self.kind}.{n}": getattr(self, n).params for n in names}

    def zero_grad(self):
        for lp in self.layers().values():
            lp.zero_grad()

    @staticmethod
    def preprocess(states: np.ndarray) -> np.ndarray:
        # Channel gains are ~1e-6 in amplitude; rescale CSI and previous beams
        # per sample to unit RMS so the trunk sees O(1) inputs.
        x = np.array(states, dtype=np.float64, copy=True)
        for sl in (slice(0, 2), slice(2, 4)):
            part = x[:, sl]
            rms = np.sqrt(np.mean(part ** 2, axis=(1, 2, 3), keepdims=True))
            x[:, sl] = np.divide(part, rms, out=np.zeros_like(part), where=rms > 0)
        return x

    def forward(self, states: np.ndarray) -> Tuple[nc.Tensor, nc.Tensor]:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 3:
            states = states[None]
        if states.shape[1:] != self.state_shape:
            raise ValueError(f"{self.kind} actor expects states of shape {self.state_shape}, got {states.shape[1:]}")
        x = nc.Tensor(self.preprocess(states))
        h = nc.relu(self.conv1(x))
        h = nc.relu(self.conv2(h))
        h = nc.relu(self.fc(nc.flatten(h)))
        mu = nc.concat([self.mu_re(h), self.mu_im(h)])
        log_std = nc.concat([self.log_std_re(h), self.log_std_im(h)])
        return mu, log_std


def make_actors(cfg: RunConfig, rng: Optional[np.random.Generator] = None) -> Tuple[Actor, Actor]:
    sc, hp = cfg.scenario, cfg.agents
    if rng is None:
        rng = stream(cfg.seed, "init")
    kw = dict(kernel=hp.kernel, hidden=hp.hidden_units, channels=hp.conv_channels, init_log_std=hp.init_log_std)
    hab = Actor(HAB, sc.K, sc.n_hab_antennas, rng, **kw)
    haps = Actor(HAPS, sc.U, sc.n_haps_antennas, rng, **kw)
    return hab, haps


def encode_state(csi: np.ndarray, prev_beams: Optional[np.ndarray] = None) -> np.ndarray:
    """Four real channels [Re csi, Im csi, Re W_prev^T, Im W_prev^T], shape (4, users, antennas).

    ``csi`` is (users, antennas); ``prev_beams`` is (antennas, users) or None at the first slot.
    """
    csi = np.asarray(csi)
    if csi.ndim != 2:
        raise ValueError(f"CSI must be (users, antennas), got shape {csi.shape}")
    if prev_beams is None:
        prev = np.zeros_like(csi)
    else:
        prev = np.asarray(prev_beams).T
        if prev.shape != csi.shape:
            raise ValueError(f"previous beams {np.shape(prev_beams)} do not match CSI {csi.shape}")
    return np.stack([csi.real, csi.imag, prev.real, prev.imag]).astype(np.float64)


def action_to_beams(action: np.ndarray, rows: int, n_antennas: int) -> np.ndarray:
    """Real action vector [re..., im...] -> complex (antennas, users) beam matrix."""
    action = np.asarray(action)
    A = rows * n_antennas
    if action.shape[-1] != 2 * A:
        raise ValueError(f"action length {action.shape[-1]} != {2 * A}")
    re = action[..., :A].reshape(*action.shape[:-1], rows, n_antennas)
    im = action[..., A:].reshape(*action.shape[:-1], rows, n_antennas)
    return np.swapaxes(re + 1j * im, -1, -2)


def _policy_step(actor: Actor, states, rng, mean: bool):
    mu, log_std = actor.forward(states)
    action, logp = nc.gaussian_sample(mu, log_std, None if mean else rng)
    if not np.all(np.isfinite(action.value)):
        raise FloatingPointError(f"{actor.kind} actor produced non-finite actions")
    return action.value, logp.value, mu.value


def act_batch(actor: Actor, states: np.ndarray, rng: Optional[np.random.Generator],
              mean: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Raw actions (n, 2A) and their log-densities (n,) for a stack of states."""
    return _policy_step(actor, states, rng, mean)[:2]


def act(actor: Actor, state: np.ndarray, rng: Optional[np.random.Generator],
        mode: str = "sample") -> Tuple[np.ndarray, float]:
    """Unprojected beam matrix (antennas, users) and log-density for one state."""
    if mode not in ("sample", "mean"):
        raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
    a, lp = act_batch(actor, np.asarray(state)[None], rng, mean=(mode == "mean"))
    return action_to_beams(a[0], actor.rows, actor.n_antennas), float(lp[0])


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    kind: str
    episode: int = 0
    slot: int = 0
    baseline: float = 0.0  # counterfactual reward of this agent's mean action


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    kind: str
    baselines: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """FIFO ring buffer of transitions for one actor kind."""

    def __init__(self, capacity: int, kind: str):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.kind = kind
        self._states = self._actions = None
        self._rewards = np.zeros(capacity)
        self._baselines = np.zeros(capacity)
        self._meta = np.zeros((capacity, 2), dtype=np.int64)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, tr: Transition) -> None:
        if tr.kind != self.kind:
            raise ValueError(f"{tr.kind} transition pushed to the {self.kind} buffer")
        if self._states is None:
            self._states = np.zeros((self.capacity, *tr.state.shape))
            self._actions = np.zeros((self.capacity, *tr.action.shape))
        i = self._next
        self._states[i] = tr.state
        self._actions[i] = tr.action
        self._rewards[i] = tr.reward
        self._baselines[i] = tr.baseline
        self._meta[i] = (tr.episode, tr.slot)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Physical indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def __getitem__(self, i: int) -> Transition:
        j = self._order()[i]
        ep, slot = self._meta[j]
        return Transition(self._states[j].copy(), self._actions[j].copy(), float(self._rewards[j]),
                          self.kind, int(ep), int(slot), float(self._baselines[j]))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform draw without replacement; smaller than ``batch_size`` while filling up."""
        if self._size == 0:
            raise ValueError(f"{self.kind} replay buffer is empty")
        n = min(batch_size, self._size)
        idx = self._order()[rng.choice(self._size, size=n, replace=False)]
        return Batch(self._states[idx], self._actions[idx], self._rewards[idx].copy(), self.kind,
                     self._baselines[idx].copy())


def _loss_terms(batch: Batch, actor: Actor, gamma: float, baseline, entropy_norm: str = "per_dim"):
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.kind != actor.kind:
        raise ValueError(f"{batch.kind} batch given to the {actor.kind} actor")
    mode = {True: "batch", False: "none"}.get(baseline, baseline)
    mu, log_std = actor.forward(batch.states)
    logp = nc.gaussian_log_prob(batch.actions, mu, log_std)
    advantage = batch.rewards
    if mode == "counterfactual":
        if batch.baselines is None:
            raise ValueError("counterfactual baseline needs per-transition baselines")
        advantage = batch.rewards - batch.baselines
    elif mode not in ("batch", "none"):
        raise ValueError(f"unknown baseline mode {baseline!r}")
    if entropy_norm == "per_dim":
        gamma = gamma / batch.actions.shape[1]
    elif entropy_norm != "sum":
        raise ValueError(f"unknown entropy normalisation {entropy_norm!r}")
    weight = gamma * logp.value - advantage
    if mode != "none":
        weight = weight - weight.mean()
    loss = nc.mean(nc.add(nc.mul(logp, weight), nc.mul(logp, gamma)))
    ls = np.clip(log_std.value, nc.LOG_STD_MIN, nc.LOG_STD_MAX)
    entropy = float(np.mean(np.sum(ls + HALF_LOG_2PI_E, axis=1)))
    return loss, entropy


def actor_loss(batch: Batch, actor: Actor, gamma: float, baseline="batch",
               entropy_norm: str = "per_dim") -> nc.Tensor:
    """Score-function surrogate for E[gamma log pi - r].

    Mean over the batch of ``log pi * stop_grad(gamma log pi - A - b) + gamma log pi``
    with ``log pi`` re-evaluated by the current network at the stored raw action.
    ``A`` is the reward, or the reward minus the stored counterfactual reward when
    ``baseline="counterfactual"``; ``b`` is the batch mean of the weighting factor
    (``baseline="none"`` drops it; ``True``/``False`` alias "batch"/"none").
    With ``entropy_norm="per_dim"`` the entropy terms use log pi averaged over
    action dimensions, i.e. gamma is divided by the action length.
    """
    return _loss_terms(batch, actor, gamma, baseline, entropy_norm)[0]


def update_actor(actor: Actor, buffer: ReplayBuffer, gamma: float, batch_size: int, lr: float,
                 baseline, rng: np.random.Generator, entropy_norm: str = "per_dim") -> Tuple[float, float]:
    batch = buffer.sample(batch_size, rng)
    actor.zero_grad()
    loss, entropy = _loss_terms(batch, actor, gamma, baseline, entropy_norm)
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"non-finite {actor.kind} loss")
    nc.backward(loss)
    for lp in actor.layers().values():
        nc.adam_step(lp, lr)
    return float(loss.value), entropy


class DrlPolicy:
    """Runs both actors over one environment slot, tracking each agent's previous beams."""

    def __init__(self, hab: Actor, haps: Actor, env: Environment):
        cfg = env.cfg
        if hab.rows != cfg.K or hab.n_antennas != cfg.n_hab_antennas:
            raise CheckpointMismatch(
                f"HAB actor is sized for {hab.rows}x{hab.n_antennas}, config needs {cfg.K}x{cfg.n_hab_antennas}")
        if haps.rows != cfg.U or haps.n_antennas != cfg.n_haps_antennas:
            raise CheckpointMismatch(
                f"HAPS actor is sized for {haps.rows}x{haps.n_antennas}, config needs {cfg.U}x{cfg.n_haps_antennas}")
        self.hab, self.haps, self.env = hab, haps, env
        self.reset()

    def reset(self):
        cfg = self.env.cfg
        self.prev_hab = np.zeros((cfg.B, cfg.n_hab_antennas, cfg.K), dtype=complex)
        self.prev_haps = np.zeros((cfg.n_haps_antennas, cfg.U), dtype=complex)

    def states(self) -> Tuple[np.ndarray, np.ndarray]:
        env = self.env
        s_hab = np.stack([encode_state(env.hab_csi(c), self.prev_hab[c]) for c in range(env.cfg.B)])
        s_haps = encode_state(env.haps_csi(), self.prev_haps)[None]
        return s_hab, s_haps

    def _execute(self, a_hab, a_haps):
        env = self.env
        raw_hab = action_to_beams(a_hab, self.hab.rows, self.hab.n_antennas)
        W_hab = np.stack([env.project_hab(raw_hab[c], c) for c in range(env.cfg.B)])
        W_haps = env.project_haps(action_to_beams(a_haps[0], self.haps.rows, self.haps.n_antennas))
        return W_hab, W_haps

    def act(self, s_hab, s_haps, rng, mean: bool = False):
        """Raw actions for both kinds plus the power-projected beams to execute."""
        a_hab, _, self.mu_hab = _policy_step(self.hab, s_hab, rng, mean)
        a_haps, _, self.mu_haps = _policy_step(self.haps, s_haps, rng, mean)
        W_hab, W_haps = self._execute(a_hab, a_haps)
        self.prev_hab, self.prev_haps = W_hab, W_haps
        return a_hab, a_haps, W_hab, W_haps

    def counterfactual_rewards(self, W_hab, W_haps, noise: float) -> Tuple[np.ndarray, float]:
        """Shared reward had one agent played its mean action while the rest kept theirs.

        Uses the true global channel, which only the centralised trainer has.
        """
        env = self.env
        M_hab, M_haps = self._execute(self.mu_hab, self.mu_haps)
        hab = np.empty(env.cfg.B)
        for c in range(env.cfg.B):
            W = W_hab.copy()
            W[c] = M_hab[c]
            hab[c] = rate_report(env.H_hab, W, env.H_haps, W_haps, noise).reward
        haps = rate_report(env.H_hab, W_hab, env.H_haps, M_haps, noise).reward
        return hab, haps


@dataclass
class TrainResult:
    hab: Actor
    haps: Actor
    log: List[dict] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    buffers: Dict[str, "ReplayBuffer"] = field(default_factory=dict)

    def rewards(self) -> np.ndarray:
        return np.array([row["mean_reward"] for row in self.log])


def train(cfg: RunConfig, checkpoint_dir=None, actors: Optional[Tuple[Actor, Actor]] = None) -> TrainResult:
    """Episodic multi-agent training; one Adam step per actor every ``eta`` slots."""
    sc, hp = cfg.scenario, cfg.agents
    env = Environment(sc, cfg.channel, cfg.radio.p_max_hab, cfg.radio.p_max_haps, cfg.radio.haps_per_beam)
    hab, haps = actors if actors is not None else make_actors(cfg)
    policy = DrlPolicy(hab, haps, env)
    buffers = {HAB: ReplayBuffer(hp.buffer_capacity, HAB), HAPS: ReplayBuffer(hp.buffer_capacity, HAPS)}
    replay_rng = stream(cfg.seed, "train/replay")
    result = TrainResult(hab, haps)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    for ep in range(1, hp.episodes + 1):
        env.reset(cfg.seed, "train", ep)
        policy.reset()
        policy_rng = stream(cfg.seed, "train/policy", ep)
        rewards, losses, entropies = [], {HAB: [], HAPS: []}, {HAB: [], HAPS: []}
        for t in range(1, sc.T + 1):
            s_hab, s_haps = policy.states()
            a_hab, a_haps, W_hab, W_haps = policy.act(s_hab, s_haps, policy_rng)
            r = rate_report(env.H_hab, W_hab, env.H_haps, W_haps, cfg.channel.noise_w).reward
            rewards.append(r)
            if hp.baseline == "counterfactual":
                cf_hab, cf_haps = policy.counterfactual_rewards(W_hab, W_haps, cfg.channel.noise_w)
            else:
                cf_hab, cf_haps = np.zeros(sc.B), 0.0
            for c in range(sc.B):
                buffers[HAB].add(Transition(s_hab[c], a_hab[c], r, HAB, ep, t, float(cf_hab[c])))
            buffers[HAPS].add(Transition(s_haps[0], a_haps[0], r, HAPS, ep, t, float(cf_haps)))
            if t % hp.eta == 0:
                for actor, gamma in ((hab, hp.gamma_hab), (haps, hp.gamma_haps)):
                    try:
                        loss, ent = update_actor(actor, buffers[actor.kind], gamma, hp.batch_size,
                                                 hp.lr, hp.baseline, replay_rng, hp.entropy_norm)
                    except FloatingPointError as exc:
                        raise FloatingPointError(f"{exc} at episode {ep}, slot {t}") from None
                    losses[actor.kind].append(loss)
                    entropies[actor.kind].append(ent)
            if t < sc.T:
                env.step()
        row = {
            "episode": ep,
            "mean_reward": float(np.mean(rewards)),
            "loss_hab": _mean_or_nan(losses[HAB]),
            "loss_haps": _mean_or_nan(losses[HAPS]),
            "entropy_hab": _mean_or_nan(entropies[HAB]),
            "entropy_haps": _mean_or_nan(entropies[HAPS]),
        }
        result.log.append(row)
        log.info("episode %d mean reward %.4f", ep, row["mean_reward"])
        if checkpoint_dir is not None and ep % hp.eta_ckpt == 0:
            path = Path(checkpoint_dir) / f"actors_ep{ep:04d}.ckpt"
            save_actors(path, hab, haps, cfg, episode=ep)
            result.checkpoints.append(str(path))
    result.buffers = buffers
    return result


def _mean_or_nan(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def write_train_log(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_FIELDS)
        for row in rows:
            w.writerow([row["episode"]] + [repr(float(row[k])) for k in TRAIN_LOG_FIELDS[1:]])


@dataclass
class EvalResult:
    """Per-method (episodes, T) arrays of network sum-rate in bps/Hz."""

    sum_rates: Dict[str, np.ndarray]
    digests: List[str]

    def per_slot_mean(self, method: str) -> np.ndarray:
        return self.sum_rates[method].mean(axis=0)

    def per_slot_std(self, method: str) -> np.ndarray:
        return self.sum_rates[method].std(axis=0)

    def time_average(self, method: str) -> float:
        return float(self.sum_rates[method].mean())

    def summary(self) -> Dict[str, float]:
        return {m: self.time_average(m) for m in self.sum_rates}


def evaluate(cfg: RunConfig, actors: Optional[Tuple[Actor, Actor]] = None, episodes: Optional[int] = None,
             methods: Sequence[str] = ("drl", "zf", "mrt"), mean_action: Optional[bool] = None,
             phase: str = "eval") -> EvalResult:
    """Frozen-weight execution; every method sees the same channel draws per episode."""
    sc = cfg.scenario
    episodes = cfg.agents.eval_episodes if episodes is None else episodes
    mean_action = cfg.agents.mean_action if mean_action is None else mean_action
    methods = list(methods)
    unknown = set(methods) - {"drl", "zf", "mrt"}
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    env = Environment(sc, cfg.channel, cfg.radio.p_max_hab, cfg.radio.p_max_haps, cfg.radio.haps_per_beam)
    policy = None
    if "drl" in methods:
        if actors is None:
            raise ValueError("evaluating 'drl' needs trained actors")
        policy = DrlPolicy(*actors, env)
    noise = cfg.channel.noise_w
    out = {m: np.zeros((episodes, sc.T)) for m in methods}
    digests = []
    for ep in range(episodes):
        env.reset(cfg.seed, phase, ep)
        if policy is not None:
            policy.reset()
        policy_rng = stream(cfg.seed, f"{phase}/policy", ep)
        for t in range(sc.T):
            for m in methods:
                if m == "drl":
                    s_hab, s_haps = policy.states()
                    _, _, W_hab, W_haps = policy.act(s_hab, s_haps, policy_rng, mean_action)
                else:
                    W_hab, W_haps = baseline_beams(m, env.H_hab, env.H_haps, sc.K, cfg.radio.p_max_hab,
                                                   cfg.radio.p_max_haps, cfg.radio.haps_per_beam)
                out[m][ep, t] = rate_report(env.H_hab, W_hab, env.H_haps, W_haps, noise).sum_rate
            if t < sc.T - 1:
                env.step()
        digests.append(env.draw_digest)
    return EvalResult(out, digests)


def _actor_manifest(actor: Actor) -> dict:
    return {"rows": actor.rows, "n_antennas": actor.n_antennas, "action_size": actor.action_size,
            "kernel": actor.kernel, "hidden": actor.hidden, "channels": actor.channels}


def save_actors(path, hab: Actor, haps: Actor, cfg: RunConfig, episode: int = 0) -> None:
    layers = {**hab.layers(), **haps.layers()}
    manifest = {
        "format": "apsbeam-actors",
        "episode": episode,
        "config_digest": cfg.digest(),
        "hyperparams": asdict(cfg.agents),
        HAB: _actor_manifest(hab),
        HAPS: _actor_manifest(haps),
    }
    nc.save_checkpoint(path, layers, manifest)


def load_actors(path, cfg: RunConfig) -> Tuple[Actor, Actor]:
    """Rebuild both actors from ``path``; raises :class:`CheckpointMismatch` on size conflicts."""
    header, arrays = nc.read_checkpoint(path)
    manifest = header["manifest"]
    if manifest.get("format") != "apsbeam-actors":
        raise ValueError(f"{path}: not an actor checkpoint")
    sc = cfg.scenario
    want = {HAB: (sc.K, sc.n_hab_antennas), HAPS: (sc.U, sc.n_haps_antennas)}
    actors = []
    for kind in (HAB, HAPS):
        m = manifest[kind]
        if (m["rows"], m["n_antennas"]) != want[kind]:
            raise CheckpointMismatch(
                f"{kind} head size {m['action_size']} (users x antennas {m['rows']}x{m['n_antennas']}) "
                f"does not match config {want[kind][0]}x{want[kind][1]}")
        actor = Actor(kind, m["rows"], m["n_antennas"], np.random.default_rng(0),
                      kernel=m["kernel"], hidden=m["hidden"], channels=m["channels"])
        nc.restore_layers(actor.layers(), header, arrays)
        actors.append(actor)
    return actors[0], actors[1]
