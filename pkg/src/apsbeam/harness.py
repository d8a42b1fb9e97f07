"""Command line entry point, sweeps and result files.

Exit codes are distinct per failure class so scripts can branch on them:

    0  success
    1  runtime failure (numerical trouble, failed self-test)
    2  bad command line (unknown flag, bad value)
    3  config missing, unreadable or invalid
    4  checkpoint does not match the config dimensions
    5  checkpoint missing or unreadable
    6  output directory not writable
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import agents
from .agents import CheckpointMismatch
from .config import ConfigError, RunConfig, dump, load

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISMATCH = 4
EXIT_CHECKPOINT = 5
EXIT_OUTPUT = 6

OUTPUT_ENV = "APSBEAM_OUTPUT_DIR"
SWEEP_PARAMS = ("xi", "l", "K")
RESULT_FIELDS = ("method", "param", "value", "slot", "mean_sumrate_bpshz", "std_sumrate", "episodes", "seed")


class UsageError(Exception):
    pass


class CheckpointError(Exception):
    """Checkpoint missing, unreadable or not an actor checkpoint."""


class OutputError(Exception):
    pass


@dataclass(frozen=True)
class ResultRow:
    method: str
    param: str
    value: float
    slot: int
    mean_sumrate: float
    std_sumrate: float
    episodes: int
    seed: int
    xi: float
    l: float
    K: int


def output_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def _point_config(cfg: RunConfig, param: str, value) -> RunConfig:
    if param == "xi":
        return cfg.with_values("channel", xi=float(value))
    if param == "l":
        return cfg.with_values("scenario", l=float(value))
    if param == "K":
        if float(value) != int(value):
            raise ValueError(f"K must be an integer, got {value}")
        return cfg.with_values("scenario", K=int(value))
    raise ValueError(f"cannot sweep {param!r}; choose one of {SWEEP_PARAMS}")


def _checkpoint_for(checkpoint, value) -> Optional[str]:
    if checkpoint is None:
        return None
    if isinstance(checkpoint, dict):
        return checkpoint.get(value) or checkpoint.get(int(value))
    return str(checkpoint).replace("{K}", str(int(value)))


def run_sweep(cfg: RunConfig, param: str, values: Sequence[float],
              checkpoint: Union[None, str, Dict[int, str]] = None,
              episodes: Optional[int] = None, drl: Optional[bool] = None) -> List[ResultRow]:
    """Evaluate DRL (when a checkpoint is available), ZF and MRT at every sweep point.

    All methods at a point run on the same channel and mobility draws. For ``l``
    and ``xi`` one checkpoint serves every point. For ``K`` the head sizes change,
    so ``checkpoint`` must be a mapping ``{K: path}`` or a path containing ``{K}``.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param!r}; choose one of {SWEEP_PARAMS}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if checkpoint is None:
        checkpoint = cfg.checkpoint
    if drl is None:
        drl = checkpoint is not None or param == "K"
    points = [(v, _point_config(cfg, param, v)) for v in values]
    paths = {}
    if drl:
        for v, _ in points:
            paths[v] = _checkpoint_for(checkpoint, v)
        missing = [v for v, p in paths.items() if p is None or not Path(p).is_file()]
        if missing:
            what = ", ".join(f"{param}={v:g}" for v in missing)
            raise CheckpointError(f"no checkpoint for {what}")
    methods = ("drl", "zf", "mrt") if drl else ("zf", "mrt")
    rows = []
    actors = None
    for v, pcfg in points:
        if drl and (actors is None or param == "K"):
            actors = _load(paths[v], pcfg)
        res = agents.evaluate(pcfg, actors, episodes=episodes, methods=methods)
        n_ep = res.sum_rates[methods[0]].shape[0]
        for m in methods:
            mean, std = res.per_slot_mean(m), res.per_slot_std(m)
            for t in range(pcfg.scenario.T):
                rows.append(ResultRow(m, param, float(v), t + 1, float(mean[t]), float(std[t]), n_ep,
                                      cfg.seed, pcfg.channel.xi, pcfg.scenario.l, pcfg.scenario.K))
    return rows


def _load(path, cfg: RunConfig):
    try:
        return agents.load_actors(path, cfg)
    except CheckpointMismatch:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None


def _fmt_value(param: str, v: float) -> str:
    return str(int(v)) if param == "K" else repr(float(v))


def summarize(rows: Sequence[ResultRow]) -> dict:
    """Time-averaged sum-rate per (method, value) and the DRL-minus-ZF gap per value."""
    acc: Dict[tuple, List[float]] = {}
    for r in rows:
        acc.setdefault((r.method, r.param, r.value), []).append(r.mean_sumrate)
    series = [{"method": m, "param": p, "value": v, "time_avg_sumrate_bpshz": float(np.mean(x))}
              for (m, p, v), x in sorted(acc.items())]
    avg = {(s["method"], s["value"]): s["time_avg_sumrate_bpshz"] for s in series}
    gaps = [{"value": v, "drl_minus_zf_bpshz": avg[("drl", v)] - avg[("zf", v)]}
            for (m, v) in sorted(avg) if m == "drl" and ("zf", v) in avg]
    return {
        "param": rows[0].param if rows else None,
        "seed": rows[0].seed if rows else None,
        "episodes": rows[0].episodes if rows else None,
        "series": series,
        "drl_minus_zf": gaps,
    }


def emit_results(rows: Sequence[ResultRow], directory) -> Dict[str, Path]:
    """Write ``results.csv`` and ``summary.json`` into ``directory``."""
    directory = Path(directory)
    try:
        return _write_results(rows, directory)
    except OSError as exc:
        raise OutputError(f"cannot write results to {directory}: {exc.strerror or exc}") from None


def _write_results(rows, directory: Path) -> Dict[str, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: (r.method, r.value, r.slot))
    csv_path = directory / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in ordered:
            w.writerow([r.method, r.param, _fmt_value(r.param, r.value), r.slot, repr(r.mean_sumrate),
                        repr(r.std_sumrate), r.episodes, r.seed])
    json_path = directory / "summary.json"
    json_path.write_text(json.dumps(summarize(ordered), indent=2, sort_keys=True) + "\n")
    return {"csv": csv_path, "json": json_path}


def run_train(cfg: RunConfig) -> Path:
    out = output_dir(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        dump(cfg, out / "config.ini")
    except OSError as exc:
        raise OutputError(f"cannot write to {out}: {exc.strerror or exc}") from None
    t0 = time.perf_counter()
    res = agents.train(cfg, checkpoint_dir=out / "checkpoints")
    agents.write_train_log(res.log, out / "train_log.csv")
    final = out / "actors.ckpt"
    agents.save_actors(final, res.hab, res.haps, cfg, episode=cfg.agents.episodes)
    log.info("trained %d episodes in %.1fs", cfg.agents.episodes, time.perf_counter() - t0)
    return final


# --- self-test -------------------------------------------------------------

def _selftest_checks():
    from . import neuralcore as nc
    from .channel import ChannelParams, crandn, doppler_rho, path_loss_db, steering_vector
    from .config import dumps, loads
    from .radio import BeamformingMatrix, project_power, zf_precoder

    p = ChannelParams()
    rng = np.random.default_rng(0)

    def path_loss():
        return abs(path_loss_db(2000.0, p.f_c) + 104.48297201260793) < 1e-6

    def steering():
        return (np.array_equal(steering_vector(np.pi / 2, 0.3, 36, p), np.ones(36, complex))
                and np.allclose(steering_vector(0.0, np.pi / 2, 4, p), [1, 1, -1, -1], atol=1e-12))

    def doppler():
        return abs(doppler_rho(1.0, 0.02, 2e9) - 0.8320884733048445) < 1e-12

    def zf_nulling():
        H = crandn(rng, (4, 36))
        G = np.abs(H @ zf_precoder(H, 40.0).W)
        return (G - np.diag(np.diag(G))).max() < 1e-9 * np.diag(G).min()

    def projection():
        W = crandn(rng, (36, 4)) * 10
        once = project_power(BeamformingMatrix(1, W, 40.0))
        return once.is_feasible() and np.allclose(project_power(once).W, once.W)

    def conv_gradient():
        x = nc.Tensor(rng.normal(size=(1, 2, 3, 3)))
        w = nc.Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        b = nc.Tensor(np.zeros(2))
        nc.backward(nc.tsum(nc.square(nc.conv2d(x, w, b))))
        i = (1, 0, 2, 1)
        old = w.value[i]
        vals = []
        for d in (1e-6, -1e-6):
            w.value[i] = old + d
            vals.append(float(np.sum(nc.conv2d(x, w, b).value ** 2)))
        w.value[i] = old
        return abs((vals[0] - vals[1]) / 2e-6 - w.grad[i]) < 1e-5 * max(1.0, abs(w.grad[i]))

    def config_round_trip():
        text = dumps(RunConfig())
        return dumps(loads(text)) == text

    return [("path loss", path_loss), ("steering", steering), ("doppler", doppler),
            ("zf nulling", zf_nulling), ("projection", projection), ("conv gradient", conv_gradient),
            ("config round trip", config_round_trip)]


def selftest(stream=sys.stdout) -> bool:
    ok = True
    for name, check in _selftest_checks():
        passed = bool(check())
        ok &= passed
        print(f"{'ok' if passed else 'FAIL'} {name}", file=stream)
    return ok


# --- command line ------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_values(text: str) -> List[float]:
    items = [s for s in text.split(",") if s.strip()]
    try:
        return [float(s) for s in items]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apsbeam", description="Two-layer airborne beamforming simulator")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    t = sub.add_parser("train", help="train both actors")
    t.add_argument("--config", required=True)
    e = sub.add_parser("eval", help="evaluate a checkpoint against ZF and MRT")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--mean-action", action="store_true")
    s = sub.add_parser("sweep", help="sweep xi, l or K")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True)
    s.add_argument("--checkpoint", help="checkpoint path; for K sweeps use a '{K}' placeholder")
    s.add_argument("--baselines-only", action="store_true")
    sub.add_parser("selftest", help="run the built-in invariant checks")
    return p


def _dispatch(args) -> int:
    if args.command == "selftest":
        return EXIT_OK if selftest() else EXIT_RUNTIME
    cfg = load(args.config)
    if args.command == "train":
        path = run_train(cfg)
        print(f"wrote {path}")
        return EXIT_OK
    out = output_dir(cfg)
    if args.command == "eval":
        ckpt = args.checkpoint or cfg.checkpoint
        if ckpt is None:
            raise UsageError("eval needs --checkpoint (or [run] checkpoint in the config)")
        if args.mean_action:
            cfg = cfg.with_values("agents", mean_action=True)
        rows = run_sweep(cfg, "xi", [cfg.channel.xi], checkpoint=ckpt, drl=True)
    else:
        values = _parse_values(args.values)
        if not values:
            raise UsageError("--values is empty")
        rows = run_sweep(cfg, args.param, values, checkpoint=args.checkpoint,
                         drl=False if args.baselines_only else None)
    paths = emit_results(rows, out)
    print(f"wrote {paths['csv']}")
    return EXIT_OK


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: train, eval, sweep or selftest")
        return _dispatch(args)
    except UsageError as exc:
        code, msg = EXIT_USAGE, f"usage error: {exc}"
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except CheckpointMismatch as exc:
        code, msg = EXIT_MISMATCH, f"checkpoint mismatch: {exc}"
    except CheckpointError as exc:
        code, msg = EXIT_CHECKPOINT, f"checkpoint error: {exc}"
    except OutputError as exc:
        code, msg = EXIT_OUTPUT, f"output error: {exc}"
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        code, msg = EXIT_RUNTIME, f"error: {exc}"
    print(f"apsbeam: {msg}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(cli_main())
