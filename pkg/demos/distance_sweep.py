"""How cluster spacing drives inter-cluster interference, via the sweep API.

Equivalent CLI: ``apsbeam sweep --config run.ini --param l --values 2000,4000,6000 --baselines-only``
"""
from apsbeam import harness
from apsbeam.config import RunConfig

rows = harness.run_sweep(RunConfig(), "l", [2000.0, 4000.0, 6000.0], episodes=10, drl=False)
summary = harness.summarize(rows)
for s in summary["series"]:
    print(f"{s['method']:4s} l={s['value'] / 1000:.0f} km  {s['time_avg_sumrate_bpshz']:7.2f} bps/Hz")
