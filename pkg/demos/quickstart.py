"""Tiny end-to-end run: a few frames, one epoch, a short TMA attack.

Takes about a minute.  Numbers are meaningless at this size; the point is
to see every artifact the pipeline writes.

    python3 demos/quickstart.py /tmp/vlapatch-quick
"""
import json
import os
import sys

from vlapatch.cli import run

out = sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart"

run("gen-data", out=out, frames=60)
run("train-model", out=out, epochs=1, dagger_rounds=0)
name = run("attack", out=out, objective="tma", dof="1", target="0", iters=5, inner=4, frames=30,
           name="tma-quick")
summary = run("rollout", out=out, patch=name, episodes=3)
print("rollout with patch:", summary)
run("eval", out=out, trials=2, tasks="reach,pick")
run("report", out=out, patch=name, episodes=2)

for root, _, files in sorted(os.walk(out)):
    for f in sorted(files):
        print(os.path.join(root, f))
grid = json.load(open(os.path.join(out, "report.json")))["eval"]["placement_grid"][name]["conditions"]
print("placement grid FR:", {k: v["failure_rate"] for k, v in grid.items()})
