"""Render a frame, paste a random patch, and write each defense's output as PPM.

    python3 demos/defenses_preview.py /tmp/defenses
"""
import os
import sys

import numpy as np

from vlapatch import scene
from vlapatch.defenses import SWEEP_GRID, DefenseSpec
from vlapatch.evaluation import base_placement
from vlapatch.patch import init_patch

out = sys.argv[1] if len(sys.argv) > 1 else "runs/defenses"
os.makedirs(out, exist_ok=True)


def write_ppm(img, path, scale=4):
    img = np.kron(img, np.ones((scale, scale, 1)))
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6 %d %d 255\n" % (w, h))
        fh.write(np.round(img * 255).astype(np.uint8).tobytes())


task = scene.TaskSpec("pick-and-place")
frame = scene.render(scene.reset(task, 3))
patch = init_patch(0.05, 64, 0)
p = base_placement(task.kind, patch.side)
frame[p.py:p.py + patch.side, p.px:p.px + patch.side] = patch.values
write_ppm(frame, os.path.join(out, "patched.ppm"))

for kind, params in SWEEP_GRID.items():
    for param in (params[0], params[-1]):
        img = DefenseSpec(kind, param).apply(frame)
        err = np.abs(img - frame).mean()
        write_ppm(img, os.path.join(out, f"{kind}-{param}.ppm"))
        print(f"{kind:9s} {param:>6}: mean |change| {err:.4f}")
