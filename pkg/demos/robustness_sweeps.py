"""Noise-level, noise-pattern and resolution sweeps for a trained checkpoint.

    python demos/robustness_sweeps.py CHECKPOINT [out_dir]

Train one first, e.g. with demos/train_and_denoise.py.
"""

import sys
from pathlib import Path

from dnfnet import shapes
from dnfnet.evaluation import run_sweep
from dnfnet.network import DNFNet

net = DNFNet.load(sys.argv[1])
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(exist_ok=True)

torus = shapes.torus(32, 16)
suites = {
    "noise-level": {"mesh": torus, "levels": [0.1, 0.2, 0.3, 0.4, 0.5]},
    "noise-pattern": {"mesh": torus},
    "resolution": {"meshes": [shapes.torus(16, 8), shapes.torus(32, 16), shapes.torus(64, 32)]},
}
for suite, cfg in suites.items():
    rows = run_sweep(suite, dict(cfg, iterations=20), out / f"{suite}.csv", model=net)
    print(suite)
    for r in rows:
        print(f"  {r['variant']:>20}  noisy {r['theta_noisy_deg']:6.2f}  "
              f"denoised {r['theta_denoised_deg']:6.2f}")
