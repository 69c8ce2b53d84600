"""Scratch tuning harness: run the smoke pipeline at small n under several
candidate configs and print the criterion-7 metrics for each."""

import json
import sys

sys.path.insert(0, "src")

from cxalign.experiments import run_smoke
from cxalign.pipeline import RunConfig

N = int(sys.argv[1]) if len(sys.argv) > 1 else 600

CONFIGS = {
    "default": RunConfig(),
    "tuned": RunConfig(epochs_mntp=2, epochs_contrastive=6, lr_text=1e-3),
}

which = sys.argv[2:] or list(CONFIGS)
for name in which:
    out = run_smoke(N, run=CONFIGS[name])
    m = out["metrics"]
    print(name, json.dumps(m, indent=2), flush=True)
