#!/usr/bin/env python3
"""Paired ablation runs: mask mode, MNTP initialization, section-aware
alignment.

Usage: python scripts/run_ablations.py [--n 500] [--seed 4096] [--out ablations.json]
"""

import argparse
import json
import sys

from cxalign.experiments import (
    ablation_mask_mode,
    ablation_mntp_init,
    ablation_section_aware,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=500)
    parser.add_argument("--seed", type=int, default=4096)
    parser.add_argument("--out")
    args = parser.parse_args()

    results = {
        "mask_mode": ablation_mask_mode(args.n, args.seed),
        "mntp_init": ablation_mntp_init(args.n, args.seed),
        "section_aware": ablation_section_aware(args.n, args.seed),
    }
    print(json.dumps(results, indent=2))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)
            fh.write("\n")

    trends = [
        ("bidirectional <= causal", results["mask_mode"]["bidirectional"] <= results["mask_mode"]["causal"]),
        ("mntp_init >= cold_start", results["mntp_init"]["mntp_init"] >= results["mntp_init"]["cold_start"]),
        (
            "section_aware >= non_sectioned",
            results["section_aware"]["section_aware"] >= results["section_aware"]["non_sectioned"],
        ),
    ]
    failed = [name for name, ok in trends if not ok]
    for name in failed:
        print(f"TREND FAILED: {name}", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
