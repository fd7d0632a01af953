"""Reference-scene calibration oracle.

Runs the end-to-end fit on the frozen synthetic reference pair and records
the metrics the acceptance suite checks. Two modes:

  python scripts/calibrate_reference.py --refresh
      full fit plus the single-term ablations; rewrites
      tests/data/reference_metrics.json (the frozen expected-metric file)

  python scripts/calibrate_reference.py --sweep reg_weight=0.01,0.1 zero_weight=0.1,1
      grid sweep over config fields, one JSON line per run on stdout

The acceptance thresholds are not derived from this file; it documents what
the shipped defaults achieve so regressions are visible.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from nirfuse import imaging, synth, trainer
from nirfuse.config import TrainConfig
from nirfuse.fields import resolution_consistency

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "reference_metrics.json"
ABLATIONS = {"full": {}, "no_zero_mean": {"use_zero_mean": False}, "no_grad": {"use_grad": False},
             "no_reg": {"use_reg": False}}


def reference_config(**overrides) -> TrainConfig:
    return TrainConfig(**synth.REFERENCE_FIT).replace(**overrides)


def measure(overrides: dict) -> dict:
    clean, noisy, nir = synth.reference_pair()
    config = reference_config(**overrides)
    t0 = time.perf_counter()
    result = trainer.fit(noisy, nir, config)
    wall = time.perf_counter() - t0
    d = result.diagnostics
    h, w = clean.shape[:2]
    restored = d["restored"]
    baseline = np.clip(noisy * config.rgb_gain, 0.0, 1.0)
    m = imaging.evaluate_pair(restored, nir, clean)
    mb = imaging.evaluate_pair(baseline, nir, clean)
    branches = result.model.render_branches(h, w)
    centred = branches.high - result.model.beta.value
    return {
        "overrides": overrides,
        "wall_time_s": round(wall, 1),
        "psnr": m["psnr"],
        "psnr_baseline": mb["psnr"],
        "psnr_gain_db": m["psnr"] - mb["psnr"],
        "ssim": m["ssim"],
        "structure_ncc": m["structure_ncc"],
        "structure_ncc_baseline": mb["structure_ncc"],
        "low_detail_fraction": imaging.detail_energy_fraction(branches.low),
        "high_ll_fraction": imaging.ll_energy_fraction(centred),
        "high_mean_offset": float(np.mean(centred)),
        "consistency_2x": resolution_consistency(result.model, h, w),
        "final_log": result.log[-1].row() if result.log else None,
    }


def parse_grid(items: list) -> list:
    axes = []
    for item in items:
        key, _, values = item.partition("=")
        axes.append([(key, json.loads(v)) for v in values.split(",")])
    return [dict(combo) for combo in itertools.product(*axes)]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--refresh", action="store_true", help="rewrite the frozen expected-metric file")
    p.add_argument("--sweep", nargs="+", metavar="FIELD=V1,V2", help="grid over config fields")
    p.add_argument("--out", type=Path, default=OUT)
    args = p.parse_args(argv)
    if args.sweep:
        for overrides in parse_grid(args.sweep):
            print(json.dumps(measure(overrides)), flush=True)
        return 0
    if not args.refresh:
        p.error("pass --refresh or --sweep")
    record = {
        "scene": synth.sidecar(synth.REFERENCE_SCENE, synth.REFERENCE_DEGRADE),
        "fit": {k: v for k, v in reference_config().to_flat().items()},
        "runs": {},
    }
    for name, overrides in ABLATIONS.items():
        record["runs"][name] = measure(overrides)
        print(name, json.dumps(record["runs"][name]), flush=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(record, indent=2, sort_keys=True, default=list) + "\n")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
