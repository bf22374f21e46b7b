"""Single-view round trip: fit synthetic scenes from the default initialisation.

Prints posed and neutral vertex RMSE (fraction of mesh diameter), foreground
MAE and wall time per scene seed. Weight overrides use ``name=value``.

    python scripts/pilot_roundtrip.py --seeds 0 1 2 3 4 --weight id_hat=0.5

With ``--json tests/fixtures/pilot_roundtrip.json`` and no overrides this
regenerates the fixture the round-trip acceptance check reads its
thresholds from.
"""

import argparse
import json
import time
from dataclasses import replace

import numpy as np

from facefit.fitter import FitConfig, FitParams, fit_single
from facefit.scene import default_setup, foreground_mae, generate_scene, identity_vertices, vertex_rmse


def run(seed, setup, config):
    view = generate_scene(seed, 1, setup).views[0]
    diam = setup.models.mesh.diameter()
    t0 = time.perf_counter()
    res = fit_single(view.image, view.landmarks, setup, config)
    elapsed = time.perf_counter() - t0
    p = res.params
    return {
        "seed": seed,
        "rmse_posed": vertex_rmse(identity_vertices(p, setup, True), identity_vertices(view.params, setup, True)) / diam,
        "rmse_neutral": vertex_rmse(identity_vertices(p, setup), identity_vertices(view.params, setup)) / diam,
        "mae": foreground_mae(p, view, setup),
        "seconds": elapsed,
        "final": res.final_terms,
    }


THRESHOLDS = {"mae": 0.03, "rmse": 0.02, "seconds": 120.0}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--weight", action="append", default=[], help="loss weight override name=value")
    ap.add_argument("--stage1", type=int, default=200)
    ap.add_argument("--stage2", type=int, default=400)
    ap.add_argument("--json", help="write rows to this file")
    args = ap.parse_args()

    setup = default_setup(0)
    config = FitConfig(stage1_steps=args.stage1, stage2_steps=args.stage2)
    overrides = {k: float(v) for k, v in (w.split("=") for w in args.weight)}
    config = replace(config, weights=replace(config.weights, **overrides))
    rows = []
    for seed in args.seeds:
        row = run(seed, setup, config)
        rows.append(row)
        print(f"seed {seed}: rmse_posed {row['rmse_posed']:.4f} rmse_neutral {row['rmse_neutral']:.4f} "
              f"mae {row['mae']:.4f} time {row['seconds']:.1f}s", flush=True)
    print(f"mean: rmse_posed {np.mean([r['rmse_posed'] for r in rows]):.4f} mae {np.mean([r['mae'] for r in rows]):.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"thresholds": THRESHOLDS, "weight_overrides": overrides, "stage1_steps": args.stage1,
                       "stage2_steps": args.stage2, "rows": rows}, fh, indent=1)


if __name__ == "__main__":
    main()
