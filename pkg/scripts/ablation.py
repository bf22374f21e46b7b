"""Leave-one-term-out study on synthetic scenes.

For each scene seed, fit with the full energy and once per dropped term, then
report every term's unweighted value at the final parameters (fixed secondary
sample). A dropped term is expected to end no lower than in the full fit.

    python scripts/ablation.py --seeds 0 1 2 --stage2 200
"""

import argparse
import json
from dataclasses import replace

from facefit.fitter import FitConfig, fit_single
from facefit.losses import TERMS
from facefit.scene import default_setup, generate_scene


def ablate(seed, setup, config, terms=TERMS):
    view = generate_scene(seed, 1, setup).views[0]
    out = {"full": fit_single(view.image, view.landmarks, setup, config).final_terms}
    for term in terms:
        out[term] = fit_single(view.image, view.landmarks, setup, config.drop(term)).final_terms
    return out


def term_value(values, term):
    return values["reg_shape"] + values["reg_light"] if term == "reg" else values[term]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--stage1", type=int, default=200)
    ap.add_argument("--stage2", type=int, default=400)
    ap.add_argument("--json", help="write the raw breakdowns to this file")
    args = ap.parse_args()

    setup = default_setup(0)
    config = replace(FitConfig(), stage1_steps=args.stage1, stage2_steps=args.stage2)
    results = {}
    print(f"{'seed':>4} {'term':>7} {'full':>12} {'dropped':>12}  ok")
    for seed in args.seeds:
        res = ablate(seed, setup, config)
        results[seed] = res
        for term in TERMS:
            full, dropped = term_value(res["full"], term), term_value(res[term], term)
            print(f"{seed:>4} {term:>7} {full:>12.6g} {dropped:>12.6g}  {'yes' if dropped >= full else 'NO'}",
                  flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
