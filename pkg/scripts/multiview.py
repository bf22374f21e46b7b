"""Multi-image fit versus single-image fits on one synthetic identity.

    python scripts/multiview.py --seed 0 --views 5
"""

import argparse
import time

from facefit.fitter import FitConfig, fit_multi, fit_single
from facefit.scene import default_setup, generate_scene, identity_vertices, vertex_rmse


def neutral_rmse(params, scene, setup):
    diam = setup.models.mesh.diameter()
    return vertex_rmse(identity_vertices(params, setup), identity_vertices(scene.identity, setup)) / diam


def compare(seed, n_views, setup, config):
    scene = generate_scene(seed, n_views, setup)
    singles = [neutral_rmse(fit_single(v.image, v.landmarks, setup, config, image_seed=k).params, scene, setup)
               for k, v in enumerate(scene.views)]
    multi = fit_multi(scene.images, [v.landmarks for v in scene.views], setup, config)
    return singles, neutral_rmse(multi.params, scene, setup)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--views", type=int, default=5)
    args = ap.parse_args()
    setup = default_setup(0)
    t0 = time.perf_counter()
    singles, multi = compare(args.seed, args.views, setup, FitConfig())
    for k, r in enumerate(singles):
        print(f"view {k}: rmse {r:.4f}")
    print(f"multi ({args.views} views): rmse {multi:.4f}  worst single {max(singles):.4f}  "
          f"mean single {sum(singles) / len(singles):.4f}  time {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
