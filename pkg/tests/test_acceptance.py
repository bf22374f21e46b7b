"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per criterion is
printed in the terminal summary (and immediately with ``-s``).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from facefit import io
from facefit.cli import main as cli_main
from facefit.diagnostics import PIPELINE_TOL, PRIMITIVE_TOL, check_pipeline, check_primitives, seed0_problem
from facefit.evaluation import icp_align, point_to_plane
from facefit.fitter import FitConfig, fit_multi, fit_single
from facefit.identity_net import FeatureStack
from facefit import autodiff as ad
from facefit.losses import TERMS, content_loss, identity_loss, landmark_loss, pixel_loss
from facefit.scene import default_setup, foreground_mae, generate_scene, identity_vertices, vertex_rmse
from facefit.texture_gen import generate, init_decoder, invert_texture

from test_evaluation import grid_mesh, oracle_point_to_plane

FIXTURES = Path(__file__).parent / "fixtures"
pytestmark = pytest.mark.slow


@pytest.fixture
def detail(record_property):
    def emit(passed, text):
        record_property("detail", text)
        print(f"{'PASS' if passed else 'FAIL'}: {text}")
        return passed
    return emit


@pytest.fixture(scope="module")
def fits():
    """Single-view fits on seed scenes, cached by (seed, dropped term)."""
    setup = default_setup(0)
    cache = {}

    def get(seed, drop=None):
        key = (seed, drop)
        if key not in cache:
            view = generate_scene(seed, 1, setup).views[0]
            config = FitConfig() if drop is None else FitConfig().drop(drop)
            t0 = time.perf_counter()
            res = fit_single(view.image, view.landmarks, setup, config)
            cache[key] = (res, view, time.perf_counter() - t0)
        return cache[key]

    get.setup = setup
    return get


def test_gradient_suite(detail):
    t0 = time.perf_counter()
    worst_prim = {}
    for seed in range(3):
        for row in check_primitives(seed).rows:
            worst_prim[row.name] = max(worst_prim.get(row.name, 0.0), row.max_error)
    report, _ = check_pipeline(seed0_problem(0))
    elapsed = time.perf_counter() - t0
    prim = max(worst_prim.values())
    pipe = max(r.max_error for r in report.rows)
    checked = all(r.checked > 0 for r in report.rows)
    skipped = sum(r.skipped for r in report.rows)
    ok = prim < PRIMITIVE_TOL and pipe < PIPELINE_TOL and checked and elapsed < 300
    assert detail(ok, f"primitive max rel err {prim:.2e} (< {PRIMITIVE_TOL:g}), pipeline {pipe:.2e} "
                      f"(< {PIPELINE_TOL:g}, {skipped} coverage-flip probes skipped), {elapsed:.0f}s (< 300s)")


def test_loss_identities(detail, rng):
    checks = {}
    embs = rng.normal(size=(200, 16))
    vals = [identity_loss(a, b).item() for a, b in zip(embs[:100], embs[100:])]
    checks["id range"] = min(vals) >= 0 and max(vals) <= 2
    checks["id(a,a)"] = max(abs(identity_loss(a, a).item()) for a in embs[:20]) < 1e-12
    checks["id(a,ca)"] = max(abs(identity_loss(a, c * a).item())
                             for a, c in zip(embs[:20], rng.uniform(0.01, 100, 20))) < 1e-12
    layers = [ad.const(rng.normal(size=(8, 8, 4))), ad.const(rng.normal(size=(4, 4, 8)))]
    fs = FeatureStack(ad.const(np.ones(3)), layers)
    checks["con(x,x)"] = content_loss(fs, fs).item() == 0.0
    img = rng.random((16, 16, 3))
    checks["pix(x,x)"] = pixel_loss(img, img).item() == 0.0
    lm = rng.normal(size=(68, 2))
    checks["lan(x,x)"] = landmark_loss(lm, lm).item() == 0.0
    checks["lan shift (3,4) = 5"] = landmark_loss(lm, lm + [3.0, 4.0]).item() == 5.0
    zero = FeatureStack(ad.const(np.ones(1)), [ad.const(np.zeros((2, 2, 1)))])
    one = FeatureStack(ad.const(np.ones(1)), [ad.const(np.ones((2, 2, 1)))])
    checks["con hand case = 0.5"] = content_loss(zero, one).item() == 0.5
    failed = [k for k, v in checks.items() if not v]
    assert detail(not failed, f"{len(checks) - len(failed)}/{len(checks)} identities hold"
                              + (f", failing: {', '.join(failed)}" if failed else ""))


def test_round_trip(detail, fits):
    pilot = json.loads((FIXTURES / "pilot_roundtrip.json").read_text())
    thr = pilot["thresholds"]
    res, view, seconds = fits(0)
    setup = fits.setup
    diam = setup.models.mesh.diameter()
    rmse = vertex_rmse(identity_vertices(res.params, setup, True), identity_vertices(view.params, setup, True)) / diam
    mae = foreground_mae(res.params, view, setup)
    ok = mae < thr["mae"] and rmse < thr["rmse"] and seconds < thr["seconds"]
    assert detail(ok, f"seed 0: MAE {mae:.4f} (< {thr['mae']}), vertex RMSE {100 * rmse:.2f}% of diameter "
                      f"(< {100 * thr['rmse']:.0f}%), {seconds:.0f}s (< {thr['seconds']:.0f}s)")


def test_multi_image(detail):
    setup = default_setup(0)
    scene = generate_scene(0, 5, setup)
    diam = setup.models.mesh.diameter()
    gt = identity_vertices(scene.identity, setup)

    def rmse(params):
        return vertex_rmse(identity_vertices(params, setup), gt) / diam

    singles = [rmse(fit_single(v.image, v.landmarks, setup, image_seed=k).params) for k, v in enumerate(scene.views)]
    multi = rmse(fit_multi(scene.images, [v.landmarks for v in scene.views], setup).params)

    short = FitConfig(stage1_steps=50, stage2_steps=20)
    view = scene.views[0]
    one = fit_single(view.image, view.landmarks, setup, short, image_seed=0)
    many = fit_multi([view.image] * 3, [view.landmarks] * 3, setup, short, image_seeds=[0, 0, 0])
    bitwise = all(p.bitwise_equal(one.params) for p in many.per_image)
    ok = multi <= max(singles) and bitwise
    assert detail(ok, f"5-view RMSE {100 * multi:.2f}% vs single views "
                      f"{', '.join(f'{100 * s:.2f}' for s in singles)}% (worst {100 * max(singles):.2f}%); "
                      f"identical images bitwise equal to single fit: {bitwise}")


def test_evaluation_oracle(detail):
    worst = 0.0
    for seed in range(5):
        a, b = grid_mesh(5, 10, 0.3, seed), grid_mesh(5, 10, 0.3, seed + 100)
        worst = max(worst, abs(point_to_plane(a, b) - oracle_point_to_plane(a, b)))
    mesh = default_setup(0).models.mesh
    rot = Rotation.from_euler("xyz", [3.0, -2.0, 3.0], degrees=True).as_matrix()
    trans = np.array([0.02, -0.01, 0.02])
    t = icp_align(mesh, mesh.with_vertices(mesh.vertices @ rot.T + trans))
    angle = np.degrees(Rotation.from_matrix(t.rotation.T @ rot).magnitude())
    terr = np.abs(t.translation - trans).max()
    plane = grid_mesh(5, 5, z=np.zeros(25))
    offset = point_to_plane(plane, plane.with_vertices(plane.vertices + [0, 0, 0.75]))
    ok = worst < 1e-12 and angle < 0.1 and terr < 1e-3 and offset == 0.75
    assert detail(ok, f"oracle diff {worst:.1e} (< 1e-12), ICP {angle:.1e} deg / {terr:.1e} units "
                      f"(< 0.1 / 1e-3), plane offset 0.75 -> {offset!r}")


def test_texture_inversion(detail):
    decoder = default_setup(0).decoder
    rng = np.random.default_rng(5)
    maes = []
    for _ in range(2):
        target = generate(decoder, rng.normal(size=decoder.latent_dim)).data
        maes.append(invert_texture(decoder, target, steps=500).mae)
    assert detail(max(maes) < 0.02, f"UV MAE after 500 steps {', '.join(f'{m:.4f}' for m in maes)} (< 0.02)")


def test_ablation(detail, fits):
    rows, bad = 0, []
    for seed in range(3):
        full = fits(seed)[0].final_terms
        for term in TERMS:
            dropped = fits(seed, term)[0].final_terms
            f = full["reg_shape"] + full["reg_light"] if term == "reg" else full[term]
            d = dropped["reg_shape"] + dropped["reg_light"] if term == "reg" else dropped[term]
            rows += 1
            if not d >= f:
                bad.append(f"seed {seed} {term}: {d:.4g} < {f:.4g}")
    assert detail(not bad, f"{rows - len(bad)}/{rows} dropped terms end no lower than in the full fit"
                           + (f"; violations: {'; '.join(bad)}" if bad else ""))


def _run_cli(argv, capsys):
    code = cli_main([str(a) for a in argv])
    return code, capsys.readouterr().out


def _dir_bytes(path: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


def test_determinism(detail, tmp_path, capsys):
    models = tmp_path / "models"
    fast = ["--set", "stage1_steps=20", "--set", "stage2_steps=3"]
    same = {}
    runs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        outs = [_run_cli(["synth", "--seed", 0, "--n-views", 2, "--models", models, "--out", d / "scene"], capsys),
                _run_cli(["fit", "--scene", d / "scene", *fast, "--out", d / "fit"], capsys),
                _run_cli(["eval", "--pred", d / "fit" / "mesh.obj", "--gt", d / "scene" / "identity.obj",
                          "--center", 250, "--radius", 0.8], capsys),
                _run_cli(["render", "--params", d / "fit" / "params.txt", "--models", models,
                          "--out", d / "render" / "r.png"], capsys),
                _run_cli(["gradcheck", "--scope", "primitives"], capsys)]
        runs.append((outs, {sub: _dir_bytes(d / sub) for sub in ("scene", "fit", "render")}))
    (o0, f0), (o1, f1) = runs
    codes_ok = all(c == 0 for c, _ in o0 + o1)
    for name, (a, b) in zip(("synth", "fit", "eval", "render", "gradcheck"), zip(o0, o1)):
        same[name] = a[1].replace(str(tmp_path / "run0"), "") == b[1].replace(str(tmp_path / "run1"), "")
    for sub in f0:
        same[f"{sub} files"] = f0[sub] == f1[sub]

    golden = io.load_float_image(FIXTURES / "golden_seed0_view0.txt")
    image = generate_scene(0, 1, default_setup(0)).views[0].image
    golden_ok = golden.shape == image.shape and golden.tobytes() == image.tobytes()
    diffs = [k for k, v in same.items() if not v]
    ok = codes_ok and not diffs and golden_ok
    assert detail(ok, f"commands byte-identical across runs: {not diffs}"
                      + (f" (differs: {', '.join(diffs)})" if diffs else "")
                      + f"; golden render exact: {golden_ok}")
