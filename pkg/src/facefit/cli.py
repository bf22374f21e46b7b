"""Command-line entry point: ``facefit {synth,fit,eval,gradcheck,render}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .fitter import FitParams, FitSetup, fit_multi, trace_header
from .optim import DivergenceError

log = logging.getLogger("facefit")

MODEL_FILES = {"model": "face_model.txt", "decoder": "decoder.txt", "net": "feature_net.txt"}

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5


@dataclass
class CliError(Exception):
    kind: str
    message: str
    code: int

    def __str__(self) -> str:
        return f"error [{self.kind}]: {self.message}"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("missing-file", f"{what} not found: {path}", EXIT_MISSING)
    return path


# ---------------------------------------------------------------------------
# model directory

def write_models(directory: Path, seed: int) -> None:
    from .scene import default_setup

    setup = default_setup(seed)
    directory.mkdir(parents=True, exist_ok=True)
    io.save_face_model(directory / MODEL_FILES["model"], setup.models)
    io.save_decoder(directory / MODEL_FILES["decoder"], setup.decoder)
    io.save_feature_net(directory / MODEL_FILES["net"], setup.net)


def ensure_models(directory: Path, seed: int) -> bool:
    """Create the model files unless all of them exist. Returns True if written."""
    if all((directory / f).exists() for f in MODEL_FILES.values()):
        return False
    write_models(directory, seed)
    return True


def load_setup(directory: Path, texture: str = "gan") -> FitSetup:
    for key, name in MODEL_FILES.items():
        _require(directory / name, f"{key} file")
    models = io.load_face_model(directory / MODEL_FILES["model"])
    decoder = io.load_decoder(directory / MODEL_FILES["decoder"]) if texture == "gan" else models.texture
    net = io.load_feature_net(directory / MODEL_FILES["net"])
    return FitSetup(models, decoder, net)


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    from .scene import generate_scene, identity_vertices

    out = Path(args.out)
    models_dir = Path(args.models) if args.models else out / "models"
    ensure_models(models_dir, args.model_seed)
    setup = load_setup(models_dir)
    scene = generate_scene(args.seed, args.n_views, setup)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "facefit-scene 1", "seed": args.seed, "n_views": args.n_views,
                "model_seed": args.model_seed, "models": _rel(models_dir, out)}
    for k, view in enumerate(scene.views):
        stem = f"view{k:02d}"
        io.save_png(out / f"{stem}.png", view.image)
        io.save_float_image(out / f"{stem}_image.txt", view.image)
        io.save_landmarks(out / f"{stem}_landmarks.txt", view.landmarks)
        io.save_params(out / f"{stem}_params.txt", view.params)
        manifest[f"{stem}.image"] = f"{stem}_image.txt"
        manifest[f"{stem}.png"] = f"{stem}.png"
        manifest[f"{stem}.landmarks"] = f"{stem}_landmarks.txt"
        manifest[f"{stem}.params"] = f"{stem}_params.txt"
    io.save_params(out / "identity_params.txt", scene.identity)
    io.save_obj(out / "identity.obj", setup.models.mesh.with_vertices(identity_vertices(scene.identity, setup)))
    manifest["identity.params"] = "identity_params.txt"
    manifest["identity.mesh"] = "identity.obj"
    (out / "manifest.txt").write_text(io.dumps_keyvalue(manifest))
    print(f"wrote {args.n_views} views to {out}")
    return EXIT_OK


def _rel(path: Path, base: Path) -> str:
    try:
        return str(path.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(path.resolve())


def read_manifest(scene_dir: Path) -> dict[str, str]:
    path = _require(scene_dir / "manifest.txt", "scene manifest")
    return io.loads_keyvalue(path.read_text())


def scene_inputs(scene_dir: Path) -> tuple[list[Path], list[Path], Path]:
    manifest = read_manifest(scene_dir)
    try:
        n = int(manifest["n_views"])
        images = [scene_dir / manifest[f"view{k:02d}.image"] for k in range(n)]
        landmarks = [scene_dir / manifest[f"view{k:02d}.landmarks"] for k in range(n)]
    except (KeyError, ValueError) as exc:
        raise CliError("bad-manifest", f"manifest is missing or has a malformed entry: {exc}", EXIT_FORMAT) from None
    return images, landmarks, scene_dir / manifest.get("models", "models")


# ---------------------------------------------------------------------------
# fit

def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise CliError("bad-config", f"override {pair!r} is not key=value", EXIT_FORMAT)
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(args):
    items = {}
    if args.config:
        items.update(io.loads_keyvalue(_require(Path(args.config), "config").read_text()))
    items.update(_parse_overrides(args.set or []))
    drops = [t for t in items.pop("drop", "").split(",") if t] + list(args.drop or [])
    if args.texture:
        items["texture"] = args.texture
    if drops:
        items["drop"] = ",".join(drops)
    return io.config_from_dict(items)


def panels(params: FitParams, image: np.ndarray, setup: FitSetup) -> np.ndarray:
    """Input | render over input | albedo | illumination difference (render - albedo, centred at 0.5)."""
    from .scene import render_params

    out = render_params(params, setup)
    render, albedo, mask = out.image.data, out.albedo_image.data, out.mask[..., None]
    overlay = np.where(mask, render, image)
    diff = np.where(mask, 0.5 + 0.5 * (render - albedo), 0.0)
    return np.concatenate([image, overlay, albedo, diff], axis=1)


def cmd_fit(args) -> int:
    try:
        config, extra = build_config(args)
    except io.FormatError as exc:
        raise CliError("bad-config", str(exc), EXIT_FORMAT) from None
    texture = extra.get("texture", "gan")
    if texture not in ("gan", "pca"):
        raise CliError("bad-config", f"texture must be gan or pca, got {texture!r}", EXIT_FORMAT)

    if args.scene:
        image_paths, lm_paths, models_dir = scene_inputs(Path(args.scene))
    else:
        image_paths = [Path(p) for p in args.image or []]
        lm_paths = [Path(p) for p in args.landmarks or []]
        models_dir = None
        if not image_paths or len(image_paths) != len(lm_paths):
            raise CliError("usage", "give --scene or matching --image/--landmarks pairs", EXIT_USAGE)
    if args.models:
        models_dir = Path(args.models)
    elif "model" in extra:
        models_dir = Path(extra["model"])
    if models_dir is None:
        raise CliError("usage", "no model directory (use --models)", EXIT_USAGE)

    try:
        setup = load_setup(models_dir, texture)
        images = [io.load_image(_require(p, "image")) for p in image_paths]
        landmarks = [io.load_landmarks(_require(p, "landmarks")) for p in lm_paths]
    except io.FormatError as exc:
        raise CliError("bad-input", str(exc), EXIT_FORMAT) from None

    try:
        result = fit_multi(images, landmarks, setup, config)
    except DivergenceError as exc:
        raise CliError("diverged", str(exc), EXIT_DIVERGED) from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_params(out / "params.txt", result.per_image)
    header = trace_header(config) + [f"# texture: {texture}", f"# images: {len(images)}"]
    (out / "trace.csv").write_text(io.dumps_trace(result.trace, header))
    (out / "config.txt").write_text(io.dumps_keyvalue(io.config_to_dict(config, {"texture": texture})))
    from .scene import identity_vertices
    io.save_obj(out / "mesh.obj", setup.models.mesh.with_vertices(identity_vertices(result.params, setup)))
    for k, (params, image) in enumerate(zip(result.per_image, images)):
        io.save_png(out / f"panel{k:02d}.png", panels(params, image, setup))
    summary = " ".join(f"{k}={v:.6g}" for k, v in result.final_terms.items())
    print(f"fit {len(images)} image(s): {summary}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    from .evaluation import EvaluationError, evaluate_pair

    pairs = [tuple(p) for p in args.pair or []]
    if args.pred and args.gt:
        pairs.insert(0, (args.pred, args.gt))
    if not pairs:
        raise CliError("usage", "give --pred/--gt or one or more --pair PRED GT", EXIT_USAGE)
    rows = []
    for pred_path, gt_path in pairs:
        try:
            pred = io.load_obj(_require(Path(pred_path), "mesh"))
            gt = io.load_obj(_require(Path(gt_path), "mesh"))
            row = evaluate_pair(pred, gt, args.center, args.radius, with_scale=args.scale)
        except (io.FormatError, EvaluationError) as exc:
            raise CliError("bad-mesh", str(exc), EXIT_FORMAT) from None
        rows.append((pred_path, gt_path, row))
    print(eval_table(rows))
    return EXIT_OK


def eval_table(rows) -> str:
    lines = [f"{'pred':<28} {'gt':<28} {'icp_rms':>10} {'p2plane':>10} {'fallbacks':>9}"]
    for pred, gt, r in rows:
        lines.append(f"{Path(pred).name:<28} {Path(gt).name:<28} {r.residual:>10.3f} {r.distance:>10.3f} "
                     f"{r.fallbacks:>9d}")
    d = np.array([r.distance for *_, r in rows])
    lines.append(f"{'mean':<57} {'':>10} {d.mean():>10.3f}")
    lines.append(f"{'std':<57} {'':>10} {d.std():>10.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# gradcheck, render

def cmd_gradcheck(args) -> int:
    from .diagnostics import run_gradcheck

    report = run_gradcheck(args.scope, args.seed)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_render(args) -> int:
    from .scene import render_params

    try:
        setup = load_setup(Path(args.models), args.texture)
        params = io.load_params(_require(Path(args.params), "params"))
    except io.FormatError as exc:
        raise CliError("bad-input", str(exc), EXIT_FORMAT) from None
    if not 0 <= args.index < len(params):
        raise CliError("usage", f"params file holds {len(params)} set(s), index {args.index} out of range",
                       EXIT_USAGE)
    image = render_params(params[args.index], setup).image.data
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_png(out, image)
    io.save_float_image(out.with_suffix(".txt"), image)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facefit", description="Synthetic face reconstruction by inverse rendering.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a ground-truth scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-views", type=int, default=5)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--models", help="model directory (default: OUT/models)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit parameters to one or more images")
    p.add_argument("--scene", help="scene directory written by synth")
    p.add_argument("--image", action="append", help="image (.txt float, .ppm or .png); repeatable")
    p.add_argument("--landmarks", action="append", help="landmark file matching each --image")
    p.add_argument("--models", help="model directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
    p.add_argument("--drop", action="append", choices=["id", "id_hat", "con", "pix", "lan", "reg"],
                   help="zero one loss term; repeatable")
    p.add_argument("--texture", choices=["gan", "pca"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="ICP + crop + point-to-plane error")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--pair", nargs=2, action="append", metavar=("PRED", "GT"))
    p.add_argument("--center", type=int, required=True, help="centre vertex index in both meshes")
    p.add_argument("--radius", type=float, default=95.0)
    p.add_argument("--scale", action="store_true", help="allow isotropic scale in ICP")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=["primitives", "pipeline", "all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="render a params file")
    p.add_argument("--params", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--texture", choices=["gan", "pca"], default="gan")
    p.add_argument("--out", required=True, help="PNG path; a float sidecar .txt is written next to it")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
