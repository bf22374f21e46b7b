"""Regenerate the golden render fixture (seed-0 scene, view 0, float image).

    python scripts/make_golden.py

Only rerun this after an intentional change to the renderer or the scene
generator; the determinism test compares against the stored file exactly.
"""

from pathlib import Path

from facefit import io
from facefit.scene import default_setup, generate_scene

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "golden_seed0_view0.txt"


def golden_image():
    setup = default_setup(0)
    return generate_scene(0, 1, setup).views[0].image


if __name__ == "__main__":
    io.save_float_image(FIXTURE, golden_image())
    print(f"wrote {FIXTURE}")
