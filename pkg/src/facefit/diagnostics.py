"""Finite-difference gradient checks for the primitives and the full energy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fitter import BLOCKS, FitConfig, FitParams, FitSetup, StepContext, Target, energy
from .renderer import project_vertices, rasterize
from .morphable_model import shape_from_params

PRIMITIVE_TOL = 1e-6
PIPELINE_TOL = 1e-3


@dataclass
class CheckRow:
    name: str
    max_error: float
    tol: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and bool(self.max_error < self.tol)


@dataclass
class CheckReport:
    rows: list[CheckRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def table(self) -> str:
        lines = [f"{'check':<22} {'max_rel_err':>12} {'tol':>8} {'checked':>8} {'skipped':>8}  result"]
        for r in self.rows:
            lines.append(f"{r.name:<22} {r.max_error:>12.3e} {r.tol:>8.0e} {r.checked:>8d} {r.skipped:>8d}  "
                         + ("pass" if r.passed else "FAIL"))
        return "\n".join(lines)


def _away_from(x: np.ndarray, points, gap: float = 0.05) -> np.ndarray:
    """Push entries out of a band around non-differentiable points."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap)
    return x


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple]:
    """``name -> (fn, point)``; each ``fn`` reduces to a scalar through a fixed random weighting."""
    u = lambda *shape: rng.uniform(-2.0, 2.0, size=shape)  # noqa: E731
    pos = lambda *shape: rng.uniform(0.2, 2.0, size=shape)  # noqa: E731

    def weighted(out):
        # magnitudes bounded away from 0 so no coordinate's derivative is vanishingly small
        if out.shape not in rng_weights:
            rng_weights[out.shape] = rng.choice([-1.0, 1.0], size=out.shape) * rng.uniform(0.5, 2.0, out.shape)
        return ad.sum_(ad.mul(out, rng_weights[out.shape]))

    rng_weights: dict[tuple, np.ndarray] = {}
    cases = {
        "add": (lambda a, b: weighted(ad.add(a, b)), {"a": u(3, 4), "b": u(4)}),
        "sub": (lambda a, b: weighted(ad.sub(a, b)), {"a": u(3, 4), "b": u(3, 1)}),
        "mul": (lambda a, b: weighted(ad.mul(a, b)), {"a": u(3, 4), "b": u(3, 4)}),
        "div": (lambda a, b: weighted(ad.div(a, b)), {"a": u(3, 4), "b": pos(3, 4)}),
        "neg": (lambda a: weighted(ad.neg(a)), {"a": u(3, 4)}),
        "matmul": (lambda a, b: weighted(ad.matmul(a, b)), {"a": u(3, 5), "b": u(5, 4)}),
        "matvec": (lambda a, b: weighted(ad.matmul(a, b)), {"a": u(3, 4), "b": u(4)}),
        "dot": (lambda a, b: ad.dot(a, b), {"a": u(6), "b": u(6)}),
        "relu": (lambda a: weighted(ad.relu(a)), {"a": _away_from(u(3, 4), [0.0])}),
        "sigmoid": (lambda a: weighted(ad.sigmoid(a)), {"a": u(3, 4)}),
        "tanh": (lambda a: weighted(ad.tanh(a)), {"a": u(3, 4)}),
        "exp": (lambda a: weighted(ad.exp(a)), {"a": u(3, 4)}),
        "log": (lambda a: weighted(ad.log(a)), {"a": pos(3, 4)}),
        "abs": (lambda a: weighted(ad.abs_(a)), {"a": _away_from(u(3, 4), [0.0])}),
        "power": (lambda a: weighted(ad.power(a, 3.0)), {"a": _away_from(u(3, 4), [0.0], 0.2)}),
        "power_frac": (lambda a: weighted(ad.power(a, 1.5)), {"a": pos(3, 4)}),
        "sqrt": (lambda a: weighted(ad.sqrt(a)), {"a": pos(3, 4)}),
        "clamp": (lambda a: weighted(ad.clamp(a, -1.0, 1.0)), {"a": _away_from(u(3, 4), [-1.0, 1.0])}),
        "softplus": (lambda a: weighted(ad.softplus(a)), {"a": u(3, 4)}),
        "sum": (lambda a: weighted(ad.sum_(a, axis=0)), {"a": u(3, 4)}),
        "mean": (lambda a: weighted(ad.mean(a, axis=1, keepdims=True)), {"a": u(3, 4)}),
        "l1_norm": (lambda a: weighted(ad.l1_norm(a, axis=1)), {"a": _away_from(u(3, 4), [0.0])}),
        "l2_norm": (lambda a: weighted(ad.l2_norm(a, axis=1)), {"a": u(3, 4)}),
        "broadcast_to": (lambda a: weighted(ad.broadcast_to(a, (3, 4))), {"a": u(1, 4)}),
        "reshape": (lambda a: weighted(ad.reshape(a, (4, 3))), {"a": u(3, 4)}),
        "transpose": (lambda a: weighted(ad.transpose(a)), {"a": u(3, 4)}),
        "getitem": (lambda a: weighted(a[1:, ::2]), {"a": u(3, 4)}),
        "gather": (lambda a: weighted(ad.gather(a, np.array([2, 0, 2, 1]))), {"a": u(3, 4)}),
        "concat": (lambda a, b: weighted(ad.concat([a, b], axis=1)), {"a": u(3, 2), "b": u(3, 4)}),
        "stack": (lambda a, b: weighted(ad.stack([a, b], axis=0)), {"a": u(3, 4), "b": u(3, 4)}),
        "normalize": (lambda a: weighted(ad.normalize(a)), {"a": u(3, 4)}),
        "cross": (lambda a, b: weighted(ad.cross(a, b)), {"a": u(4, 3), "b": u(4, 3)}),
    }
    return cases


def check_primitives(seed: int = 0, h: float = 1e-5) -> CheckReport:
    rng = np.random.default_rng(seed)
    report = CheckReport()
    for name, (fn, point) in primitive_cases(rng).items():
        errs = ad.gradient_errors(fn, point, h=h)
        flat = np.concatenate([e.reshape(-1) for e in errs.values()])
        report.rows.append(CheckRow(name, float(flat.max()), PRIMITIVE_TOL, flat.size))
    return report


# ---------------------------------------------------------------------------
# full pipeline

@dataclass
class PipelineProblem:
    target: Target
    setup: FitSetup
    config: FitConfig
    point: FitParams
    context: StepContext


def pipeline_problem(setup: FitSetup, image: np.ndarray, landmarks: np.ndarray, point: FitParams,
                     config: FitConfig = FitConfig(), seed: int = 0) -> PipelineProblem:
    """Freeze the per-step constants (alignments and secondary sample) at ``point``."""
    target = Target.prepare(image, landmarks, setup.net)
    ctx = StepContext()
    blocks = {k: ad.DiffArray(v) for k, v in point.as_dict().items()}
    energy(blocks, target, setup, config.weights, ctx, np.random.default_rng(seed))
    frozen = StepContext(transform=ctx.transform, secondary=ctx.secondary,
                         secondary_transform=ctx.secondary_transform)
    return PipelineProblem(target, setup, config, point, frozen)


def _energy_fn(problem: PipelineProblem):
    def fn(**blocks):
        ctx = StepContext(transform=problem.context.transform, secondary=problem.context.secondary,
                          secondary_transform=problem.context.secondary_transform)
        total, *_ = energy(blocks, problem.target, problem.setup, problem.config.weights, ctx)
        return total
    return fn


def _coverage(problem: PipelineProblem, params: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    setup, sec = problem.setup, problem.context.secondary
    m = setup.models
    tris = m.mesh.triangles

    def cover(p_s, p_e, p_c):
        verts = shape_from_params(m.shape, m.expression, p_s, p_e).data
        proj = project_vertices(verts, p_c, setup.settings.size).data
        return rasterize(proj, tris, setup.settings.size, setup.settings.cull_backfaces).triangle

    return cover(params["p_s"], params["p_e"], params["p_c"]), cover(params["p_s"], sec.p_e, sec.p_c)


def coverage_skip(problem: PipelineProblem, h: float):
    """Veto probes whose +-h perturbation changes the primary or secondary pixel coverage."""
    base_point = problem.point.as_dict()
    base = _coverage(problem, base_point)
    geometric = {"p_s", "p_e", "p_c"}

    def skip(name: str, index: int, sign: int) -> bool:
        if name not in geometric:
            return False
        probe = dict(base_point)
        x = probe[name].copy()
        x[index] += sign * h
        probe[name] = x
        cov = _coverage(problem, probe)
        return not (np.array_equal(cov[0], base[0]) and np.array_equal(cov[1], base[1]))

    return skip


def check_pipeline(problem: PipelineProblem, h: float = 1e-5) -> tuple[CheckReport, dict[str, np.ndarray]]:
    fn = _energy_fn(problem)
    errs = ad.gradient_errors(fn, problem.point.as_dict(), h=h, skip=coverage_skip(problem, h))
    report = CheckReport()
    for name in BLOCKS:
        e = errs[name]
        ok = ~np.isnan(e)
        report.rows.append(CheckRow(f"pipeline.{name}", float(e[ok].max()) if ok.any() else float("nan"),
                                    PIPELINE_TOL, int(ok.sum()), int((~ok).sum())))
    return report, errs


def seed0_problem(seed: int = 0, noise: float = 0.1) -> PipelineProblem:
    """Seed-``seed`` scene, evaluated at ground truth plus noise.

    Exact ground truth sits on the kinks of the absolute and Euclidean
    residuals, so the probe point is moved off it.
    """
    from .scene import default_setup, generate_scene

    setup = default_setup(seed)
    scene = generate_scene(seed, 1, setup)
    view = scene.views[0]
    rng = np.random.default_rng([seed, 7])
    gt = view.params
    m = setup.models
    point = FitParams(gt.p_s + noise * m.shape.stdev * rng.normal(size=gt.p_s.size),
                      gt.p_e + noise * m.expression.stdev * rng.normal(size=gt.p_e.size),
                      gt.p_t + noise * rng.normal(size=gt.p_t.size),
                      gt.p_c + noise * np.r_[0.01 * rng.normal(size=6), rng.normal()],
                      gt.p_l + noise * 0.1 * rng.normal(size=9))
    return pipeline_problem(setup, view.image, view.landmarks, point, seed=seed)


def run_gradcheck(scope: str = "all", seed: int = 0) -> CheckReport:
    if scope not in ("primitives", "pipeline", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    report = CheckReport()
    if scope in ("primitives", "all"):
        report.rows += check_primitives(seed).rows
    if scope in ("pipeline", "all"):
        report.rows += check_pipeline(seed0_problem(seed))[0].rows
    return report
