"""Text container, OBJ, image, CSV and key = value file formats.

Floats are written with 17 significant digits so every format round-trips
byte for byte (write -> read -> write).
"""

from __future__ import annotations

import csv
import io as _io
import re
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from .fitter import FitConfig, FitParams
from .identity_net import FeatureNet
from .losses import LossWeights
from .morphable_model import FaceModel, LinearModel, Mesh
from .texture_gen import DecoderWeights

MAGIC = "facefit-container"
VERSION = 1
TRACE_COLUMNS = ("iter", "total", "id", "id_hat", "con", "pix", "lan", "reg")


class FormatError(ValueError):
    pass


def fmt_float(x: float) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------------------
# structured text container

def dumps_container(kind: str, arrays: dict[str, np.ndarray], meta: dict[str, object] | None = None) -> str:
    out = [f"{MAGIC} {VERSION}", f"kind {kind}"]
    for key, value in (meta or {}).items():
        out.append(f"meta {key} {value}")
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        is_int = np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool
        dtype = "int64" if is_int else "float64"
        out.append(f"array {name} {dtype} {arr.ndim} " + " ".join(str(d) for d in arr.shape))
        if arr.size == 0:
            continue
        rows = arr.reshape(arr.shape[0] if arr.ndim > 1 else 1, -1)
        conv = (lambda v: str(int(v))) if is_int else fmt_float
        for row in rows:
            out.append(" ".join(map(conv, row.tolist())))
    out.append("end")
    return "\n".join(out) + "\n"


def loads_container(text: str) -> tuple[str, dict[str, np.ndarray], dict[str, str]]:
    lines = text.splitlines()
    if not lines or lines[0].split()[:1] != [MAGIC]:
        raise FormatError("missing container header")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise FormatError("malformed container header") from None
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    kind, arrays, meta = None, {}, {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        tag = parts[0]
        if tag == "kind":
            kind = parts[1]
        elif tag == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif tag == "array":
            name, dtype, ndim = parts[1], parts[2], int(parts[3])
            shape = tuple(int(d) for d in parts[4:4 + ndim])
            size = int(np.prod(shape)) if shape else 1
            nrows = 0 if size == 0 else (shape[0] if ndim > 1 else 1)
            chunk = " ".join(lines[i:i + nrows])
            i += nrows
            arr = np.array(chunk.split(), dtype=np.int64 if dtype == "int64" else np.float64)
            if arr.size != size:
                raise FormatError(f"array {name}: expected {size} values, found {arr.size}")
            arrays[name] = arr.reshape(shape)
        elif tag == "end":
            break
        else:
            raise FormatError(f"unexpected line {lines[i - 1]!r}")
    if kind is None:
        raise FormatError("container has no kind")
    return kind, arrays, meta


def write_container(path, kind, arrays, meta=None) -> None:
    Path(path).write_text(dumps_container(kind, arrays, meta))


def read_container(path, expect: str | None = None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    kind, arrays, meta = loads_container(text)
    if expect is not None and kind != expect:
        raise FormatError(f"{path}: expected a {expect} container, found {kind}")
    return arrays, meta


# ---------------------------------------------------------------------------
# typed wrappers

def _linear_arrays(prefix: str, m: LinearModel) -> dict[str, np.ndarray]:
    return {f"{prefix}.mean": m.mean, f"{prefix}.basis": m.basis, f"{prefix}.stdev": m.stdev}


def save_linear_model(path, model: LinearModel) -> None:
    write_container(path, "linear_model", _linear_arrays("model", model), {"n_samples": model.n_samples})


def load_linear_model(path) -> LinearModel:
    arrays, meta = read_container(path, "linear_model")
    return LinearModel(arrays["model.mean"], arrays["model.basis"], arrays["model.stdev"],
                       int(meta.get("n_samples", 0)))


def save_face_model(path, models: FaceModel) -> None:
    arrays = {}
    arrays.update(_linear_arrays("shape", models.shape))
    arrays.update(_linear_arrays("expression", models.expression))
    arrays.update(_linear_arrays("texture", models.texture))
    mesh = models.mesh
    arrays.update({"mesh.triangles": mesh.triangles, "mesh.uv": mesh.uv, "mesh.landmarks": mesh.landmark_indices})
    h, w, c = models.uv_size
    meta = {"uv_size": f"{h} {w} {c}", "shape.n_samples": models.shape.n_samples,
            "expression.n_samples": models.expression.n_samples, "texture.n_samples": models.texture.n_samples}
    write_container(path, "face_model", arrays, meta)


def load_face_model(path) -> FaceModel:
    arrays, meta = read_container(path, "face_model")

    def lin(prefix):
        return LinearModel(arrays[f"{prefix}.mean"], arrays[f"{prefix}.basis"], arrays[f"{prefix}.stdev"],
                           int(meta.get(f"{prefix}.n_samples", 0)))

    shape = lin("shape")
    mesh = Mesh(shape.mean.reshape(-1, 3), arrays["mesh.triangles"], arrays["mesh.uv"], arrays["mesh.landmarks"])
    uv_size = tuple(int(x) for x in meta["uv_size"].split())
    return FaceModel(shape, lin("expression"), lin("texture"), mesh, uv_size)


def save_decoder(path, weights: DecoderWeights) -> None:
    arrays = {}
    for i, (w, b) in enumerate(weights.layers):
        arrays[f"layer{i}.weight"] = w
        arrays[f"layer{i}.bias"] = b
    meta = {"seed": weights.seed, "base": weights.base, "base_channels": weights.base_channels,
            "layers": len(weights.layers)}
    write_container(path, "decoder", arrays, meta)


def load_decoder(path) -> DecoderWeights:
    arrays, meta = read_container(path, "decoder")
    layers = tuple((arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"]) for i in range(int(meta["layers"])))
    return DecoderWeights(layers, int(meta["seed"]), int(meta["base"]), int(meta["base_channels"]))


def save_feature_net(path, net: FeatureNet) -> None:
    arrays = {}
    for i, (w, b) in enumerate(net.convs):
        arrays[f"conv{i}.weight"] = w
        arrays[f"conv{i}.bias"] = b
    arrays["head.weight"], arrays["head.bias"] = net.head
    arrays["template"] = net.template
    write_container(path, "feature_net", arrays,
                    {"seed": net.seed, "input_size": net.input_size, "layers": len(net.convs)})


def load_feature_net(path) -> FeatureNet:
    arrays, meta = read_container(path, "feature_net")
    convs = tuple((arrays[f"conv{i}.weight"], arrays[f"conv{i}.bias"]) for i in range(int(meta["layers"])))
    return FeatureNet(convs, (arrays["head.weight"], arrays["head.bias"]), arrays["template"],
                      int(meta["input_size"]), int(meta["seed"]))


def save_params(path, params: FitParams | list[FitParams]) -> None:
    items = params if isinstance(params, list) else [params]
    arrays = {}
    for i, p in enumerate(items):
        for name, value in p.as_dict().items():
            arrays[f"{i}.{name}"] = value
    write_container(path, "fit_params", arrays, {"count": len(items)})


def load_params(path) -> list[FitParams]:
    arrays, meta = read_container(path, "fit_params")
    return [FitParams.from_dict({k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(f"{i}.")})
            for i in range(int(meta["count"]))]


def save_landmarks(path, landmarks: np.ndarray) -> None:
    write_container(path, "landmarks", {"points": np.asarray(landmarks, dtype=np.float64)})


def load_landmarks(path) -> np.ndarray:
    return read_container(path, "landmarks")[0]["points"]


def save_float_image(path, image: np.ndarray) -> None:
    write_container(path, "image", {"pixels": np.asarray(image, dtype=np.float64)})


def load_float_image(path) -> np.ndarray:
    return read_container(path, "image")[0]["pixels"]


# ---------------------------------------------------------------------------
# raster images

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_ppm(path, image: np.ndarray) -> None:
    data = to_uint8(image)
    h, w = data.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.reshape(h, w, 3).tobytes())


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header tokens may be separated by whitespace and comments; exactly one whitespace byte precedes the data
    m = re.match(rb"P6(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s", raw)
    if m is None:
        raise FormatError("only binary P6 PPM is supported")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise FormatError("16-bit PPM is not supported")
    data = raw[m.end(): m.end() + w * h * 3]
    if len(data) != w * h * 3:
        raise FormatError("truncated PPM pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3) / float(maxval)


def load_image(path) -> np.ndarray:
    """Float sidecar (``.txt``), PPM or PNG, by extension."""
    p = str(path)
    if p.endswith(".txt"):
        return load_float_image(path)
    if p.endswith(".ppm"):
        return load_ppm(path)
    return load_png(path)


# ---------------------------------------------------------------------------
# OBJ

def dumps_obj(mesh: Mesh) -> str:
    """``v``, ``vt`` and ``f v/vt`` records; ``vt`` keeps the top-left UV origin."""
    out = []
    for v in mesh.vertices:
        out.append("v " + " ".join(map(fmt_float, v)))
    has_uv = mesh.uv is not None
    if has_uv:
        for t in mesh.uv:
            out.append("vt " + " ".join(map(fmt_float, t)))
    for tri in mesh.triangles + 1:
        out.append("f " + " ".join(f"{i}/{i}" if has_uv else str(i) for i in tri))
    return "\n".join(out) + "\n"


def loads_obj(text: str) -> Mesh:
    verts, uvs, tris = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
        except ValueError:
            raise FormatError(f"malformed OBJ record on line {lineno}: {line!r}") from None
    if not verts:
        raise FormatError("OBJ has no vertices")
    uv = np.asarray(uvs) if len(uvs) == len(verts) else None
    return Mesh(np.asarray(verts), np.asarray(tris, dtype=np.int64).reshape(-1, 3), uv)


def save_obj(path, mesh: Mesh) -> None:
    Path(path).write_text(dumps_obj(mesh))


def load_obj(path) -> Mesh:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    return loads_obj(text)


# ---------------------------------------------------------------------------
# traces, configs, manifests

def dumps_trace(rows: list[dict[str, float]], header: list[str] | None = None) -> str:
    buf = _io.StringIO()
    for line in header or []:
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in rows:
        writer.writerow([str(int(row["iter"]))] + [fmt_float(row[c]) for c in TRACE_COLUMNS[1:]])
    return buf.getvalue()


def loads_trace(text: str) -> tuple[list[str], list[dict[str, float]]]:
    header = [line for line in text.splitlines() if line.startswith("#")]
    body = [line for line in text.splitlines() if line and not line.startswith("#")]
    reader = csv.DictReader(body)
    rows = [{k: (int(v) if k == "iter" else float(v)) for k, v in r.items()} for r in reader]
    return header, rows


def dumps_keyvalue(items: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def loads_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


_CONFIG_INTS = {"stage1_steps", "stage2_steps", "seed"}
_CONFIG_FLOATS = {"lr", "beta1", "beta2", "eps"}
_CONFIG_PATHS = {"model", "decoder", "net", "texture"}


def config_to_dict(config: FitConfig, extra: dict[str, str] | None = None) -> dict[str, str]:
    out = {name: (str(getattr(config, name)) if name in _CONFIG_INTS else fmt_float(getattr(config, name)))
           for name in ("lr", "stage1_steps", "stage2_steps", "seed", "beta1", "beta2", "eps")}
    for f in fields(LossWeights):
        out[f"weight.{f.name}"] = fmt_float(getattr(config.weights, f.name))
    out["drop"] = ",".join(config.dropped)
    out.update(extra or {})
    return out


def config_from_dict(items: dict[str, str]) -> tuple[FitConfig, dict[str, str]]:
    """Build a config; returns it with the non-numeric entries (file paths, texture choice)."""
    kwargs, weights, extra = {}, {}, {}
    for key, value in items.items():
        try:
            if key in _CONFIG_INTS:
                kwargs[key] = int(value)
            elif key in _CONFIG_FLOATS:
                kwargs[key] = float(value)
            elif key.startswith("weight."):
                weights[key[len("weight."):]] = float(value)
            elif key == "drop":
                continue
            elif key in _CONFIG_PATHS:
                extra[key] = value
            else:
                raise FormatError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"config key {key!r}: cannot parse {value!r}") from None
    try:
        base = LossWeights.desk()
        w = LossWeights(**{f.name: weights.get(f.name, getattr(base, f.name)) for f in fields(LossWeights)})
        unknown = set(weights) - {f.name for f in fields(LossWeights)}
        if unknown:
            raise FormatError(f"unknown loss weights {sorted(unknown)}")
        config = FitConfig(weights=w, **kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from None
    dropped = [t for t in items.get("drop", "").split(",") if t]
    if dropped:
        try:
            config = config.drop(*dropped)
        except ValueError as exc:
            raise FormatError(str(exc)) from None
    return config, extra


def load_config(path) -> tuple[FitConfig, dict[str, str]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(loads_keyvalue(text))
