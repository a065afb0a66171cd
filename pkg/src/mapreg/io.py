"""Volume files, intensity normalization and the flat key-value config file.

Volume layout: an ASCII header, one ``key value...`` pair per line, closed by
``end``, then the raw little-endian payload. Within each channel the first
axis varies fastest; channels are stored one after another.

    mapreg-volume 1
    kind scalar|vector|map|labels
    ndim 3
    dims 64 64 64
    channels 1
    dtype float32le|uint16le
    extent 1 1 1
    labels 1 2          (labels only)
    end
"""
from __future__ import annotations

import configparser
import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .affine import AffineOptConfig
from .grid import GridSpec, LabelImage, ScalarImage, TransformMap, VectorField
from .similarity import WindowSpec
from .smoothing import MultiGaussianKernel
from .vsvf import VsvfConfig

MAGIC = "mapreg-volume 1"
_DTYPES = {"float32le": np.dtype("<f4"), "uint16le": np.dtype("<u2")}
_KINDS = ("scalar", "vector", "map", "labels")


class VolumeFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def encode_volume(value) -> bytes:
    if isinstance(value, LabelImage):
        kind, arr, dtype = "labels", value.values[None], "uint16le"
        if value.values.size and (value.values.min() < 0 or value.values.max() > 65535):
            raise VolumeFormatError("label values must fit in 16 unsigned bits")
    elif isinstance(value, TransformMap):
        kind, arr, dtype = "map", value.values, "float32le"
    elif isinstance(value, VectorField):
        kind, arr, dtype = "vector", value.values, "float32le"
    elif isinstance(value, ScalarImage):
        kind, arr, dtype = "scalar", value.values[None], "float32le"
    else:
        raise TypeError(f"cannot write {type(value).__name__}")
    grid = value.grid
    lines = [MAGIC, f"kind {kind}", f"ndim {grid.ndim}",
             "dims " + " ".join(str(n) for n in grid.dims),
             f"channels {arr.shape[0]}", f"dtype {dtype}",
             "extent " + " ".join(_fmt(e) for e in grid.extent)]
    if kind == "labels":
        lines.append("labels " + " ".join(str(lab) for lab in value.labels))
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    # per channel, first axis fastest == Fortran order
    payload = b"".join(np.asfortranarray(ch).astype(_DTYPES[dtype]).tobytes(order="F") for ch in arr)
    return header + payload


def write_volume(value, path: str | os.PathLike) -> None:
    atomic_write(path, encode_volume(value))


def _parse_header(data: bytes):
    head = {}
    pos = 0
    first = True
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise VolumeFormatError("header is not terminated by an 'end' line")
        try:
            line = data[pos:nl].decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise VolumeFormatError("header is not ASCII") from exc
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise VolumeFormatError(f"bad magic line {line!r}")
            first = False
            continue
        if line == "end":
            return head, pos
        key, _, rest = line.partition(" ")
        if not key or key in head:
            raise VolumeFormatError(f"malformed or repeated header line {line!r}")
        head[key] = rest.split()


def decode_volume(data: bytes):
    head, offset = _parse_header(data)
    required = ("kind", "ndim", "dims", "channels", "dtype", "extent")
    missing = [k for k in required if k not in head]
    if missing:
        raise VolumeFormatError(f"header lacks {missing}")
    try:
        kind = head["kind"][0]
        ndim = int(head["ndim"][0])
        dims = tuple(int(n) for n in head["dims"])
        channels = int(head["channels"][0])
        extent = tuple(float(e) for e in head["extent"])
        dtype_name = head["dtype"][0]
    except (ValueError, IndexError) as exc:
        raise VolumeFormatError(f"unparsable header value: {exc}") from exc
    if kind not in _KINDS:
        raise VolumeFormatError(f"unknown kind {kind!r}")
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype {dtype_name!r}")
    if len(dims) != ndim or len(extent) != ndim:
        raise VolumeFormatError(f"ndim {ndim} disagrees with dims {dims} / extent {extent}")
    expected_channels = ndim if kind in ("vector", "map") else 1
    if channels != expected_channels:
        raise VolumeFormatError(f"kind {kind} on a {ndim}D grid needs {expected_channels} channels, "
                                f"header declares {channels}")
    if (kind == "labels") != (dtype_name == "uint16le"):
        raise VolumeFormatError(f"kind {kind} cannot be stored as {dtype_name}")
    dtype = _DTYPES[dtype_name]
    n_vox = int(np.prod(dims))
    need = channels * n_vox * dtype.itemsize
    payload = data[offset:]
    if len(payload) != need:
        raise VolumeFormatError(f"payload has {len(payload)} bytes, header implies {need}")
    try:
        grid = GridSpec(dims, extent)
    except ValueError as exc:
        raise VolumeFormatError(str(exc)) from exc
    flat = np.frombuffer(payload, dtype=dtype).reshape(channels, n_vox)
    arr = np.stack([ch.reshape(dims, order="F") for ch in flat])
    if kind == "labels":
        labels = tuple(int(x) for x in head.get("labels", []))
        return LabelImage(grid, arr[0].astype(np.int64), labels)
    arr = arr.astype(np.float64)
    if kind == "scalar":
        return ScalarImage(grid, arr[0])
    if kind == "vector":
        return VectorField(grid, arr)
    return TransformMap(grid, arr)


def read_volume(path: str | os.PathLike):
    return decode_volume(Path(path).read_bytes())


def normalize_intensity(image: ScalarImage, low: float = 0.1, high: float = 99.9) -> ScalarImage:
    """Send the ``low``/``high`` percentiles to 0/1 and clamp."""
    lo, hi = np.percentile(image.values, [low, high])
    if not hi > lo:
        raise ValueError("cannot normalize a constant image")
    return ScalarImage(image.grid, np.clip((image.values - lo) / (hi - lo), 0.0, 1.0))


# ---------------------------------------------------------------------------
# config


@dataclass
class PipelineConfig:
    """Every tunable of the registration pipeline, as one flat record."""

    affine_scales: tuple[float, ...] = (0.25, 0.5, 1.0)
    affine_iterations: tuple[int, ...] | None = None
    affine_optimizer: str = "lbfgs"
    affine_learning_rate: float = 1e-4
    lambda_as: float = 10.0
    c_ar: float = 10.0
    k_ar: float = 4.0
    vsvf_scales: tuple[float, ...] = (0.25, 0.5, 1.0)
    vsvf_iterations: tuple[int, ...] = (60, 60, 60)
    lambda_vr: float = 10.0
    lambda_vs: float = 1e-4
    symmetry_norm: str = "sum"
    kernel_sigmas: tuple[float, ...] = MultiGaussianKernel().sigmas
    kernel_weights: tuple[float, ...] = MultiGaussianKernel().weights
    n_time_steps: int = 10
    lowres_factor: float = 0.5
    vsvf_steps: int = 1
    lncc_fine: tuple[tuple[float, float], ...] = WindowSpec().fine
    lncc_coarse: tuple[tuple[float, float], ...] = WindowSpec().coarse
    lncc_stride: float = 0.25
    lncc_dilation: int = 2
    coarse_single_kernel: bool = True
    normalize: bool = True
    extra: dict = field(default_factory=dict, repr=False)

    def windows(self) -> WindowSpec:
        return WindowSpec(self.lncc_fine, self.lncc_coarse, self.lncc_stride, self.lncc_dilation)

    def affine(self) -> AffineOptConfig:
        return AffineOptConfig(scales=self.affine_scales, iters_per_scale=self.affine_iterations,
                               optimizer=self.affine_optimizer,
                               learning_rate=self.affine_learning_rate, lambda_as=self.lambda_as,
                               c_ar=self.c_ar, k_ar=self.k_ar, windows=self.windows(),
                               coarse_single_kernel=self.coarse_single_kernel)

    def vsvf(self) -> VsvfConfig:
        return VsvfConfig(n_time_steps=self.n_time_steps,
                          kernel=MultiGaussianKernel(self.kernel_sigmas, self.kernel_weights),
                          lambda_vr=self.lambda_vr, lambda_vs=self.lambda_vs,
                          symmetry_norm=self.symmetry_norm, windows=self.windows(), coarse_single_kernel=self.coarse_single_kernel,
                          lowres_factor=self.lowres_factor, n_steps=self.vsvf_steps,
                          scales=self.vsvf_scales, iters_per_scale=self.vsvf_iterations)


_SECTION = "mapreg"


def _config_fields():
    return [f for f in fields(PipelineConfig) if f.name != "extra"]


def _to_plain(value):
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def _to_tuple(value):
    if isinstance(value, list):
        return tuple(_to_tuple(v) for v in value)
    return value


def dump_config(cfg: PipelineConfig) -> str:
    """``key = value`` lines with JSON values, under a single section header."""
    lines = [f"[{_SECTION}]"]
    for f in _config_fields():
        lines.append(f"{f.name} = {json.dumps(_to_plain(getattr(cfg, f.name)))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    body = text if text.lstrip().startswith("[") else f"[{_SECTION}]\n{text}"
    try:
        parser.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    if parser.sections() != [_SECTION]:
        raise ConfigError(f"expected a single [{_SECTION}] section")
    known = {f.name for f in _config_fields()}
    values = {}
    for key, raw in parser[_SECTION].items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _to_tuple(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"value of {key!r} is not valid JSON: {raw!r}") from exc
    try:
        cfg = PipelineConfig(**values)
        cfg.affine()
        cfg.vsvf()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def read_config(path: str | os.PathLike) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def write_config(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    atomic_write(path, dump_config(cfg).encode())
