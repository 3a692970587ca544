"""On-disk formats: datasets, checkpoints, classification maps.

All native containers share one layout::

    magic (8 bytes) | header length (uint32 LE) | header JSON (UTF-8)
    | payload (little-endian, C order) | CRC32 of header+payload (uint32 LE)

Headers are serialized with sorted keys and no whitespace, payloads are
concatenated in a canonical order, and nothing in a file depends on
wall-clock time, so writing the same logical state twice produces
byte-identical files. Every writer goes through an atomic
write-then-rename, so a crash mid-write never leaves a partial file at
the target path.

Dataset payloads are float32 (cube) and uint16 (labels); checkpoints
store every tensor as float64, exactly as trained. ``.npy`` files are
accepted as a read-only convenience for cubes and label grids.
"""

from __future__ import annotations

import colorsys
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, InputError, VersionError
from .kernels import BnMoments
from .model import MixerConfig, ModelParams, param_shapes
from .preprocess import HsiCube, LabelMap, PcaModel
from .train import AdamState, TrainConfig

FORMAT_VERSION = 1
DATASET_MAGIC = b"MXHSI01\n"
CHECKPOINT_MAGIC = b"MXCKPT1\n"
_NPY_MAGIC = b"\x93NUMPY"


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Shared container plumbing
# ---------------------------------------------------------------------------

def _pack_container(magic: bytes, header: dict, payload: bytes) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    crc = zlib.crc32(header_bytes + payload) & 0xFFFFFFFF
    return b"".join([
        magic,
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        payload,
        struct.pack("<I", crc),
    ])


def _unpack_container(path, magic: bytes) -> tuple[dict, bytes, int]:
    """Parse a container file; returns (header, payload, payload offset)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(magic):
        raise CorruptionError(f"{path}: file is {len(data)} bytes, shorter than the 8-byte magic")
    if data[:len(magic)] != magic:
        raise FormatError(
            f"{path}: bad magic at offset 0: expected {magic!r}, found {data[:len(magic)]!r}"
        )
    if len(data) < 12:
        raise CorruptionError(f"{path}: truncated at offset {len(data)}, header length missing")
    (header_len,) = struct.unpack("<I", data[8:12])
    payload_offset = 12 + header_len
    if len(data) < payload_offset + 4:
        raise CorruptionError(
            f"{path}: truncated at offset {len(data)}; header of {header_len} bytes "
            f"plus checksum needs at least {payload_offset + 4}"
        )
    header_bytes = data[12:payload_offset]
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header at offset 12 is not valid JSON: {exc}") from exc
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    payload = data[payload_offset:-4]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    computed = zlib.crc32(header_bytes + payload) & 0xFFFFFFFF
    if stored_crc != computed:
        raise CorruptionError(
            f"{path}: checksum mismatch at offset {len(data) - 4}: "
            f"stored {stored_crc:#010x}, computed {computed:#010x}"
        )
    return header, payload, payload_offset


def _check_payload_size(path, payload: bytes, expected: int, offset: int) -> None:
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload at offset {offset} has {len(payload)} bytes, expected {expected}"
        )


# ---------------------------------------------------------------------------
# Cubes and label grids
# ---------------------------------------------------------------------------

def save_cube(
    cube: HsiCube,
    path,
    wavelength_range: Optional[tuple[float, float]] = None,
    band_names: Optional[list[str]] = None,
) -> None:
    """Write a cube as float32; values must be float32-representable to round-trip."""
    header = {
        "version": FORMAT_VERSION,
        "kind": "cube",
        "shape": [cube.height, cube.width, cube.bands],
        "dtype": "float32",
    }
    if wavelength_range is not None:
        lo, hi = float(wavelength_range[0]), float(wavelength_range[1])
        if not lo < hi:
            raise ConfigError(f"wavelength range must be increasing, got ({lo}, {hi})")
        header["wavelength_range"] = [lo, hi]
    if band_names is not None:
        if len(band_names) != cube.bands:
            raise ConfigError(
                f"{len(band_names)} band names for {cube.bands} bands"
            )
        header["band_names"] = [str(n) for n in band_names]
    payload = cube.values.astype("<f4").tobytes(order="C")
    atomic_write_bytes(path, _pack_container(DATASET_MAGIC, header, payload))


def load_cube(path) -> HsiCube:
    """Read a cube from the native container or a ``.npy`` array."""
    path = Path(path)
    head = path.read_bytes()[:len(_NPY_MAGIC)] if path.exists() else b""
    if head == _NPY_MAGIC:
        values = np.load(path, allow_pickle=False)
        if values.ndim != 3:
            raise FormatError(f"{path}: expected a 3-D array, got shape {values.shape}")
        return HsiCube(values.astype(np.float64))
    header, payload, offset = _unpack_container(path, DATASET_MAGIC)
    if header.get("kind") != "cube":
        raise FormatError(f"{path}: container kind {header.get('kind')!r}, expected 'cube'")
    shape = tuple(header.get("shape", ()))
    if len(shape) != 3 or any(not isinstance(s, int) or s < 1 for s in shape):
        raise FormatError(f"{path}: bad cube shape {shape!r} in header")
    if header.get("dtype") != "float32":
        raise FormatError(f"{path}: cube dtype {header.get('dtype')!r}, expected 'float32'")
    expected = shape[0] * shape[1] * shape[2] * 4
    _check_payload_size(path, payload, expected, offset)
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return HsiCube(values)


def save_labels(label_map: LabelMap, path, class_names: Optional[list[str]] = None) -> None:
    _save_label_grid(label_map.labels, label_map.num_classes, "labels", path, class_names)


def save_prediction(grid: np.ndarray, num_classes: int, path) -> None:
    """Write a predicted label grid; unlike ground truth, classes may be absent."""
    _save_label_grid(np.asarray(grid), num_classes, "prediction", path, None)


def _save_label_grid(grid, num_classes, kind, path, class_names) -> None:
    grid = np.ascontiguousarray(grid)
    if grid.ndim != 2:
        raise InputError(f"label grid must be 2-D, got shape {grid.shape}")
    if not np.issubdtype(grid.dtype, np.integer):
        raise InputError(f"label grid must be integer, got dtype {grid.dtype}")
    if num_classes < 1 or num_classes > 0xFFFF:
        raise ConfigError(f"num_classes must be in 1..65535, got {num_classes}")
    if grid.min() < 0 or grid.max() > num_classes:
        raise InputError(
            f"label values must lie in 0..{num_classes}, found {grid.min()}..{grid.max()}"
        )
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "shape": [int(grid.shape[0]), int(grid.shape[1])],
        "dtype": "uint16",
        "num_classes": int(num_classes),
    }
    if class_names is not None:
        if len(class_names) != num_classes:
            raise ConfigError(f"{len(class_names)} class names for {num_classes} classes")
        header["class_names"] = [str(n) for n in class_names]
    payload = grid.astype("<u2").tobytes(order="C")
    atomic_write_bytes(path, _pack_container(DATASET_MAGIC, header, payload))


def _load_label_grid(path, kinds: tuple[str, ...]) -> tuple[np.ndarray, int, dict]:
    path = Path(path)
    head = path.read_bytes()[:len(_NPY_MAGIC)] if path.exists() else b""
    if head == _NPY_MAGIC:
        grid = np.load(path, allow_pickle=False)
        if grid.ndim != 2 or not np.issubdtype(grid.dtype, np.integer):
            raise FormatError(f"{path}: expected a 2-D integer array")
        grid = grid.astype(np.int64)
        if grid.min() < 0:
            raise FormatError(f"{path}: negative label values")
        return grid, int(max(grid.max(), 1)), {}
    header, payload, offset = _unpack_container(path, DATASET_MAGIC)
    kind = header.get("kind")
    if kind not in kinds:
        raise FormatError(f"{path}: container kind {kind!r}, expected one of {kinds}")
    shape = tuple(header.get("shape", ()))
    if len(shape) != 2 or any(not isinstance(s, int) or s < 1 for s in shape):
        raise FormatError(f"{path}: bad label shape {shape!r} in header")
    if header.get("dtype") != "uint16":
        raise FormatError(f"{path}: label dtype {header.get('dtype')!r}, expected 'uint16'")
    num_classes = header.get("num_classes")
    if not isinstance(num_classes, int) or num_classes < 1:
        raise FormatError(f"{path}: bad num_classes {num_classes!r} in header")
    expected = shape[0] * shape[1] * 2
    _check_payload_size(path, payload, expected, offset)
    grid = np.frombuffer(payload, dtype="<u2").reshape(shape).astype(np.int64)
    bad = np.argwhere(grid > num_classes)
    if bad.size:
        row, col = (int(v) for v in bad[0])
        flat = row * shape[1] + col
        raise FormatError(
            f"{path}: label {int(grid[row, col])} exceeds num_classes {num_classes} "
            f"at (row {row}, col {col}), payload byte offset {offset + 2 * flat}"
        )
    return grid, num_classes, header


def load_labels(path) -> LabelMap:
    grid, num_classes, _ = _load_label_grid(path, ("labels",))
    return LabelMap(grid, num_classes)


def load_prediction(path) -> tuple[np.ndarray, int]:
    grid, num_classes, _ = _load_label_grid(path, ("prediction", "labels"))
    return grid, num_classes


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a trained model."""

    model_config: MixerConfig
    params: ModelParams
    bn_state: dict
    pca: PcaModel
    train_config: Optional[TrainConfig] = None
    adam: Optional[AdamState] = None
    history_summary: Optional[dict] = None


def _checkpoint_manifest(ckpt: Checkpoint):
    """Yield ``(group, name, array)`` in the canonical serialization order."""
    for name in sorted(ckpt.params):
        yield "param", name, ckpt.params[name]
    for name in sorted(ckpt.bn_state):
        yield "bn.mean", name, ckpt.bn_state[name].mean
        yield "bn.var", name, ckpt.bn_state[name].var
    if ckpt.adam is not None:
        for name in sorted(ckpt.adam.m):
            yield "adam.m", name, ckpt.adam.m[name]
        for name in sorted(ckpt.adam.v):
            yield "adam.v", name, ckpt.adam.v[name]
    yield "pca.mean", "pca", ckpt.pca.mean
    yield "pca.components", "pca", ckpt.pca.components
    yield "pca.variance", "pca", ckpt.pca.explained_variance


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = []
    chunks = []
    for group, name, array in _checkpoint_manifest(ckpt):
        array = np.ascontiguousarray(array, dtype=np.float64)
        tensors.append({"group": group, "name": name, "shape": list(array.shape)})
        chunks.append(array.tobytes(order="C"))
    header = {
        "version": FORMAT_VERSION,
        "kind": "checkpoint",
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "adam": (
            {
                "step": ckpt.adam.step,
                "beta1": ckpt.adam.beta1,
                "beta2": ckpt.adam.beta2,
                "epsilon": ckpt.adam.epsilon,
            }
            if ckpt.adam is not None
            else None
        ),
        "history_summary": ckpt.history_summary,
        "tensors": tensors,
    }
    atomic_write_bytes(path, _pack_container(CHECKPOINT_MAGIC, header, b"".join(chunks)))


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint.

    The format version and the declared tensor manifest are checked
    against the embedded model config before any tensor bytes are
    decoded; a file whose shapes disagree with its own config is
    rejected as malformed.
    """
    header, payload, offset = _unpack_container(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: container kind {header.get('kind')!r}, expected 'checkpoint'")
    try:
        model_config = MixerConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: bad model config in header: {exc}") from exc
    train_config = None
    if header.get("train_config") is not None:
        try:
            train_config = TrainConfig.from_dict(header["train_config"])
        except (TypeError, ConfigError) as exc:
            raise FormatError(f"{path}: bad train config in header: {exc}") from exc

    manifest = header.get("tensors")
    if not isinstance(manifest, list):
        raise FormatError(f"{path}: header lacks a tensor manifest")
    by_group: dict[str, dict[str, np.ndarray]] = {}
    cursor = 0
    for entry in manifest:
        group, name = entry.get("group"), entry.get("name")
        shape = tuple(entry.get("shape", ()))
        count = 1
        for extent in shape:
            if not isinstance(extent, int) or extent < 1:
                raise FormatError(f"{path}: bad shape {shape!r} for tensor {name!r}")
            count *= extent
        nbytes = count * 8
        if cursor + nbytes > len(payload):
            raise CorruptionError(
                f"{path}: tensor {name!r} needs bytes {cursor}..{cursor + nbytes} of a "
                f"{len(payload)}-byte payload (payload offset {offset})"
            )
        array = np.frombuffer(payload, dtype="<f8", count=count, offset=cursor).reshape(shape)
        by_group.setdefault(group, {})[name] = array.copy()
        cursor += nbytes
    if cursor != len(payload):
        raise CorruptionError(
            f"{path}: {len(payload) - cursor} unexpected trailing payload bytes"
        )

    expected = param_shapes(model_config)
    stored = by_group.get("param", {})
    if set(stored) != set(expected):
        raise FormatError(
            f"{path}: parameter names do not match the embedded model config"
        )
    params: ModelParams = {}
    for name, shape in expected.items():
        if tuple(stored[name].shape) != shape:
            raise FormatError(
                f"{path}: parameter {name} has shape {stored[name].shape}, expected {shape}"
            )
        params[name] = stored[name]

    means = by_group.get("bn.mean", {})
    variances = by_group.get("bn.var", {})
    if set(means) != set(variances):
        raise FormatError(f"{path}: batch-norm means and variances disagree")
    bn_state = {name: BnMoments(means[name], variances[name]) for name in sorted(means)}

    adam = None
    if header.get("adam") is not None:
        meta = header["adam"]
        m = by_group.get("adam.m", {})
        v = by_group.get("adam.v", {})
        if set(m) != set(params) or set(v) != set(params):
            raise FormatError(f"{path}: optimizer state names do not match parameters")
        adam = AdamState(m, v, int(meta["step"]), float(meta["beta1"]),
                         float(meta["beta2"]), float(meta["epsilon"]))

    for group in ("pca.mean", "pca.components", "pca.variance"):
        if "pca" not in by_group.get(group, {}):
            raise FormatError(f"{path}: missing PCA tensor {group!r}")
    pca = PcaModel(
        by_group["pca.mean"]["pca"],
        by_group["pca.components"]["pca"],
        by_group["pca.variance"]["pca"],
    )
    return Checkpoint(
        model_config=model_config,
        params=params,
        bn_state=bn_state,
        pca=pca,
        train_config=train_config,
        adam=adam,
        history_summary=header.get("history_summary"),
    )


# ---------------------------------------------------------------------------
# Palette and map rendering
# ---------------------------------------------------------------------------

# Hand-picked, mutually distinct, none black; derived classes continue
# with a golden-angle hue walk.
_BASE_COLORS = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
)


def class_palette(num_classes: int) -> np.ndarray:
    """Deterministic palette ``(num_classes + 1, 3)``; row 0 is black.

    Every class id maps to a unique non-black color, so a rendered map
    can be decoded back to labels exactly.
    """
    if num_classes < 1:
        raise ConfigError(f"num_classes must be positive, got {num_classes}")
    colors = [(0, 0, 0)]
    used = {(0, 0, 0)}
    hue = 0.0
    for k in range(num_classes):
        if k < len(_BASE_COLORS):
            color = _BASE_COLORS[k]
        else:
            while True:
                hue = (hue + 0.6180339887498949) % 1.0
                rgb = colorsys.hsv_to_rgb(hue, 0.72, 0.93)
                color = tuple(int(round(255 * v)) for v in rgb)
                if color not in used:
                    break
        if color in used:
            raise ConfigError(f"palette collision at class {k + 1}")
        used.add(color)
        colors.append(color)
    return np.array(colors, dtype=np.uint8)


def render_map(grid: np.ndarray, path, palette: Optional[np.ndarray] = None,
               num_classes: Optional[int] = None) -> None:
    """Write a label grid as a color image; ``.ppm`` (binary) or ``.png``."""
    grid = np.ascontiguousarray(grid)
    if grid.ndim != 2 or not np.issubdtype(grid.dtype, np.integer):
        raise InputError(f"grid must be a 2-D integer array, got {grid.dtype} {grid.shape}")
    if grid.min() < 0:
        raise InputError("grid values must be non-negative")
    if palette is None:
        palette = class_palette(num_classes if num_classes is not None else max(int(grid.max()), 1))
    palette = np.ascontiguousarray(palette, dtype=np.uint8)
    if palette.ndim != 2 or palette.shape[1] != 3:
        raise InputError(f"palette must be (K, 3), got shape {palette.shape}")
    if grid.max() >= palette.shape[0]:
        raise InputError(
            f"grid value {int(grid.max())} outside palette of {palette.shape[0]} entries"
        )
    image = palette[grid]
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        atomic_write_bytes(path, _ppm_bytes(image))
    elif suffix == ".png":
        atomic_write_bytes(path, _png_bytes(image))
    else:
        raise ConfigError(f"unsupported image suffix {suffix!r}; use .ppm or .png")


def decode_map(image: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Invert :func:`render_map`: colors back to class ids."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    palette = np.ascontiguousarray(palette, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"image must be (H, W, 3), got shape {image.shape}")
    lookup = {tuple(color): idx for idx, color in enumerate(palette.tolist())}
    grid = np.empty(image.shape[:2], dtype=np.int64)
    flat = image.reshape(-1, 3)
    out = grid.reshape(-1)
    for i, pixel in enumerate(flat.tolist()):
        key = tuple(pixel)
        if key not in lookup:
            raise InputError(f"pixel {i} has color {key} outside the palette")
        out[i] = lookup[key]
    return grid


def _ppm_bytes(image: np.ndarray) -> bytes:
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes(order="C")


def read_map(path) -> np.ndarray:
    """Read a binary PPM written by :func:`render_map`."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (magic {data[:2]!r} at offset 0)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptionError(f"{path}: truncated PPM header at offset {pos}")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric PPM header fields {fields!r}") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval}")
    expected = w * h * 3
    raw = data[pos:pos + expected]
    if len(raw) != expected:
        raise CorruptionError(
            f"{path}: pixel data at offset {pos} has {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def _png_chunk(tag: bytes, body: bytes) -> bytes:
    return (
        struct.pack(">I", len(body))
        + tag
        + body
        + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)
    )


def _png_bytes(image: np.ndarray) -> bytes:
    h, w, _ = image.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)  # 8-bit RGB, no interlace
    raw = b"".join(b"\x00" + image[row].tobytes(order="C") for row in range(h))
    return (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(raw, 9))
        + _png_chunk(b"IEND", b"")
    )
