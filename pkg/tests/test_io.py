import json
import struct
import zlib

import numpy as np
import pytest

from mixerca import storage
from mixerca.errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    InputError,
    VersionError,
)
from mixerca.model import MixerConfig, init_bn_state, init_params, predict_batches
from mixerca.preprocess import HsiCube, LabelMap, PcaModel
from mixerca.storage import (
    Checkpoint,
    class_palette,
    decode_map,
    load_checkpoint,
    load_cube,
    load_labels,
    load_prediction,
    read_map,
    render_map,
    save_checkpoint,
    save_cube,
    save_labels,
    save_prediction,
)
from mixerca.train import AdamState, TrainConfig, adam_init


def small_cube(rng, h=4, w=3, bands=5):
    # float32 payload on disk; start from representable values so the
    # round trip is an identity
    values = rng.standard_normal((h, w, bands)).astype(np.float32).astype(np.float64)
    return HsiCube(values)


def small_label_map():
    labels = np.array([[0, 1, 2], [2, 1, 0]], dtype=np.int64)
    return LabelMap(labels, num_classes=2)


# ---------------------------------------------------------------------------
# cubes and label grids
# ---------------------------------------------------------------------------


def test_cube_round_trip(tmp_path, rng):
    cube = small_cube(rng)
    path = tmp_path / "scene.cube"
    save_cube(cube, path, wavelength_range=(0.43, 0.86))
    loaded = load_cube(path)
    np.testing.assert_array_equal(loaded.values, cube.values)
    # byte-stable: saving the loaded cube reproduces the file exactly
    save_cube(loaded, tmp_path / "again.cube", wavelength_range=(0.43, 0.86))
    assert (tmp_path / "again.cube").read_bytes() == path.read_bytes()


def test_cube_metadata_validation(tmp_path, rng):
    cube = small_cube(rng)
    with pytest.raises(ConfigError):
        save_cube(cube, tmp_path / "x.cube", wavelength_range=(0.9, 0.4))
    with pytest.raises(ConfigError):
        save_cube(cube, tmp_path / "x.cube", band_names=["only-one"])


def test_cube_reads_npy(tmp_path, rng):
    values = rng.standard_normal((3, 4, 6)).astype(np.float32)
    path = tmp_path / "scene.npy"
    np.save(path, values)
    loaded = load_cube(path)
    np.testing.assert_array_equal(loaded.values, values.astype(np.float64))


def test_labels_round_trip(tmp_path):
    lm = small_label_map()
    path = tmp_path / "gt.labels"
    save_labels(lm, path, class_names=["asphalt", "meadow"])
    loaded = load_labels(path)
    np.testing.assert_array_equal(loaded.labels, lm.labels)
    assert loaded.num_classes == 2


def test_prediction_round_trip_with_absent_class(tmp_path):
    grid = np.array([[0, 2], [2, 0]], dtype=np.int64)
    path = tmp_path / "pred.labels"
    save_prediction(grid, 3, path)
    back, num_classes = load_prediction(path)
    np.testing.assert_array_equal(back, grid)
    assert num_classes == 3


# ---------------------------------------------------------------------------
# container hardening
# ---------------------------------------------------------------------------


def test_truncated_container(tmp_path, rng):
    path = tmp_path / "scene.cube"
    save_cube(small_cube(rng), path)
    data = path.read_bytes()
    short = tmp_path / "short.cube"
    short.write_bytes(data[:6])
    with pytest.raises(CorruptionError):
        load_cube(short)
    clipped = tmp_path / "clipped.cube"
    clipped.write_bytes(data[:-6])
    with pytest.raises(CorruptionError):
        load_cube(clipped)


def test_bad_magic(tmp_path, rng):
    path = tmp_path / "scene.cube"
    save_cube(small_cube(rng), path)
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    bad = tmp_path / "bad.cube"
    bad.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_cube(bad)


def test_payload_bit_flip(tmp_path, rng):
    path = tmp_path / "scene.cube"
    save_cube(small_cube(rng), path)
    data = bytearray(path.read_bytes())
    data[-8] ^= 0x01  # inside the payload, ahead of the checksum
    flipped = tmp_path / "flipped.cube"
    flipped.write_bytes(bytes(data))
    with pytest.raises(CorruptionError, match="checksum"):
        load_cube(flipped)


def test_unsupported_version(tmp_path):
    payload = np.zeros(4, dtype="<f4").tobytes()
    header = {"version": 2, "kind": "cube", "shape": [1, 1, 4], "dtype": "float32"}
    path = tmp_path / "future.cube"
    path.write_bytes(storage._pack_container(storage.DATASET_MAGIC, header, payload))
    with pytest.raises(VersionError, match="version 2"):
        load_cube(path)


def test_out_of_range_label_is_located(tmp_path):
    payload = np.array([[1, 3]], dtype="<u2").tobytes()
    header = {
        "version": 1,
        "kind": "labels",
        "shape": [1, 2],
        "dtype": "uint16",
        "num_classes": 2,
    }
    path = tmp_path / "crafted.labels"
    path.write_bytes(storage._pack_container(storage.DATASET_MAGIC, header, payload))
    with pytest.raises(FormatError, match=r"\(row 0, col 1\), payload byte offset"):
        load_labels(path)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_fixture(rng, with_optional=True):
    cfg = MixerConfig(patch_size=3, pca_count=2, num_classes=2, stem_filters=4,
                      kernel_sizes=(3,), num_blocks=1, ca_reduction=2)
    params = init_params(cfg, seed=0)
    bn_state = init_bn_state(cfg)
    pca = PcaModel(
        mean=rng.standard_normal(6),
        components=np.linalg.qr(rng.standard_normal((6, 6)))[0][:, :2],
        explained_variance=np.array([3.0, 1.0]),
    )
    train_config = TrainConfig(seed=4) if with_optional else None
    adam = adam_init(params) if with_optional else None
    summary = {"best_epoch": 3, "best_val_loss": 0.21} if with_optional else None
    return cfg, Checkpoint(model_config=cfg, params=params, bn_state=bn_state, pca=pca,
                           train_config=train_config, adam=adam, history_summary=summary)


def test_checkpoint_round_trip_bytes(tmp_path, rng):
    cfg, ckpt = checkpoint_fixture(rng)
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(ckpt, first)
    loaded = load_checkpoint(first)
    save_checkpoint(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert loaded.model_config == cfg
    assert loaded.train_config == ckpt.train_config
    assert loaded.history_summary == ckpt.history_summary
    assert loaded.adam.step == ckpt.adam.step


def test_checkpoint_preserves_predictions(tmp_path, rng):
    cfg, ckpt = checkpoint_fixture(rng)
    patches = rng.standard_normal((9, 3, 3, 2))
    before = predict_batches(patches, ckpt.params, ckpt.bn_state, cfg)
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    after = predict_batches(patches, loaded.params, loaded.bn_state, loaded.model_config)
    np.testing.assert_array_equal(before, after)
    for name in ckpt.params:
        np.testing.assert_array_equal(loaded.params[name], ckpt.params[name])


def test_checkpoint_optional_fields_absent(tmp_path, rng):
    _, ckpt = checkpoint_fixture(rng, with_optional=False)
    path = tmp_path / "bare.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.train_config is None
    assert loaded.adam is None
    assert loaded.history_summary is None


def test_checkpoint_trailing_bytes(tmp_path, rng):
    _, ckpt = checkpoint_fixture(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    header, payload, _ = storage._unpack_container(path, storage.CHECKPOINT_MAGIC)
    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(
        storage._pack_container(storage.CHECKPOINT_MAGIC, header, payload + b"\x00\x00")
    )
    with pytest.raises(CorruptionError):
        load_checkpoint(padded)


def test_checkpoint_wrong_magic_family(tmp_path, rng):
    # a dataset container is not a checkpoint even though both parse
    path = tmp_path / "scene.cube"
    save_cube(small_cube(rng), path)
    with pytest.raises(FormatError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def test_palette_shape_and_uniqueness():
    palette = class_palette(40)
    assert palette.shape == (41, 3)
    assert palette.dtype == np.uint8
    np.testing.assert_array_equal(palette[0], [0, 0, 0])
    assert len({tuple(row) for row in palette.tolist()}) == 41
    with pytest.raises(ConfigError):
        class_palette(0)


def test_render_ppm_round_trip(tmp_path):
    grid = np.array([[0, 1, 2], [3, 4, 0]], dtype=np.int64)
    palette = class_palette(4)
    path = tmp_path / "map.ppm"
    render_map(grid, path, palette=palette)
    image = read_map(path)
    assert image.shape == (2, 3, 3)
    np.testing.assert_array_equal(decode_map(image, palette), grid)


def test_render_all_zero_is_black(tmp_path):
    grid = np.zeros((3, 3), dtype=np.int64)
    path = tmp_path / "blank.ppm"
    render_map(grid, path, num_classes=5)
    image = read_map(path)
    np.testing.assert_array_equal(image, np.zeros((3, 3, 3), dtype=np.uint8))


def test_render_png_bytes_decode(tmp_path):
    grid = np.array([[1, 2], [0, 3]], dtype=np.int64)
    palette = class_palette(3)
    path = tmp_path / "map.png"
    render_map(grid, path, palette=palette)
    data = path.read_bytes()
    assert data.startswith(b"\x89PNG\r\n\x1a\n")
    # walk the chunks and inflate the pixel stream
    pos = 8
    idat = b""
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        kind = data[pos + 4:pos + 8]
        chunk = data[pos + 8:pos + 8 + length]
        assert zlib.crc32(kind + chunk) & 0xFFFFFFFF == struct.unpack(
            ">I", data[pos + 8 + length:pos + 12 + length])[0]
        if kind == b"IDAT":
            idat += chunk
        pos += 12 + length
    raw = zlib.decompress(idat)
    h, w = grid.shape
    rows = []
    stride = 1 + 3 * w
    for r in range(h):
        line = raw[r * stride:(r + 1) * stride]
        assert line[0] == 0  # filter: none
        rows.append(np.frombuffer(line[1:], dtype=np.uint8).reshape(w, 3))
    np.testing.assert_array_equal(np.stack(rows), palette[grid])


def test_render_rejects_bad_inputs(tmp_path):
    grid = np.array([[0, 9]], dtype=np.int64)
    with pytest.raises(InputError):
        render_map(grid, tmp_path / "m.ppm", palette=class_palette(3))
    with pytest.raises(ConfigError):
        render_map(np.zeros((2, 2), dtype=np.int64), tmp_path / "m.bmp", num_classes=2)
    with pytest.raises(InputError):
        decode_map(np.full((2, 2, 3), 17, dtype=np.uint8), class_palette(2))
