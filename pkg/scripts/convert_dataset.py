#!/usr/bin/env python3
"""Convert a MATLAB or .npy hyperspectral scene to the native containers.

The public benchmark scenes ship as .mat files holding one array each
(the cube as H x W x B reflectance, the ground truth as H x W integer
labels with 0 for unlabeled). Pick the variable explicitly with --key
when a file carries more than one candidate.

Example:

    python scripts/convert_dataset.py --cube PaviaU.mat \
        --labels PaviaU_gt.mat --out data/pu
"""

import argparse
from pathlib import Path

import numpy as np
import scipy.io

from mixerca.preprocess import HsiCube, LabelMap
from mixerca.storage import save_cube, save_labels


def load_array(path: Path, key: str | None) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        return np.load(path)
    contents = scipy.io.loadmat(path)
    arrays = {
        name: value for name, value in contents.items()
        if isinstance(value, np.ndarray) and value.ndim >= 2 and not name.startswith("__")
    }
    if key is not None:
        if key not in arrays:
            raise SystemExit(f"{path}: no array named {key!r}; found {sorted(arrays)}")
        return arrays[key]
    if len(arrays) != 1:
        raise SystemExit(f"{path}: ambiguous contents {sorted(arrays)}; pass --key")
    return next(iter(arrays.values()))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--cube", type=Path, help="cube .mat or .npy file")
    parser.add_argument("--cube-key", help="variable name inside the cube .mat")
    parser.add_argument("--labels", type=Path, help="ground-truth .mat or .npy file")
    parser.add_argument("--labels-key", help="variable name inside the labels .mat")
    parser.add_argument("--name", default="scene", help="output file stem")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    args = parser.parse_args()
    if args.cube is None and args.labels is None:
        parser.error("nothing to convert; pass --cube and/or --labels")

    args.out.mkdir(parents=True, exist_ok=True)
    if args.cube is not None:
        values = load_array(args.cube, args.cube_key).astype(np.float64)
        cube = HsiCube(values)
        path = args.out / f"{args.name}.cube"
        save_cube(cube, path)
        print(f"wrote {path} ({cube.height}x{cube.width}x{cube.bands})")
    if args.labels is not None:
        grid = load_array(args.labels, args.labels_key)
        grid = np.asarray(np.rint(grid), dtype=np.int64)
        label_map = LabelMap(grid, int(grid.max()))
        path = args.out / f"{args.name}.labels"
        save_labels(label_map, path)
        print(f"wrote {path} ({label_map.num_classes} classes)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
