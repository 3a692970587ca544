#!/usr/bin/env python3
"""Generate a synthetic striped scene for smoke tests and demos.

Example:

    python scripts/make_synthetic_dataset.py --height 64 --width 64 \
        --bands 20 --classes 3 --out data/synthetic
"""

import argparse
from pathlib import Path

from mixerca.storage import save_cube, save_labels
from mixerca.synthetic import separable_scene


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--height", type=int, default=64)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--bands", type=int, default=20)
    parser.add_argument("--classes", type=int, default=3)
    parser.add_argument("--noise", type=float, default=0.05,
                        help="per-band noise standard deviation")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, required=True,
                        help="output directory for scene.cube and scene.labels")
    args = parser.parse_args()

    cube, labels = separable_scene(
        height=args.height, width=args.width, bands=args.bands,
        num_classes=args.classes, noise=args.noise, seed=args.seed,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    cube_path = args.out / "scene.cube"
    labels_path = args.out / "scene.labels"
    save_cube(cube, cube_path)
    save_labels(labels, labels_path)
    print(f"wrote {cube_path} ({cube.height}x{cube.width}x{cube.bands})")
    print(f"wrote {labels_path} ({labels.num_classes} classes)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
