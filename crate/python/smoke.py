#!/usr/bin/env python3
"""Smoke test for the trajseg_py extension module.

Builds the cdylib with cargo, loads it, and drives every exposed entry point
once: scene generation, training, prediction, the full segmentation pipeline,
checkpoint round-trip, and the mask metrics.

Usage: python3 python/smoke.py
"""

import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def build_extension() -> Path:
    subprocess.run(
        ["cargo", "build", "--release", "-p", "trajseg-py"],
        cwd=ROOT,
        check=True,
    )
    built = ROOT / "target" / "release" / "libtrajseg_py.so"
    staged = Path(tempfile.mkdtemp(prefix="trajseg_py_")) / "trajseg_py.so"
    shutil.copy2(built, staged)
    return staged.parent


def main() -> None:
    sys.path.insert(0, str(build_extension()))
    import trajseg_py as ts

    print(f"loaded trajseg_py {ts.__version__}")

    cfg = ts.SceneConfig(
        width=64,
        height=48,
        frame_count=12,
        object_count=2,
        dynamic_count=1,
        grid_size=10,
        step=10,
    )
    # seeds 10..19 fall in the validation split, 20..29 in training
    bundles = [ts.generate(cfg, s) for s in range(10, 30)]
    test = ts.generate(cfg, 999)

    n, t = test.track_count, test.frame_count
    assert n > 0 and t == 12, (n, t)
    labels = test.labels()
    assert len(labels) == n and any(labels) and not all(labels)
    u, v = test.point(0, 0)
    assert 0.0 <= u <= 1.0 and 0.0 <= v <= 1.0, (u, v)
    assert isinstance(test.visible(0, 0), bool)
    print(f"generated {len(bundles)} train bundles; test scene has {n} tracks")

    model = ts.Model(
        variant="full",
        model_dim=16,
        heads=2,
        ff_dim=32,
        num_blocks=1,
        semantic_dim=16,
        seed=7,
    )
    before = model.accuracy([test])
    val_acc = model.fit(bundles, epochs=3, lr=3e-3, seed=7)
    after = model.accuracy([test])
    print(f"accuracy before {before:.3f} -> after {after:.3f} (val {val_acc:.3f})")
    assert after > before, "training must improve the untrained model"

    probs = model.predict_probs(test)
    assert len(probs) == n and all(0.0 <= p <= 1.0 for p in probs)

    jf_oracle = model.segment_score(test, use_gt_labels=True)
    jf_pred = model.segment_score(test)
    print(f"pipeline J&F: ground-truth labels {jf_oracle:.3f}, predicted {jf_pred:.3f}")
    assert jf_oracle > 0.9, jf_oracle
    assert 0.0 <= jf_pred <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "model.tseg")
        model.save(path)
        reloaded = ts.Model.load(path)
        assert reloaded.predict_probs(test) == probs, "checkpoint must round-trip exactly"
    print("checkpoint round-trip exact")

    square = [[x in (1, 2) and y in (1, 2) for x in range(6)] for y in range(6)]
    empty = [[False] * 6 for _ in range(6)]
    assert ts.region_j(square, square) == 1.0
    assert ts.region_j(square, empty) == 0.0
    assert ts.region_j(empty, empty) == 1.0
    assert ts.boundary_f(square, square) == 1.0
    assert ts.boundary_f(square, empty, tolerance=2) == 0.0
    print("mask metrics agree with hand values")

    print("smoke OK")


if __name__ == "__main__":
    main()
