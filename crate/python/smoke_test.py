"""Smoke test for the speft Python extension.

Build first:
    cargo build --release -p speft-py --features extension-module
then run:
    python3 python/smoke_test.py
"""

import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_speft():
    try:
        import speft

        return speft
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libspeft.so", "libspeft.dylib", "speft.dll"):
            lib = ROOT / "target" / profile / name
            if lib.exists():
                dest = pathlib.Path(tempfile.mkdtemp()) / ("speft.pyd" if name.endswith(".dll") else "speft.so")
                shutil.copy(lib, dest)
                spec = importlib.util.spec_from_file_location("speft", dest)
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
                return module
    sys.exit("speft extension not found; build it with cargo build --release -p speft-py --features extension-module")


def main():
    speft = load_speft()
    assert "gradient" in speft.metrics()
    assert speft.budget(0.1, 1000) == 100

    ckpt = speft.Checkpoint.init({"architecture": "mlp", "widths": [4, 16, 2], "activation": "tanh"}, seed=0)
    assert ckpt.num_params == 114
    data = speft.Dataset({"kind": "teacher_student", "widths": [4, 8, 2], "teacher_seed": 1, "noise": 0.0, "n": 256, "seed": 2})
    assert data.train_size + data.eval_size == len(data) == 256

    try:
        speft.Scores.compute(ckpt, "grasp")
        raise AssertionError("grasp without data should fail")
    except ValueError as e:
        assert "requires data" in str(e)

    scores = speft.Scores.compute(ckpt, "gradient", data, batches=4, batch_size=8)
    assert len(scores) == 96
    mask = speft.Mask.build(scores, 0.25, "global")
    assert mask.nnz == 24
    assert mask.overlap(mask) == 1.0

    before = ckpt.evaluate(data)["loss"]
    tuned, log = speft.train(
        ckpt,
        data,
        {"density": 0.25, "steps": 200, "batch_size": 16, "interval": 50,
         "optimizer": {"lr": 0.01}, "salience": {"batches": 4, "batch_size": 8}},
    )
    after = tuned.evaluate(data)["loss"]
    refreshes = [r["step"] for r in log if r["kind"] == "refresh"]
    assert refreshes == [1, 50, 100, 150, 200], refreshes
    assert math.isfinite(after) and after < before, (before, after)

    report = speft.overhead("gradient", 10000, 1000, 64)
    assert report["refreshes"] == 11 and report["estimation_steps"] == 704
    plan = speft.parity_density(ckpt, 2)
    assert plan["sparse_count"] == plan["low_rank_count"]

    with tempfile.TemporaryDirectory() as d:
        p = pathlib.Path(d)
        tuned.save(p / "t.ckpt")
        assert speft.Checkpoint.load(p / "t.ckpt").fingerprint == tuned.fingerprint
        mask.save(p / "m.mask")
        assert speft.Mask.load(p / "m.mask").layers() == mask.layers()

    print(f"ok: eval loss {before:.4f} -> {after:.4f}, refreshes {refreshes}")


if __name__ == "__main__":
    main()
