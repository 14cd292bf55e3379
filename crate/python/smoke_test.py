"""Smoke test for the polyseg_py extension.

Build first:
    cargo build --release -p polyseg-py --features extension-module
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


def load_module():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libpolyseg_py.so"
        if lib.exists():
            break
    else:
        sys.exit("libpolyseg_py.so not found; build the polyseg-py crate first")
    tmp = pathlib.Path(tempfile.mkdtemp())
    target = tmp / "polyseg_py.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("polyseg_py", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    ps = load_module()

    pred = [[1, 1], [0, 0]]
    truth = [[1, 0], [1, 0]]
    assert ps.confusion_counts(pred, truth) == (1, 1, 1, 1)

    m = ps.metric_set(2, 1, 1, 0)
    assert close(m["jaccard"], 0.5) and close(m["dsc"], 2 / 3) and close(m["accuracy"], 0.5)
    m = ps.metric_set(1, 1, 0, 14)
    assert close(m["recall"], 1.0) and close(m["accuracy"], 0.9375) and close(m["f2"], 5 / 6)

    agg = ps.aggregate([ps.metric_set(1, 0, 0, 3), ps.metric_set(0, 1, 1, 2)])
    assert close(agg["dsc"], 0.5)

    assert ps.leaky_relu([-2.0, 3.0], 0.1) == [-0.2, 3.0]
    assert close(ps.bce_loss([0.0, 0.0], [1.0, 0.0]), math.log(2))
    assert close(ps.dice_loss([0.0, 0.0], [1.0, 0.0]), 1 - 2 / 3)

    row = {"jaccard": 0.766, "dsc": 0.841, "recall": 0.894, "precision": 0.844, "accuracy": 0.946, "f2": 0.857}
    table = ps.format_table([("Run5", row)])
    assert table.splitlines()[1] == "Run5,0.766,0.841,0.894,0.844,0.946,0.857", table

    assert ps.binarize_mask([[0, 200], [128, 127]]) == [[0, 1], [1, 0]]
    assert ps.mask_bbox([[0, 0, 0], [0, 1, 0], [0, 0, 0]], 0.0) == (1, 1, 1, 1)

    model = ps.Model("pranet-lite", base_width=4, depth=2, seed=1)
    assert model.param_count() > 0
    logits, shape = model.forward([0.5] * (3 * 16 * 16), [1, 3, 16, 16])
    assert shape == [1, 1, 16, 16] and len(logits) == 256
    assert all(math.isfinite(v) for v in logits)

    try:
        ps.Model("bogus")
    except ValueError as e:
        assert "unet" in str(e)
    else:
        raise AssertionError("bogus architecture accepted")

    print("polyseg_py smoke test passed:", ", ".join(ps.ARCHITECTURES))


if __name__ == "__main__":
    main()
