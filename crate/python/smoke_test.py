"""Smoke test for the `cqlab` extension module.

Build first:
    cargo build --release -p cqlab-python --features extension-module
then run `python3 python/smoke_test.py` from the repository root. The script
copies target/{release,debug}/libcqlab_py.so to a temp dir as cqlab.so if the
module is not already importable.
"""

import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_cqlab():
    try:
        import cqlab  # noqa: F401
        return cqlab
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libcqlab_py.so", "libcqlab_py.dylib"):
            lib = os.path.join(ROOT, "target", profile, name)
            if os.path.exists(lib):
                tmp = tempfile.mkdtemp()
                shutil.copy(lib, os.path.join(tmp, "cqlab.so"))
                sys.path.insert(0, tmp)
                import cqlab
                return cqlab
    sys.exit("cqlab extension not found; build it with --features extension-module")


def main():
    cq = import_cqlab()

    assert abs(cq.hsv_squared_distance((0.0, 1.0, 1.0), (math.pi, 1.0, 1.0)) - 4.0) < 1e-12
    h, s, v = cq.rgb_to_hsv([0.0, 1.0, 0.0])
    assert abs(h - 2 * math.pi / 3) < 1e-12 and s == 1.0 and v == 1.0
    assert abs(cq.total_loss(1.0, 0.5, 0.5, 0.5) - (1.0 + 0.5 + 0.15 + 0.5)) < 1e-12

    hgt, wid = 8, 8
    img = [((i * 7) % 11) / 10.0 for i in range(hgt * wid * 3)]

    palette, index = cq.quantise_baseline(img, hgt, wid, "octree", 4)
    assert len(palette) <= 4 and len(index) == hgt * wid
    png = cq.encode_indexed_png(index, hgt, wid, palette)
    back, bh, bw, pal8, depth = cq.decode_indexed_png(png)
    assert (back, bh, bw) == (index, hgt, wid) and depth in (1, 2) and len(pal8) == len(palette)

    q = cq.CqFormer(colours=4, query_dim=8, widths=(4, 8, 8), seed=3)
    out, idx, pal = q.quantise(img, hgt, wid)
    assert len(set(tuple(out[i:i + 3]) for i in range(0, len(out), 3))) <= 4
    assert all(list(out[3 * i:3 * i + 3]) == list(pal[k]) for i, k in enumerate(idx))
    soft, probs, _ = q.quantise_train(img, hgt, wid, tau=0.5)
    assert len(probs) == hgt * wid * 4
    assert all(abs(sum(probs[i:i + 4]) - 1.0) < 1e-9 for i in range(0, len(probs), 4))

    try:
        cq.quantise_baseline(img, hgt, wid, "kmeans", 4)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown method should raise ValueError")

    config = "colours = 2\nepochs = 1\nbatch_size = 8\nquery_dim = 8\nencoder_widths = [4, 8, 8]\nclassifier_widths = [8, 8]\naugment = false\n"
    csv, trained = cq.train_synthetic(config, images=24, side=16, holdout=8)
    lines = csv.strip().splitlines()
    assert lines[0] == "epoch,L_M,R_Colour,R_Diversity,L_Perceptual,L_total,top1" and len(lines) == 2
    assert trained.colours == 2 and trained.num_parameters > 0
    print(repr(q), repr(trained))
    print("smoke test ok")


if __name__ == "__main__":
    main()
