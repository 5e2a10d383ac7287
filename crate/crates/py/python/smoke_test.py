"""Quick end-to-end check of the Python bindings.

Uses an installed `normup` module if there is one, otherwise loads the
library built by `cargo build --release -p normup-py --features extension-module`.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile


def load():
    try:
        import normup

        return normup
    except ImportError:
        pass
    root = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", ".."))
    for profile in ("release", "debug"):
        path = os.path.join(root, "target", profile, "libnormup_py.so")
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("normup", path)
            spec = importlib.util.spec_from_file_location("normup", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("normup extension not found; build it first")


def main():
    nu = load()

    sphere = nu.synth_cloud("sphere", 512, 1)
    assert len(sphere) == 512
    for p, n in zip(sphere.positions, sphere.normals):
        assert abs(math.sqrt(sum(v * v for v in p)) - 1.0) < 1e-9
        assert p == n

    pts = sphere.positions
    idx, d2 = nu.knn(pts, pts[:3], 4, exclude_self=False)
    assert [row[0] for row in idx] == [0, 1, 2] and all(r[0] == 0.0 for r in d2)

    assert nu.chamfer(pts, pts) == 0.0
    assert nu.cd_metric(pts, pts) == 0.0 and nu.hd_metric(pts, pts) == 0.0
    small = pts[:5]
    assert nu.emd(small, list(reversed(small))) == 0.0
    other = pts[100:108]
    double = lambda c: [(x * 2, y * 2, z * 2) for x, y, z in c]
    assert abs(nu.chamfer(double(small), double(other)) - 4 * nu.chamfer(small, other)) < 1e-9

    sel = nu.farthest_point_sample(pts, 10)
    assert len(set(sel)) == 10 and sel[0] == 0

    thin = nu.nonuniform_downsample(sphere, 128, 2)
    net = nu.Network.init(3)
    up = net.upsample(thin)
    assert len(up) == 4 * len(thin)
    for n in up.normals:
        assert abs(math.sqrt(sum(v * v for v in n)) - 1.0) <= 1e-3
    report = nu.evaluate(up, sphere)
    assert set(report) == {"cd", "hd", "normal_angle_deg"}

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "net.json")
        net.save(path)
        again = nu.Network.load(path)
        assert again.upsample(thin) == up
        cloud_path = os.path.join(d, "up.xyzn")
        up.write(cloud_path)
        assert len(nu.PointCloud.read(cloud_path)) == len(up)

    patch = nu.synth_cloud("torus", 64, 4)
    cfg = "epochs = 3\nbatch_size = 1\ninput_size = 16\nk = 4\nscales = 0.2:4,0.4:8\n"
    trained, history = nu.train([patch], cfg, seed=5)
    assert len(history) == 3 and all(math.isfinite(h["total"]) for h in history)
    assert len(trained.upsample(patch)) == 256

    terms = nu.total_loss(up, sphere)
    assert set(terms) == {"total", "cd", "point_knn", "normal", "normal_orth", "normal_knn"}

    try:
        nu.synth_cloud("blob", 10, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown shape accepted")

    print("python smoke test passed:", net, report)


if __name__ == "__main__":
    main()
