use pyo3::prelude::*;

use normup_py::normup_module;

fn run(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(normup_module);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn module_round_trip() {
    run(c"
import normup as nu
s = nu.synth_cloud('sphere', 256, 1)
assert len(s) == 256
assert nu.cd_metric(s.positions, s.positions) == 0.0
idx, _ = nu.knn(s.positions, s.positions, 3, exclude_self=True)
assert all(i not in row for i, row in enumerate(idx))
net = nu.Network.init(7, patch_size=64)
thin = nu.nonuniform_downsample(s, 64, 3)
up = net.upsample(thin)
assert len(up) == 256
assert nu.PointCloud.parse(up.to_xyzn()) is not None
try:
    nu.PointCloud([(0.0, 0.0, 0.0)], [(2.0, 0.0, 0.0)])
    raise SystemExit('non-unit normal accepted')
except ValueError:
    pass
");
}
