use std::ffi::CString;
use std::sync::Once;

use pyo3::prelude::*;
use pyo3::types::PyDict;

static INIT: Once = Once::new();

fn run(code: &str, dir: &std::path::Path) {
    INIT.call_once(|| {
        pyo3::append_to_inittab!(trackgen_py);
        Python::initialize();
    });
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("tmp", dir.to_str().unwrap()).unwrap();
        let src = CString::new(code).unwrap();
        if let Err(e) = py.run(&src, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

use trackgen_py::trackgen_py;

#[test]
fn module_round_trips_videos_tracks_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    run(
        r#"
import struct, os
import trackgen_py as tg

ep = tg.synth_episode(3, num_objects=1, sprite_size=8)
assert ep.video.shape == (16, 64, 64, 3), ep.video.shape
assert ep.background.shape == (1, 64, 64, 3)
assert ep.tracks.num_objects == 1

raw = ep.video.to_bytes()
back = tg.Video.from_bytes(raw, ep.video.shape)
assert back.max_abs_diff(ep.video) == 0.0

t2 = tg.Tracks.from_json(ep.tracks.to_json())
assert t2.to_json() == ep.tracks.to_json()
m = t2.rasterize()
assert m.shape == (16, 64, 64, 1)

score = tg.motion_adherence(ep.video, ep.tracks, ep.background)
assert abs(score - 1.0) < 1e-12, score

d = tg.fid([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
assert abs(d) < 1e-6, d
s = tg.bootstrap_ci([1.0, 2.0, 3.0, 4.0], 200, 0.9, 1)
assert s["lo"] <= s["mean"] <= s["hi"]

try:
    tg.synth_episode(0, bogus=1)
    raise AssertionError("unknown option accepted")
except ValueError:
    pass
try:
    tg.Video.from_bytes(b"\x00" * 8, (1, 1, 1, 3))
    raise AssertionError("short buffer accepted")
except ValueError:
    pass

names = tg.generate_dataset(os.path.join(tmp, "data"), 2, seed=5)
assert names == ["ep_0000", "ep_0001"], names
v = tg.Video.load(os.path.join(tmp, "data", "ep_0000", "frames"))
assert v.shape == (16, 64, 64, 3)
"#,
        dir.path(),
    );
}
