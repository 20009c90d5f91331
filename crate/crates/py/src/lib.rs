//! Python bindings for the trackgen pipeline.
//!
//! Videos cross the boundary as little-endian `float32` bytes in
//! `(n, h, w, c)` order plus a shape tuple; tracks as `tracks.json` text.

use std::path::PathBuf;
use std::sync::Mutex;

use ndarray::{Array2, Array3, Array4};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use trackgen::eval;
use trackgen::generator::GenerateMode;
use trackgen::synth::{self, DetectOptions, WorldConfig};
use trackgen::tracks::BoxTrackSet;
use trackgen::video::{self as tv, VideoTensor};

pub fn to_py_err(e: trackgen::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(format!("{}: {e}", e.kind()))
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_from_bytes(data: &[u8], expected: usize) -> PyResult<Vec<f32>> {
    if data.len() != expected * 4 {
        return Err(PyValueError::new_err(format!(
            "expected {} bytes of float32, got {}",
            expected * 4,
            data.len()
        )));
    }
    Ok(data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// A video with values in [0, 1].
#[pyclass(module = "trackgen_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Video {
    pub inner: VideoTensor,
}

#[pymethods]
impl Video {
    #[staticmethod]
    fn from_bytes(data: &[u8], shape: (usize, usize, usize, usize)) -> PyResult<Self> {
        let (n, h, w, c) = shape;
        let values = f32_from_bytes(data, n * h * w * c)?;
        let arr = Array4::from_shape_vec((n, h, w, c), values).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: VideoTensor::new(arr).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tv::load_video(&dir).map_err(to_py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        tv::save_video(&self.inner, &dir).map(|_| ()).map_err(to_py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.h, s.w, s.c)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let data: Vec<f32> = self.inner.data().iter().copied().collect();
        PyBytes::new(py, &f32_bytes(&data))
    }

    /// Frame `t` as float32 bytes in `(h, w, c)` order.
    fn frame_bytes<'py>(&self, py: Python<'py>, t: usize) -> PyResult<Bound<'py, PyBytes>> {
        if t >= self.inner.shape().n {
            return Err(PyValueError::new_err(format!("frame {t} out of range")));
        }
        let data: Vec<f32> = self.inner.frame(t).iter().copied().collect();
        Ok(PyBytes::new(py, &f32_bytes(&data)))
    }

    fn max_abs_diff(&self, other: &Video) -> f32 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Video{:?}", self.shape())
    }
}

/// Box tracks for every object over a fixed number of frames.
#[pyclass(module = "trackgen_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Tracks {
    pub inner: BoxTrackSet,
}

#[pymethods]
impl Tracks {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: BoxTrackSet::from_json(text).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trackgen::tracks::load_tracks(&path).map_err(to_py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py_err)
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.num_frames
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn num_objects(&self) -> usize {
        self.inner.objects.len()
    }

    /// Binary motion video with one channel.
    fn rasterize(&self) -> PyResult<Video> {
        let t = &self.inner;
        let m = trackgen::preprocess::rasterize_tracks(t, t.num_frames, t.height, t.width).map_err(to_py_err)?;
        Ok(Video {
            inner: m.into_video(),
        })
    }
}

/// A synthetic episode: video, ground-truth tracks and clean background.
#[pyclass(module = "trackgen_py", get_all)]
pub struct Episode {
    pub video: Video,
    pub tracks: Tracks,
    pub background: Video,
}

fn world_from_kwargs(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<WorldConfig> {
    let mut v = serde_json::to_value(WorldConfig::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if let Some(kw) = kwargs {
        let obj = v.as_object_mut().expect("object");
        for (k, val) in kw.iter() {
            let key: String = k.extract()?;
            if !obj.contains_key(&key) {
                return Err(PyValueError::new_err(format!("unknown world option {key}")));
            }
            let json = if let Ok(b) = val.extract::<bool>() {
                serde_json::Value::from(b)
            } else if let Ok(i) = val.extract::<i64>() {
                serde_json::Value::from(i)
            } else {
                serde_json::Value::from(val.extract::<String>()?)
            };
            obj.insert(key, json);
        }
    }
    serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Render one synthetic episode. Keyword arguments override world options.
#[pyfunction]
#[pyo3(signature = (seed, **kwargs))]
fn synth_episode(seed: u64, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Episode> {
    let world = world_from_kwargs(kwargs)?;
    world.validate().map_err(to_py_err)?;
    let e = synth::generate_episode(&world, seed).map_err(to_py_err)?;
    let bg = e.background.clone().insert_axis(ndarray::Axis(0));
    Ok(Episode {
        video: Video { inner: e.video },
        tracks: Tracks { inner: e.tracks },
        background: Video {
            inner: VideoTensor::new(bg).map_err(to_py_err)?,
        },
    })
}

/// Write a synthetic dataset and return the episode names.
#[pyfunction]
#[pyo3(signature = (out_dir, count, **kwargs))]
fn generate_dataset(out_dir: PathBuf, count: usize, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<String>> {
    let world = world_from_kwargs(kwargs)?;
    Ok(synth::generate_dataset(&world, count, &out_dir).map_err(to_py_err)?.episodes)
}

fn single_frame(v: &Video) -> PyResult<Array3<f32>> {
    if v.inner.shape().n != 1 {
        return Err(PyValueError::new_err("expected a single-frame video"));
    }
    Ok(v.inner.frame(0).to_owned())
}

/// Mean IoU between commanded tracks and boxes detected against a background.
#[pyfunction]
#[pyo3(signature = (video, tracks, background, threshold=synth::DETECTION_THRESHOLD, min_area=1))]
fn motion_adherence(video: &Video, tracks: &Tracks, background: &Video, threshold: f32, min_area: i64) -> PyResult<f64> {
    let bg = single_frame(background)?;
    eval::motion_adherence(&video.inner, &tracks.inner, bg.view(), DetectOptions { threshold, min_area })
        .map_err(to_py_err)
}

fn rows_to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature rows must share one length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Frechet distance between two feature sets given as lists of rows.
#[pyfunction]
fn fid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = rows_to_array(a)?;
    let b = rows_to_array(b)?;
    eval::fid(a.view(), b.view()).map_err(to_py_err)
}

/// Bootstrap summary of per-set scores as a dict.
#[pyfunction]
#[pyo3(signature = (scores, resamples=1000, level=0.95, seed=0))]
fn bootstrap_ci<'py>(py: Python<'py>, scores: Vec<f64>, resamples: usize, level: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let s = eval::bootstrap_ci(&scores, resamples, level, seed).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("mean", s.mean)?;
    d.set_item("variance", s.variance)?;
    d.set_item("lo", s.lo)?;
    d.set_item("hi", s.hi)?;
    d.set_item("best", s.best)?;
    d.set_item("worst", s.worst)?;
    Ok(d)
}

/// Trained motion VAE, content VAE and generator loaded from a model directory.
#[pyclass(module = "trackgen_py")]
pub struct Pipeline {
    inner: Mutex<trackgen::generator::Pipeline>,
}

#[pymethods]
impl Pipeline {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Mutex::new(trackgen::generator::Pipeline::load(&dir).map_err(to_py_err)?),
        })
    }

    /// `(n, h, w)` of generated videos.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.lock().expect("pipeline lock").shape();
        (s.n, s.h, s.w)
    }

    /// Generate a video; `content` is a single-frame Video for controlled mode.
    #[pyo3(signature = (mode, seed=0, content=None, tracks=None))]
    fn generate(&self, mode: &str, seed: u64, content: Option<&Video>, tracks: Option<&Tracks>) -> PyResult<Video> {
        let mode: GenerateMode = mode.parse().map_err(to_py_err)?;
        let content = content.map(single_frame).transpose()?;
        let p = self.inner.lock().expect("pipeline lock");
        let v = p
            .generate(mode, content.as_ref().map(|c| c.view()), tracks.map(|t| &t.inner), seed)
            .map_err(to_py_err)?;
        Ok(Video { inner: v })
    }
}

#[pymodule]
pub fn trackgen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Video>()?;
    m.add_class::<Tracks>()?;
    m.add_class::<Episode>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(synth_episode, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(motion_adherence, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    Ok(())
}
