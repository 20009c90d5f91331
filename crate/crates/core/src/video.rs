//! Video tensors and the on-disk frame-directory format.
//!
//! Layout is always (frame, row, column, channel). A frame directory holds
//! `0000.png`, `0001.png`, ... plus a `manifest.json` with the shape.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, RgbImage};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl VideoShape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }
}

/// An n-frame video with every element finite and in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f32>,
}

impl VideoTensor {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (n, h, w, c) = data.dim();
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "video must have at least one frame and non-empty frames, got ({n},{h},{w},{c})"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::Dimension(format!("channels must be 1 or 3, got {c}")));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "video element {bad} is not a finite value in [0,1]"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: VideoShape) -> Result<Self> {
        Self::new(Array4::zeros(shape.dims()))
    }

    pub fn filled(shape: VideoShape, value: f32) -> Result<Self> {
        Self::new(Array4::from_elem(shape.dims(), value))
    }

    /// Stack single frames of shape (h, w, c) into a video.
    pub fn from_frames(frames: &[Array3<f32>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Dimension("no frames".into()))?;
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        if frames.iter().any(|f| f.dim() != first.dim()) {
            return Err(Error::Dimension("frames have mixed dimensions".into()));
        }
        let data = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(data)
    }

    pub fn shape(&self) -> VideoShape {
        let (n, h, w, c) = self.data.dim();
        VideoShape { n, h, w, c }
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), t)
    }

    /// Convert to a `(c, n, h, w)` tensor, the layout expected by 3D convolutions.
    pub fn to_tensor(&self, kind: Kind) -> Tensor {
        let s = self.shape();
        let flat: Vec<f32> = self.data.iter().copied().collect();
        Tensor::from_slice(&flat)
            .view([s.n as i64, s.h as i64, s.w as i64, s.c as i64])
            .permute([3, 0, 1, 2])
            .contiguous()
            .to_kind(kind)
    }

    /// Inverse of [`VideoTensor::to_tensor`]. The tensor must be `(c, n, h, w)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let size = t.size();
        if size.len() != 4 {
            return Err(Error::Dimension(format!(
                "expected a (c,n,h,w) tensor, got shape {size:?}"
            )));
        }
        let (c, n, h, w) = (
            size[0] as usize,
            size[1] as usize,
            size[2] as usize,
            size[3] as usize,
        );
        let nhwc = t
            .permute([1, 2, 3, 0])
            .contiguous()
            .to_kind(Kind::Float)
            .view([-1]);
        let flat = Vec::<f32>::try_from(&nhwc)?;
        let data = Array4::from_shape_vec((n, h, w, c), flat)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(data)
    }

    /// Quantize to 8 bits the way the PNG writer does.
    pub fn quantized(&self) -> VideoTensor {
        VideoTensor {
            data: self.data.mapv(|v| quantize(v) as f32 / 255.0),
        }
    }

    pub fn max_abs_diff(&self, other: &VideoTensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// A single-channel video whose elements are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVideo(VideoTensor);

impl BinaryVideo {
    pub fn new(v: VideoTensor) -> Result<Self> {
        if v.shape().c != 1 {
            return Err(Error::Dimension(format!(
                "binary video must have one channel, got {}",
                v.shape().c
            )));
        }
        if let Some(bad) = v.data.iter().find(|x| **x != 0.0 && **x != 1.0) {
            return Err(Error::Validation(format!(
                "binary video contains non-binary value {bad}"
            )));
        }
        Ok(Self(v))
    }

    pub fn from_array(data: Array4<f32>) -> Result<Self> {
        Self::new(VideoTensor::new(data)?)
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(VideoTensor::zeros(VideoShape::new(n, h, w, 1))?)
    }

    /// Build from a (n, h, w) boolean predicate.
    pub fn from_fn(n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let data = Array4::from_shape_fn((n, h, w, 1), |(t, y, x, _)| {
            if f(t, y, x) {
                1.0
            } else {
                0.0
            }
        });
        Self::from_array(data)
    }

    pub fn video(&self) -> &VideoTensor {
        &self.0
    }

    pub fn into_video(self) -> VideoTensor {
        self.0
    }

    pub fn shape(&self) -> VideoShape {
        self.0.shape()
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.0.data[[t, y, x, 0]] == 1.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.data.iter().filter(|v| **v == 1.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl From<VideoShape> for FrameManifest {
    fn from(s: VideoShape) -> Self {
        Self {
            n: s.n,
            h: s.h,
            w: s.w,
            c: s.c,
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// Encode a (h, w, c) frame as PNG bytes.
pub fn encode_png(frame: ArrayView3<'_, f32>) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    frame_to_image(frame)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
    Ok(out.into_inner())
}

/// Decode PNG bytes into a (h, w, c) frame with values in [0, 1].
pub fn decode_png(bytes: &[u8], channels: Option<usize>) -> Result<Array3<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(
        |source| Error::Image {
            path: "<memory>".into(),
            source,
        },
    )?;
    Ok(image_to_frame(img, channels))
}

fn frame_to_image(frame: ArrayView3<'_, f32>) -> image::DynamicImage {
    let (h, w, c) = frame.dim();
    if c == 1 {
        let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([quantize(frame[[y as usize, x as usize, 0]])])
        });
        image::DynamicImage::ImageLuma8(buf)
    } else {
        let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            image::Rgb([
                quantize(frame[[y, x, 0]]),
                quantize(frame[[y, x, 1]]),
                quantize(frame[[y, x, 2]]),
            ])
        });
        image::DynamicImage::ImageRgb8(buf)
    }
}

fn image_to_frame(img: image::DynamicImage, channels: Option<usize>) -> Array3<f32> {
    let gray = match channels {
        Some(c) => c == 1,
        None => matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16
        ),
    };
    if gray {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
            g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        })
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, ch)| {
            rgb.get_pixel(x as u32, y as u32)[ch] as f32 / 255.0
        })
    }
}

pub fn load_frame(path: &Path, channels: Option<usize>) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(image_to_frame(img, channels))
}

pub fn save_frame(frame: ArrayView3<'_, f32>, path: &Path) -> Result<()> {
    frame_to_image(frame)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Load a frame directory. Frames must be named `0000.png` upward with no gaps.
pub fn load_video(dir: &Path) -> Result<VideoTensor> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Format {
            index: 0,
            message: format!("no frames found in {}", dir.display()),
        });
    }
    for (i, name) in names.iter().enumerate() {
        if *name != frame_file_name(i) {
            return Err(Error::Format {
                index: i,
                message: format!("expected {}, found {name}", frame_file_name(i)),
            });
        }
    }

    let manifest_path = dir.join("manifest.json");
    let channels = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: FrameManifest = serde_json::from_str(&text)?;
        Some(m.c)
    } else {
        None
    };

    let mut frames = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let frame = load_frame(&dir.join(name), channels)?;
        if let Some(first) = frames.first() {
            let first: &Array3<f32> = first;
            if first.dim() != frame.dim() {
                return Err(Error::Dimension(format!(
                    "frame {i} has dimensions {:?}, frame 0 has {:?}",
                    frame.dim(),
                    first.dim()
                )));
            }
        }
        frames.push(frame);
    }
    VideoTensor::from_frames(&frames)
}

/// Write every frame as an 8-bit PNG and a `manifest.json` describing the shape.
pub fn save_video(v: &VideoTensor, dir: &Path) -> Result<FrameManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..v.shape().n {
        save_frame(v.frame(t), &dir.join(frame_file_name(t)))?;
    }
    let manifest = FrameManifest::from(v.shape());
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
