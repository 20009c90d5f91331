//! Motion reference videos, masking and refined foreground masks.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::checkpoint::{Checkpoint, ModelType};
use crate::error::{Error, Result};
use crate::layers::{ConvDecoder, ConvEncoder, ConvSpec};
use crate::rng::init_var_store;
use crate::tracks::{load_tracks, BoxTrackSet};
use crate::train::{finite_scalar, BatchSampler, LossLog, TrainConfig};
use crate::video::{load_video, save_video, BinaryVideo, VideoShape, VideoTensor};

/// Default threshold on the background difference.
pub const DEFAULT_MASK_THRESHOLD: f32 = 0.1;
/// Default Gaussian widening kernel size.
pub const DEFAULT_MASK_KERNEL: usize = 10;

/// Binary video with ones inside any box of the frame.
pub fn rasterize_tracks(t: &BoxTrackSet, n: usize, h: usize, w: usize) -> Result<BinaryVideo> {
    if t.num_frames != n {
        return Err(Error::Validation(format!(
            "num_frames is {} but the video has {n} frames",
            t.num_frames
        )));
    }
    let mut data = Array4::<f32>::zeros((n, h, w, 1));
    for obj in &t.objects {
        if obj.boxes.len() != n {
            return Err(Error::Validation(format!(
                "object {} has {} boxes for {n} frames",
                obj.id,
                obj.boxes.len()
            )));
        }
        for (frame, b) in obj.boxes.iter().enumerate() {
            let Some(b) = b else { continue };
            b.check(w, h)
                .map_err(|m| Error::Validation(format!("object {} frame {frame}: {m}", obj.id)))?;
            data.slice_mut(ndarray::s![
                frame,
                b.y0 as usize..b.y1 as usize,
                b.x0 as usize..b.x1 as usize,
                ..
            ])
            .fill(1.0);
        }
    }
    BinaryVideo::from_array(data)
}

/// Elementwise product of a video with a binary mask broadcast over channels.
pub fn apply_motion_mask(v: &VideoTensor, m: &BinaryVideo) -> Result<VideoTensor> {
    let (vs, ms) = (v.shape(), m.shape());
    if (vs.n, vs.h, vs.w) != (ms.n, ms.h, ms.w) {
        return Err(Error::Dimension(format!(
            "video is {}x{}x{}, mask is {}x{}x{}",
            vs.n, vs.h, vs.w, ms.n, ms.h, ms.w
        )));
    }
    let mask = m.video().data();
    let out = v.data() * &mask.broadcast((vs.n, vs.h, vs.w, vs.c)).expect("same n,h,w");
    VideoTensor::new(out)
}

/// 1-D Gaussian taps of length `k`, sigma chosen from the size as OpenCV does.
pub fn gaussian_taps(k: usize) -> Vec<f64> {
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let centre = (k as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with zero padding; tap `i` reads offset `i - k/2`.
pub fn gaussian_blur(m: &Array2<f64>, k: usize) -> Array2<f64> {
    let taps = gaussian_taps(k);
    let anchor = (k / 2) as i64;
    let (h, w) = m.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for (i, tap) in taps.iter().enumerate() {
                let off = i as i64 - anchor;
                let (yy, xx) = if horizontal {
                    (y as i64, x as i64 + off)
                } else {
                    (y as i64 + off, x as i64)
                };
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += tap * src[[yy as usize, xx as usize]];
                }
            }
            acc
        })
    };
    pass(&pass(m, true), false)
}

/// Foreground mask of frame `f` against background `bg`, widened by a
/// `k x k` Gaussian: thresholded difference, blurred, then every strictly
/// positive response set to 1.
pub fn extract_foreground_mask(
    f: ArrayView3<'_, f32>,
    bg: ArrayView3<'_, f32>,
    threshold: f32,
    k: usize,
) -> Result<Array2<f32>> {
    if f.dim() != bg.dim() {
        return Err(Error::Dimension(format!(
            "frame {:?} and background {:?} differ",
            f.dim(),
            bg.dim()
        )));
    }
    if k == 0 {
        return Err(Error::Validation("kernel size must be at least 1".into()));
    }
    let (h, w, c) = f.dim();
    let raw = Array2::from_shape_fn((h, w), |(y, x)| {
        let diff = (0..c)
            .map(|ch| (f[[y, x, ch]] - bg[[y, x, ch]]).abs())
            .fold(0.0f32, f32::max);
        if diff > threshold {
            1.0
        } else {
            0.0
        }
    });
    let blurred = gaussian_blur(&raw, k);
    Ok(blurred.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundAeConfig {
    pub h: usize,
    pub w: usize,
    /// Width of the bottleneck; narrow enough that small moving objects are dropped.
    pub bottleneck: i64,
    pub conv: ConvSpec,
}

impl Default for BackgroundAeConfig {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            bottleneck: 16,
            conv: ConvSpec::new(&[16, 32, 32]),
        }
    }
}

/// Plain (non-variational) autoencoder trained with L1 on single frames.
#[derive(Debug)]
pub struct BackgroundAe {
    vs: nn::VarStore,
    encoder: ConvEncoder,
    decoder: ConvDecoder,
    config: BackgroundAeConfig,
    step: usize,
}

impl BackgroundAe {
    pub fn new(config: BackgroundAeConfig, seed: u64) -> Result<Self> {
        config.conv.validate(&[config.h, config.w])?;
        let vs = nn::VarStore::new(Device::Cpu);
        let extents = [config.h, config.w];
        let encoder = ConvEncoder::new(&(vs.root() / "enc"), 3, &extents, &config.conv, config.bottleneck, false);
        let decoder = ConvDecoder::new(&(vs.root() / "dec"), config.bottleneck, 3, &extents, &config.conv);
        init_var_store(&vs, seed);
        Ok(Self {
            vs,
            encoder,
            decoder,
            config,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_type(ModelType::BackgroundAe)?;
        let mut model = Self::new(ckpt.config()?, 0)?;
        ckpt.load_into(&mut model.vs, ModelType::BackgroundAe)?;
        model.step = ckpt.meta.step;
        Ok(model)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_var_store(&self.vs, ModelType::BackgroundAe, &self.config, self.step)
    }

    pub fn config(&self) -> &BackgroundAeConfig {
        &self.config
    }

    /// Frames `(b, 3, h, w)` to reconstructions of the same shape.
    pub fn forward(&self, frames: &Tensor) -> Tensor {
        self.decoder.logits(&self.encoder.features(frames)).sigmoid()
    }

    /// Estimated background of one `(h, w, 3)` frame.
    pub fn background_of(&self, frame: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
        let batch = frames_to_tensor(&[frame])?;
        self.check_input(&batch)?;
        let out = tch::no_grad(|| self.forward(&batch));
        Ok(tensor_to_frames(&out)?.remove(0))
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = batch.size();
        if s[1] != 3 || s[2] != self.config.h as i64 || s[3] != self.config.w as i64 {
            return Err(Error::Dimension(format!(
                "background model expects 3x{}x{} frames, got {:?}",
                self.config.h, self.config.w, &s[1..]
            )));
        }
        Ok(())
    }
}

/// `(h, w, 3)` frames to a `(b, 3, h, w)` float tensor.
pub fn frames_to_tensor(frames: &[ArrayView3<'_, f32>]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::Dimension("no frames".into()))?;
    let (h, w, c) = first.dim();
    let mut flat = Vec::with_capacity(frames.len() * h * w * c);
    for f in frames {
        if f.dim() != (h, w, c) {
            return Err(Error::Dimension("frames have mixed dimensions".into()));
        }
        flat.extend(f.iter().copied());
    }
    Ok(Tensor::from_slice(&flat)
        .view([frames.len() as i64, h as i64, w as i64, c as i64])
        .permute([0, 3, 1, 2])
        .contiguous())
}

/// Inverse of [`frames_to_tensor`].
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let s = t.size();
    let (b, c, h, w) = (s[0] as usize, s[1] as usize, s[2] as usize, s[3] as usize);
    let flat = Vec::<f32>::try_from(&t.permute([0, 2, 3, 1]).contiguous().to_kind(Kind::Float).view([-1]))?;
    let all = Array4::from_shape_vec((b, h, w, c), flat).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(all.axis_iter(Axis(0)).map(|f| f.to_owned()).collect())
}

/// Train the background autoencoder on a set of frames with the L1 objective.
pub fn train_background_ae(
    frames: &[ArrayView3<'_, f32>],
    config: BackgroundAeConfig,
    train: &TrainConfig,
) -> Result<(BackgroundAe, LossLog)> {
    train.validate()?;
    if frames.is_empty() {
        return Err(Error::Validation("background training needs at least one frame".into()));
    }
    let mut model = BackgroundAe::new(config, train.seed)?;
    let data = frames_to_tensor(frames)?;
    model.check_input(&data)?;
    let mut opt = nn::Adam::default().build(&model.vs, train.learning_rate)?;
    let mut sampler = BatchSampler::new(frames.len(), train.batch_size, train.seed);
    let mut log = LossLog::new(&["l1"]);
    for step in 0..train.steps {
        let idx = Tensor::from_slice(
            &sampler.next_batch().iter().map(|&i| i as i64).collect::<Vec<_>>(),
        );
        let batch = data.index_select(0, &idx);
        let loss = (model.forward(&batch) - &batch).abs().mean(Kind::Float);
        opt.backward_step(&loss);
        let v = finite_scalar(&loss, step, "background L1")?;
        if train.should_log(step) {
            log.push(step, vec![v]);
        }
        model.step += 1;
    }
    Ok((model, log))
}

/// Mean absolute reconstruction error of the model on `frames`.
pub fn background_l1(model: &BackgroundAe, frames: &[ArrayView3<'_, f32>]) -> Result<f64> {
    let data = frames_to_tensor(frames)?;
    model.check_input(&data)?;
    Ok(tch::no_grad(|| (model.forward(&data) - &data).abs().mean(Kind::Float)).double_value(&[]))
}

/// Where the clean background of each frame comes from.
pub enum BackgroundSource<'a> {
    Model(&'a BackgroundAe),
    /// A known static background, as in the synthetic world.
    Known(ArrayView3<'a, f32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub threshold: f32,
    pub kernel: usize,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_MASK_THRESHOLD,
            kernel: DEFAULT_MASK_KERNEL,
        }
    }
}

/// Refined foreground masks for every frame of a video.
pub fn refine_masks(v: &VideoTensor, background: &BackgroundSource<'_>, opts: MaskOptions) -> Result<BinaryVideo> {
    let s = v.shape();
    let mut data = Array4::<f32>::zeros((s.n, s.h, s.w, 1));
    for t in 0..s.n {
        let frame = v.frame(t);
        let mask = match background {
            BackgroundSource::Model(m) => {
                let bg = m.background_of(frame)?;
                extract_foreground_mask(frame, bg.view(), opts.threshold, opts.kernel)?
            }
            BackgroundSource::Known(bg) => extract_foreground_mask(frame, *bg, opts.threshold, opts.kernel)?,
        };
        data.index_axis_mut(Axis(0), t)
            .index_axis_mut(Axis(2), 0)
            .assign(&mask);
    }
    BinaryVideo::from_array(data)
}

#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub video: VideoTensor,
    pub motion: BinaryVideo,
    pub masks: BinaryVideo,
    pub tracks: BoxTrackSet,
}

impl PreparedEpisode {
    /// Build in memory from a video and its tracks.
    pub fn build(
        video: VideoTensor,
        tracks: BoxTrackSet,
        background: &BackgroundSource<'_>,
        opts: MaskOptions,
    ) -> Result<Self> {
        let s = video.shape();
        let motion = rasterize_tracks(&tracks, s.n, s.h, s.w)?;
        let masks = refine_masks(&video, background, opts)?;
        Ok(Self {
            video,
            motion,
            masks,
            tracks,
        })
    }

    pub fn shape(&self) -> VideoShape {
        self.video.shape()
    }
}

/// Write `motion/` and `masks/` next to an episode's `frames/`.
pub fn prepare_episode(dir: &Path, background: &BackgroundSource<'_>, opts: MaskOptions) -> Result<PreparedEpisode> {
    let tracks_path = dir.join("tracks.json");
    if !tracks_path.exists() {
        return Err(Error::Missing {
            path: tracks_path,
            hint: "run a tracker on the footage or ingest a tracks.json before preprocessing".into(),
        });
    }
    let tracks = load_tracks(&tracks_path)?;
    let video = load_video(&dir.join("frames"))?;
    let ep = PreparedEpisode::build(video, tracks, background, opts)?;
    save_video(ep.motion.video(), &dir.join("motion"))?;
    save_video(ep.masks.video(), &dir.join("masks"))?;
    Ok(ep)
}

/// Load an already prepared episode.
pub fn load_prepared(dir: &Path) -> Result<PreparedEpisode> {
    let tracks_path = dir.join("tracks.json");
    if !tracks_path.exists() {
        return Err(Error::Missing {
            path: tracks_path,
            hint: "episode has no tracks.json".into(),
        });
    }
    for sub in ["frames", "motion", "masks"] {
        if !dir.join(sub).is_dir() {
            return Err(Error::Missing {
                path: dir.join(sub),
                hint: "run `trackgen preprocess` on the dataset first".into(),
            });
        }
    }
    Ok(PreparedEpisode {
        video: load_video(&dir.join("frames"))?,
        motion: BinaryVideo::new(load_video(&dir.join("motion"))?)?,
        masks: BinaryVideo::new(load_video(&dir.join("masks"))?)?,
        tracks: load_tracks(&tracks_path)?,
    })
}

/// Episode directories of a dataset: from `index.json` when present, else
/// every subdirectory holding a `tracks.json`, sorted by name.
pub fn episode_dirs(data: &Path) -> Result<Vec<std::path::PathBuf>> {
    if data.join("index.json").exists() {
        let index = crate::synth::load_index(data)?;
        return Ok(index.episodes.iter().map(|e| data.join(e)).collect());
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(data).map_err(|e| Error::io(data, e))? {
        let path = entry.map_err(|e| Error::io(data, e))?.path();
        if path.join("tracks.json").exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(data: &Path) -> Result<Vec<PreparedEpisode>> {
    episode_dirs(data)?.iter().map(|d| load_prepared(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracks::{BBox, TrackedObject};

    fn track(id: i64, boxes: Vec<Option<BBox>>) -> TrackedObject {
        TrackedObject { id, boxes }
    }

    #[test]
    fn empty_tracks_rasterize_to_zeros() {
        let t = BoxTrackSet::empty(3, 8, 8);
        assert_eq!(rasterize_tracks(&t, 3, 8, 8).unwrap().count_ones(), 0);
    }

    #[test]
    fn static_box_covers_rows_and_cols_zero_one() {
        let b = Some(BBox::new(0, 0, 2, 2));
        let t = BoxTrackSet::new(2, 4, 4, vec![track(0, vec![b, b])]).unwrap();
        let m = rasterize_tracks(&t, 2, 4, 4).unwrap();
        for f in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(m.get(f, y, x), y < 2 && x < 2);
                }
            }
        }
        assert_eq!(m.count_ones(), 8);
    }

    #[test]
    fn overlapping_boxes_union() {
        let t = BoxTrackSet::new(
            1,
            8,
            8,
            vec![
                track(0, vec![Some(BBox::new(0, 0, 4, 4))]),
                track(1, vec![Some(BBox::new(2, 2, 6, 6))]),
            ],
        )
        .unwrap();
        let m = rasterize_tracks(&t, 1, 8, 8).unwrap();
        assert_eq!(m.count_ones(), 16 + 16 - 4);
        assert_eq!(m.video().data().iter().fold(0.0f32, |a, b| a.max(*b)), 1.0);
    }

    #[test]
    fn absent_boxes_and_out_of_frame() {
        let t = BoxTrackSet::new(2, 8, 8, vec![track(0, vec![None, Some(BBox::new(0, 0, 1, 1))])]).unwrap();
        let m = rasterize_tracks(&t, 2, 8, 8).unwrap();
        assert!(!m.get(0, 0, 0));
        assert!(m.get(1, 0, 0));
        assert!(rasterize_tracks(&t, 2, 4, 4).is_ok());
        let wide = BoxTrackSet {
            num_frames: 1,
            width: 8,
            height: 8,
            objects: vec![track(0, vec![Some(BBox::new(4, 0, 12, 4))])],
        };
        assert!(matches!(rasterize_tracks(&wide, 1, 8, 8), Err(Error::Validation(_))));
        assert!(rasterize_tracks(&t, 3, 8, 8).is_err());
    }

    #[test]
    fn motion_mask_identity_zero_and_checkerboard() {
        let v = VideoTensor::filled(VideoShape::new(2, 4, 4, 3), 0.5).unwrap();
        let ones = BinaryVideo::from_fn(2, 4, 4, |_, _, _| true).unwrap();
        assert_eq!(apply_motion_mask(&v, &ones).unwrap(), v);
        let zeros = BinaryVideo::zeros(2, 4, 4).unwrap();
        assert!(apply_motion_mask(&v, &zeros).unwrap().data().iter().all(|x| *x == 0.0));
        let checker = BinaryVideo::from_fn(2, 4, 4, |_, y, x| (y + x) % 2 == 0).unwrap();
        let out = apply_motion_mask(&v, &checker).unwrap();
        for ((t, y, x, _), val) in out.data().indexed_iter() {
            let expect = if checker.get(t, y, x) { 0.5 } else { 0.0 };
            assert_eq!(*val, expect);
        }
        let small = BinaryVideo::zeros(2, 4, 2).unwrap();
        assert!(matches!(apply_motion_mask(&v, &small), Err(Error::Dimension(_))));
    }

    fn single_pixel_pair() -> (Array3<f32>, Array3<f32>) {
        let bg = Array3::<f32>::zeros((16, 16, 3));
        let mut f = bg.clone();
        f[[7, 9, 1]] = 1.0;
        (f, bg)
    }

    #[test]
    fn equal_frames_give_empty_mask() {
        let (_, bg) = single_pixel_pair();
        let m = extract_foreground_mask(bg.view(), bg.view(), 0.1, 10).unwrap();
        assert!(m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kernel_one_keeps_single_pixel() {
        let (f, bg) = single_pixel_pair();
        let m = extract_foreground_mask(f.view(), bg.view(), 0.1, 1).unwrap();
        assert_eq!(m.sum(), 1.0);
        assert_eq!(m[[7, 9]], 1.0);
    }

    #[test]
    fn kernel_ten_dilates_to_footprint() {
        let (f, bg) = single_pixel_pair();
        let m = extract_foreground_mask(f.view(), bg.view(), 0.1, 10).unwrap();
        // oracle: output (y,x) receives the pixel iff (7-y, 9-x) is a tap offset in [-5, 4]
        for ((y, x), v) in m.indexed_iter() {
            let (dy, dx) = (7 - y as i64, 9 - x as i64);
            let inside = (-5..=4).contains(&dy) && (-5..=4).contains(&dx);
            assert_eq!(*v == 1.0, inside, "({y},{x})");
        }
        assert_eq!(m.sum(), 100.0);
    }

    #[test]
    fn frame_shape_mismatch_rejected() {
        let a = Array3::<f32>::zeros((8, 8, 3));
        let b = Array3::<f32>::zeros((8, 9, 3));
        assert!(extract_foreground_mask(a.view(), b.view(), 0.1, 3).is_err());
    }

    #[test]
    fn zero_step_background_training_yields_checkpoint() {
        let frame = Array3::<f32>::from_elem((16, 16, 3), 0.3);
        let cfg = BackgroundAeConfig {
            h: 16,
            w: 16,
            bottleneck: 4,
            conv: ConvSpec::new(&[4, 8]),
        };
        let train = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (model, _) = train_background_ae(&[frame.view()], cfg, &train).unwrap();
        let ckpt = model.checkpoint().unwrap();
        assert_eq!(ckpt.meta.model_type, ModelType::BackgroundAe);
        let l1 = background_l1(&model, &[frame.view()]).unwrap();
        assert!(l1.is_finite());
        let back = BackgroundAe::from_checkpoint(&ckpt).unwrap();
        assert_eq!(background_l1(&back, &[frame.view()]).unwrap(), l1);
    }

    #[test]
    fn missing_tracks_names_the_fix() {
        let dir = tempfile::tempdir().unwrap();
        let bg = Array3::<f32>::zeros((8, 8, 3));
        let err = prepare_episode(dir.path(), &BackgroundSource::Known(bg.view()), MaskOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("tracks.json"));
    }
}
