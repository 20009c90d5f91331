//! FID with bootstrap confidence intervals, and motion adherence of
//! generated videos to commanded box tracks.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::Kind;

use crate::content_vae::ContentVae;
use crate::error::{Error, Result};
use crate::generator::{GenerateMode, Pipeline};
use crate::preprocess::{frames_to_tensor, PreparedEpisode};
use crate::rng::{derive_seed, SeededRng};
use crate::synth::{oracle_detect_with, DetectOptions};
use crate::tracks::{BBox, BoxTrackSet};
use crate::video::VideoTensor;

/// Maps frames to fixed-length feature vectors.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// One row per frame.
    fn extract(&self, frames: &[ArrayView3<'_, f32>]) -> Result<Array2<f64>>;

    fn extract_videos(&self, videos: &[VideoTensor]) -> Result<Array2<f64>> {
        let frames: Vec<ArrayView3<'_, f32>> = videos
            .iter()
            .flat_map(|v| (0..v.shape().n).map(move |t| v.frame(t)))
            .collect();
        let mut rows = Vec::new();
        for chunk in frames.chunks(256) {
            rows.push(self.extract(chunk)?);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
    }
}

fn tensor_rows(t: &tch::Tensor) -> Result<Array2<f64>> {
    let s = t.size();
    let flat = Vec::<f64>::try_from(&t.to_kind(Kind::Double).contiguous().view([-1]))?;
    Array2::from_shape_vec((s[0] as usize, s[1] as usize), flat).map_err(|e| Error::Dimension(e.to_string()))
}

/// Posterior means of a trained content encoder.
pub struct AeFeatures<'a> {
    pub model: &'a ContentVae,
}

impl FeatureExtractor for AeFeatures<'_> {
    fn name(&self) -> &str {
        "trained_ae_features"
    }

    fn dim(&self) -> usize {
        self.model.config().latent_dim as usize
    }

    fn extract(&self, frames: &[ArrayView3<'_, f32>]) -> Result<Array2<f64>> {
        let batch = frames_to_tensor(frames)?;
        let (mean, _) = tch::no_grad(|| self.model.encode_batch(&batch));
        tensor_rows(&mean)
    }
}

/// A TorchScript module mapping `(b, 3, h, w)` frames in [0,1] to `(b, d)` features,
/// for example an exported pretrained classifier trunk.
pub struct TorchScriptFeatures {
    module: tch::CModule,
    dim: usize,
    name: String,
}

impl TorchScriptFeatures {
    pub fn load(path: &std::path::Path, h: usize, w: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                path: path.to_path_buf(),
                hint: "export a feature network with torch.jit.save".into(),
            });
        }
        let module = tch::CModule::load(path)?;
        let probe = tch::Tensor::zeros([1, 3, h as i64, w as i64], (Kind::Float, tch::Device::Cpu));
        let out = tch::no_grad(|| module.forward_ts(&[probe]))?;
        if out.dim() != 2 {
            return Err(Error::Capability(format!(
                "feature network returned shape {:?}, expected (b, d)",
                out.size()
            )));
        }
        Ok(Self {
            module,
            dim: out.size()[1] as usize,
            name: format!("pretrained_classifier_features:{}", path.display()),
        })
    }
}

impl FeatureExtractor for TorchScriptFeatures {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, frames: &[ArrayView3<'_, f32>]) -> Result<Array2<f64>> {
        let batch = frames_to_tensor(frames)?;
        let out = tch::no_grad(|| self.module.forward_ts(&[batch]))?;
        tensor_rows(&out)
    }
}

/// Channel means over a `grid x grid` partition of the frame. Needs no weights.
pub struct PooledPixelFeatures {
    pub grid: usize,
}

impl FeatureExtractor for PooledPixelFeatures {
    fn name(&self) -> &str {
        "pooled_pixels"
    }

    fn dim(&self) -> usize {
        3 * self.grid * self.grid
    }

    fn extract(&self, frames: &[ArrayView3<'_, f32>]) -> Result<Array2<f64>> {
        let g = self.grid;
        let mut out = Array2::zeros((frames.len(), self.dim()));
        for (i, f) in frames.iter().enumerate() {
            let (h, w, c) = f.dim();
            if c != 3 || h % g != 0 || w % g != 0 {
                return Err(Error::Dimension(format!(
                    "frame {:?} cannot be pooled on a {g}x{g} grid",
                    f.dim()
                )));
            }
            let (ch, cw) = (h / g, w / g);
            for ((y, x, k), v) in f.indexed_iter() {
                out[[i, (k * g + y / ch) * g + x / cw]] += *v as f64;
            }
        }
        out /= ((frames.first().map_or(1, |f| f.dim().0 * f.dim().1)) / (g * g)) as f64;
        Ok(out)
    }
}

/// Which extractor an evaluation protocol uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorSpec {
    TrainedAeFeatures,
    PretrainedClassifierFeatures { path: PathBuf },
    PooledPixels { grid: usize },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self::TrainedAeFeatures
    }
}

fn mean_and_cov(x: ArrayView2<'_, f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix by eigendecomposition.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

pub const FID_JITTER: f64 = 1e-6;

/// Frechet distance between Gaussians fitted to two feature sets (rows are samples).
pub fn fid(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Validation("fid needs non-empty feature sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "feature dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let d = a.ncols();
    for (name, x) in [("first", a.nrows()), ("second", b.nrows())] {
        if x < d + 1 {
            tracing::warn!(set = name, n = x, d, "fewer samples than d+1; covariance is rank deficient");
        }
    }
    let (mu_a, mut cov_a) = mean_and_cov(a);
    let (mu_b, mut cov_b) = mean_and_cov(b);
    for i in 0..d {
        cov_a[(i, i)] += FID_JITTER;
        cov_b[(i, i)] += FID_JITTER;
    }
    let sa = sqrtm_psd(&cov_a);
    let cross = sqrtm_psd(&(&sa * &cov_b * &sa));
    let diff = &mu_a - &mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub variance: f64,
    pub lo: f64,
    pub hi: f64,
    pub best: f64,
    pub worst: f64,
}

/// Percentile bootstrap of the mean. `best`/`worst` are the min/max score
/// (lower is better for FID). `variance` is the population variance.
pub fn bootstrap_ci(scores: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapSummary> {
    if scores.is_empty() {
        return Err(Error::Validation("bootstrap needs at least one score".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("level {level} must be in (0,1)")));
    }
    if resamples < 100 {
        return Err(Error::Validation(format!("resamples {resamples} must be at least 100")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("scores must be finite".into()));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let variance = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    let mut rng = SeededRng::stream(seed, "bootstrap");
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| scores[rng.rng().gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    // The interval is widened to contain the sample mean when the bootstrap
    // distribution is very skewed.
    let lo = pick(alpha).min(mean);
    let hi = pick(1.0 - alpha).max(mean);
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let worst = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(BootstrapSummary {
        mean,
        variance,
        lo,
        hi,
        best,
        worst,
    })
}

/// Maximum total IoU assignment of detections to commanded boxes.
/// Returns one IoU per commanded box (0 when unmatched).
pub fn match_boxes(commanded: &[BBox], detected: &[BBox]) -> Vec<f64> {
    let k = commanded.len();
    if k == 0 {
        return Vec::new();
    }
    if k > 16 {
        return greedy_match(commanded, detected);
    }
    let full = 1usize << k;
    // dp[mask] = best total IoU with commanded set `mask` already matched,
    // choice[j][mask] records which commanded box detection j took.
    let mut dp = vec![f64::NEG_INFINITY; full];
    dp[0] = 0.0;
    let mut choices: Vec<Vec<Option<usize>>> = Vec::with_capacity(detected.len());
    for d in detected {
        let mut next = dp.clone();
        let mut choice = vec![None; full];
        for mask in 0..full {
            if dp[mask] == f64::NEG_INFINITY {
                continue;
            }
            for (i, c) in commanded.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    continue;
                }
                let iou = c.iou(d);
                if iou <= 0.0 {
                    continue;
                }
                let m2 = mask | (1 << i);
                if dp[mask] + iou > next[m2] {
                    next[m2] = dp[mask] + iou;
                    choice[m2] = Some(i);
                }
            }
        }
        dp = next;
        choices.push(choice);
    }
    let mut mask = (0..full)
        .max_by(|a, b| dp[*a].total_cmp(&dp[*b]))
        .unwrap_or(0);
    let mut out = vec![0.0; k];
    for (j, choice) in choices.iter().enumerate().rev() {
        if let Some(i) = choice[mask] {
            out[i] = commanded[i].iou(&detected[j]);
            mask &= !(1 << i);
        }
    }
    out
}

fn greedy_match(commanded: &[BBox], detected: &[BBox]) -> Vec<f64> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, c) in commanded.iter().enumerate() {
        for (j, d) in detected.iter().enumerate() {
            let iou = c.iou(d);
            if iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![0.0; commanded.len()];
    let mut used_c = vec![false; commanded.len()];
    let mut used_d = vec![false; detected.len()];
    for (iou, i, j) in pairs {
        if !used_c[i] && !used_d[j] {
            used_c[i] = true;
            used_d[j] = true;
            out[i] = iou;
        }
    }
    out
}

/// Mean IoU between commanded boxes and oracle detections in `generated`,
/// over every commanded (object, frame) pair. Unmatched commanded boxes
/// count as 0. With no commanded boxes the score is 1 if nothing is
/// detected and 0 otherwise.
pub fn motion_adherence(
    generated: &VideoTensor,
    commanded: &BoxTrackSet,
    background: ArrayView3<'_, f32>,
    opts: DetectOptions,
) -> Result<f64> {
    let s = generated.shape();
    if commanded.num_frames != s.n {
        return Err(Error::Validation(format!(
            "tracks num_frames {} does not match video n {}",
            commanded.num_frames, s.n
        )));
    }
    if background.dim() != (s.h, s.w, s.c) {
        return Err(Error::Dimension(format!(
            "background {:?} does not match video frames",
            background.dim()
        )));
    }
    let detected = oracle_detect_with(generated, background, opts);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut any_detection = false;
    for t in 0..s.n {
        let c: Vec<BBox> = commanded.frame_boxes(t).into_iter().map(|(_, b)| b).collect();
        let d: Vec<BBox> = detected.frame_boxes(t).into_iter().map(|(_, b)| b).collect();
        any_detection |= !d.is_empty();
        total += match_boxes(&c, &d).iter().sum::<f64>();
        count += c.len();
    }
    if count == 0 {
        return Ok(if any_detection { 0.0 } else { 1.0 });
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub num_sets: usize,
    pub videos_per_set: usize,
    pub mode: GenerateMode,
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub extractor: ExtractorSpec,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            num_sets: 5,
            videos_per_set: 50,
            mode: GenerateMode::Unconditional,
            resamples: 1000,
            level: 0.95,
            seed: 0,
            extractor: ExtractorSpec::TrainedAeFeatures,
        }
    }
}

impl EvalProtocol {
    /// The large protocol of 15 sets of 300 videos. Slow on a CPU.
    pub fn full_scale() -> Self {
        Self {
            num_sets: 15,
            videos_per_set: 300,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sets == 0 || self.videos_per_set == 0 {
            return Err(Error::Validation("num_sets and videos_per_set must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Validation("level must be in (0,1)".into()));
        }
        if self.resamples < 100 {
            return Err(Error::Validation("resamples must be at least 100".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub best: f64,
    pub worst: f64,
    pub ci: [f64; 2],
    pub protocol: EvalProtocol,
    pub extractor: String,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<f64>, protocol: EvalProtocol, extractor: &str) -> Result<Self> {
        let s = bootstrap_ci(&scores, protocol.resamples, protocol.level, protocol.seed)?;
        Ok(Self {
            scores,
            mean: s.mean,
            variance: s.variance,
            best: s.best,
            worst: s.worst,
            ci: [s.lo, s.hi],
            protocol,
            extractor: extractor.to_string(),
        })
    }
}

/// Generate `num_sets` sets of videos and score each against the reference
/// episodes by frame-level FID.
///
/// Controlled mode cycles through the reference episodes for content frames
/// and tracks.
pub fn evaluate_model(
    pipeline: &Pipeline,
    reference: &[PreparedEpisode],
    protocol: &EvalProtocol,
    extractor: &dyn FeatureExtractor,
) -> Result<EvalReport> {
    protocol.validate()?;
    if reference.is_empty() {
        return Err(Error::Validation("evaluation needs reference episodes".into()));
    }
    let ref_videos: Vec<VideoTensor> = reference.iter().map(|e| e.video.clone()).collect();
    let ref_features = extractor.extract_videos(&ref_videos)?;
    let mut scores = Vec::with_capacity(protocol.num_sets);
    for set in 0..protocol.num_sets {
        let mut videos = Vec::with_capacity(protocol.videos_per_set);
        for i in 0..protocol.videos_per_set {
            let seed = derive_seed(protocol.seed, &format!("set{set}/video{i}"));
            let v = match protocol.mode {
                GenerateMode::Unconditional => pipeline.generate_unconditional(seed)?,
                GenerateMode::Controlled => {
                    let ep = &reference[(set * protocol.videos_per_set + i) % reference.len()];
                    pipeline.generate_controlled(ep.video.frame(0), &ep.tracks, seed)?
                }
            };
            videos.push(v);
        }
        let features = extractor.extract_videos(&videos)?;
        let score = fid(features.view(), ref_features.view())?;
        tracing::info!(set, fid = score, "evaluated set");
        scores.push(score);
    }
    EvalReport::from_scores(scores, protocol.clone(), extractor.name())
}
