//! Motion autoencoder over binary box videos and its weighted loss.
//!
//! Foreground and background pixels are reweighted so that both classes carry
//! equal total weight, and pixels that flip between consecutive frames get an
//! extra boost. Without the first the network collapses to an all-background
//! reconstruction; without the second it learns static boxes.
//!
//! With `N = N_fg(M) + N_fg(M_hat)` and `|M|` pixels:
//!
//! ```text
//! W_bg = (N + eps) / (2|M|)
//! W_fg = (2|M| - N + eps) / (2|M|)
//! W    = W_fg where (M or M_hat) else W_bg
//! W_diff[0] = 0,  W_diff[t] = lambda * (M[t] xor M[t-1])
//! L_MW = mean(|M - M_raw| * (W + W_diff))
//! ```
//!
//! The weights are computed from the binarized reconstruction and treated as
//! constants; gradients flow only through `|M - M_raw|`.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::checkpoint::{Checkpoint, ModelType};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, LatentKind};
use crate::layers::{kl_standard_normal, reparameterize, ConvDecoder, ConvEncoder, ConvSpec};
use crate::rng::{init_var_store, SeededRng};
use crate::train::{finite_scalar, BatchSampler, LossLog, TrainConfig};
use crate::video::{BinaryVideo, VideoShape, VideoTensor};

/// Per-pixel weights with shape (n, h, w).
pub type WeightMatrix = Array3<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionVaeConfig {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub latent_dim: i64,
    /// Smoothing term of the balance weights, in pixel-count units.
    pub epsilon: f64,
    /// Fixed boost for changed pixels; `None` uses twice the foreground weight.
    pub lambda_override: Option<f64>,
    pub binarize_threshold: f64,
    pub kl_weight: f64,
    pub conv: ConvSpec,
}

impl Default for MotionVaeConfig {
    fn default() -> Self {
        Self {
            n: 16,
            h: 64,
            w: 64,
            latent_dim: 128,
            epsilon: 1.0,
            lambda_override: None,
            binarize_threshold: 0.5,
            kl_weight: 1e-3,
            conv: ConvSpec::new(&[16, 32, 64]),
        }
    }
}

impl MotionVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0,1)".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        if self.latent_dim < 1 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.h < 8 || self.w < 8 {
            return Err(Error::Config("frames must be at least 8x8".into()));
        }
        self.conv.validate(&[self.n, self.h, self.w])
    }

    pub fn shape(&self) -> VideoShape {
        VideoShape::new(self.n, self.h, self.w, 1)
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            epsilon: self.epsilon,
            lambda_override: self.lambda_override,
            binarize_threshold: self.binarize_threshold,
        }
    }
}

/// The knobs of the weighted loss, separate from the network config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub epsilon: f64,
    pub lambda_override: Option<f64>,
    pub binarize_threshold: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        MotionVaeConfig::default().loss_params()
    }
}

/// Batched balance weights.
///
/// `m` and `m_hat` are binary `(b, 1, n, h, w)` tensors. Returns the per-sample
/// scalars `w_fg`, `w_bg` (shape `(b)`) and the full weight tensor.
pub fn balance_weights(m: &Tensor, m_hat: &Tensor, epsilon: f64) -> (Tensor, Tensor, Tensor) {
    let b = m.size()[0];
    let m = m.to_kind(Kind::Double);
    let m_hat = m_hat.to_kind(Kind::Double);
    let pixels = (m.numel() as i64 / b) as f64;
    let n_fg = m.view([b, -1]).sum_dim_intlist(1, false, Kind::Double)
        + m_hat.view([b, -1]).sum_dim_intlist(1, false, Kind::Double);
    let w_bg = (&n_fg + epsilon) / (2.0 * pixels);
    let w_fg = (-&n_fg + (2.0 * pixels + epsilon)) / (2.0 * pixels);
    let fg = m.maximum(&m_hat);
    let bcast = [b, 1, 1, 1, 1];
    let w = &fg * w_fg.view(bcast) + (-&fg + 1.0) * w_bg.view(bcast);
    (w_fg, w_bg, w)
}

/// Batched difference weights: `lambda` (shape `(b)`) on pixels that differ
/// from the previous frame, zero on the first frame.
pub fn diff_weights(m: &Tensor, lambda: &Tensor) -> Tensor {
    let size = m.size();
    let (b, n) = (size[0], size[2]);
    let m = m.to_kind(Kind::Double);
    let first = m.narrow(2, 0, 1).zeros_like();
    if n == 1 {
        return first;
    }
    let changed = (m.narrow(2, 1, n - 1) - m.narrow(2, 0, n - 1)).abs();
    Tensor::cat(&[first, changed], 2) * lambda.to_kind(Kind::Double).view([b, 1, 1, 1, 1])
}

/// Binarize a raw reconstruction: strictly above the threshold is foreground.
pub fn binarize(raw: &Tensor, threshold: f64) -> Tensor {
    raw.gt(threshold).to_kind(Kind::Double)
}

/// Total per-pixel weights `W + W_diff` for a batch, computed without gradient.
pub fn loss_weights(m: &Tensor, m_hat_raw: &Tensor, params: &LossParams) -> Tensor {
    tch::no_grad(|| {
        let m_hat = binarize(&m_hat_raw.detach(), params.binarize_threshold);
        let (w_fg, _, w) = balance_weights(m, &m_hat, params.epsilon);
        let lambda = match params.lambda_override {
            Some(l) => w_fg.full_like(l),
            None => &w_fg * 2.0,
        };
        w + diff_weights(m, &lambda)
    })
}

/// `mean(|m - m_hat_raw| * weights)` with the weights taken as given.
pub fn weighted_l1(m: &Tensor, m_hat_raw: &Tensor, weights: &Tensor) -> Tensor {
    let kind = m_hat_raw.kind();
    ((m.to_kind(kind) - m_hat_raw).abs() * weights.to_kind(kind)).mean(kind)
}

/// The motion weighted loss for a batch of `(b, 1, n, h, w)` tensors.
pub fn motion_weighted_loss_batch(m: &Tensor, m_hat_raw: &Tensor, params: &LossParams) -> Tensor {
    let weights = loss_weights(m, m_hat_raw, params);
    weighted_l1(m, m_hat_raw, &weights)
}

fn check_binary_pair(a: &BinaryVideo, b: &BinaryVideo) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "motion videos differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn to_batch(v: &VideoTensor, kind: Kind) -> Tensor {
    v.to_tensor(kind).unsqueeze(0)
}

fn weights_to_array(w: &Tensor) -> Result<WeightMatrix> {
    let size = w.size();
    let (n, h, wd) = (size[2] as usize, size[3] as usize, size[4] as usize);
    let flat = Vec::<f64>::try_from(&w.to_kind(Kind::Double).contiguous().view([-1]))?;
    Array3::from_shape_vec((n, h, wd), flat).map_err(|e| Error::Dimension(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceWeights {
    pub w_fg: f64,
    pub w_bg: f64,
    pub matrix: WeightMatrix,
}

pub fn compute_balance_weights(m: &BinaryVideo, m_hat: &BinaryVideo, epsilon: f64) -> Result<BalanceWeights> {
    check_binary_pair(m, m_hat)?;
    let (w_fg, w_bg, w) = balance_weights(
        &to_batch(m.video(), Kind::Double),
        &to_batch(m_hat.video(), Kind::Double),
        epsilon,
    );
    Ok(BalanceWeights {
        w_fg: w_fg.double_value(&[0]),
        w_bg: w_bg.double_value(&[0]),
        matrix: weights_to_array(&w)?,
    })
}

pub fn compute_diff_weights(m: &BinaryVideo, lambda: f64) -> Result<WeightMatrix> {
    let w = diff_weights(&to_batch(m.video(), Kind::Double), &Tensor::from_slice(&[lambda]));
    weights_to_array(&w)
}

/// The motion weighted loss of a raw (real-valued) reconstruction.
pub fn motion_weighted_loss(m: &BinaryVideo, m_hat_raw: &VideoTensor, params: &LossParams) -> Result<f64> {
    if m.shape() != m_hat_raw.shape() {
        return Err(Error::Dimension(format!(
            "target {:?} and reconstruction {:?} differ",
            m.shape(),
            m_hat_raw.shape()
        )));
    }
    let loss = motion_weighted_loss_batch(
        &to_batch(m.video(), Kind::Double),
        &to_batch(m_hat_raw, Kind::Double),
        params,
    );
    let v = loss.double_value(&[]);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("motion weighted loss is {v}")));
    }
    Ok(v)
}

/// 3D-convolutional VAE over motion reference videos.
#[derive(Debug)]
pub struct MotionVae {
    vs: nn::VarStore,
    encoder: ConvEncoder,
    decoder: ConvDecoder,
    config: MotionVaeConfig,
    step: usize,
}

impl MotionVae {
    pub fn new(config: MotionVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let extents = [config.n, config.h, config.w];
        let encoder = ConvEncoder::new(&(vs.root() / "enc"), 1, &extents, &config.conv, config.latent_dim, true);
        let decoder = ConvDecoder::new(&(vs.root() / "dec"), config.latent_dim, 1, &extents, &config.conv);
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
        ckpt.expect_type(ModelType::MotionVae)?;
        let mut model = Self::new(ckpt.config()?, 0)?;
        ckpt.load_into(&mut model.vs, ModelType::MotionVae)?;
        model.step = ckpt.meta.step;
        Ok(model)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_var_store(&self.vs, ModelType::MotionVae, &self.config, self.step)
    }

    pub fn config(&self) -> &MotionVaeConfig {
        &self.config
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn steps_trained(&self) -> usize {
        self.step
    }

    /// `(b, 1, n, h, w)` motion videos to posterior (mean, logvar).
    pub fn encode_batch(&self, m: &Tensor) -> (Tensor, Tensor) {
        self.encoder.encode(&m.to_kind(Kind::Float))
    }

    /// Latents `(b, latent_dim)` to reconstructions in [0,1].
    pub fn decode_batch(&self, z: &Tensor) -> Tensor {
        self.decoder.logits(z).sigmoid()
    }

    fn check_shape(&self, s: VideoShape) -> Result<()> {
        if s != self.config.shape() {
            return Err(Error::Dimension(format!(
                "motion model expects {:?}, got {:?}",
                self.config.shape(),
                s
            )));
        }
        Ok(())
    }

    pub fn encode(&self, m: &BinaryVideo) -> Result<(LatentCode, LatentCode)> {
        self.check_shape(m.shape())?;
        let (mean, logvar) = tch::no_grad(|| self.encode_batch(&to_batch(m.video(), Kind::Float)));
        Ok((
            LatentCode::new(LatentKind::Motion, Vec::<f32>::try_from(&mean.get(0))?)?,
            LatentCode::new(LatentKind::Motion, Vec::<f32>::try_from(&logvar.get(0))?)?,
        ))
    }

    pub fn decode(&self, z: &LatentCode) -> Result<VideoTensor> {
        z.expect(LatentKind::Motion, self.config.latent_dim as usize)?;
        let out = tch::no_grad(|| self.decode_batch(&z.to_tensor()));
        VideoTensor::from_tensor(&out.get(0))
    }

    /// Mean motion weighted loss of the posterior-mean reconstructions.
    pub fn reconstruction_loss(&self, videos: &[&BinaryVideo]) -> Result<f64> {
        let batch = stack_motion(videos)?;
        let params = self.config.loss_params();
        let loss = tch::no_grad(|| {
            let (mean, _) = self.encode_batch(&batch);
            motion_weighted_loss_batch(&batch, &self.decode_batch(&mean), &params)
        });
        Ok(loss.double_value(&[]))
    }
}

/// Stack binary videos into a `(b, 1, n, h, w)` float tensor.
pub fn stack_motion(videos: &[&BinaryVideo]) -> Result<Tensor> {
    let first = videos.first().ok_or_else(|| Error::Validation("no motion videos".into()))?;
    let tensors: Vec<Tensor> = videos
        .iter()
        .map(|v| {
            if v.shape() != first.shape() {
                Err(Error::Dimension("motion videos differ in shape".into()))
            } else {
                Ok(v.video().to_tensor(Kind::Float))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&tensors, 0))
}

/// Train on motion reference videos with `L_MW + beta * KL`.
pub fn train_motion_vae(
    videos: &[&BinaryVideo],
    config: MotionVaeConfig,
    train: &TrainConfig,
) -> Result<(MotionVae, LossLog)> {
    train.validate()?;
    let mut model = MotionVae::new(config, train.seed)?;
    let data = stack_motion(videos)?;
    let s = videos[0].shape();
    model.check_shape(s)?;
    let params = model.config.loss_params();
    let beta = model.config.kl_weight;
    let latent = model.config.latent_dim;
    let mut opt = nn::Adam::default().build(&model.vs, train.learning_rate)?;
    let mut sampler = BatchSampler::new(videos.len(), train.batch_size, train.seed);
    let mut noise = SeededRng::stream(train.seed, "motion-reparam");
    let mut log = LossLog::new(&["loss", "l_mw", "kl"]);
    for step in 0..train.steps {
        let idx: Vec<i64> = sampler.next_batch().iter().map(|&i| i as i64).collect();
        let batch = data.index_select(0, &Tensor::from_slice(&idx));
        let (mean, logvar) = model.encode_batch(&batch);
        let eps = noise.normal(&[idx.len() as i64, latent]);
        let recon = model.decode_batch(&reparameterize(&mean, &logvar, &eps));
        let l_mw = motion_weighted_loss_batch(&batch, &recon, &params);
        let kl = kl_standard_normal(&mean, &logvar);
        let loss = &l_mw + &kl * beta;
        opt.backward_step(&loss);
        let total = finite_scalar(&loss, step, "motion VAE loss")?;
        if train.should_log(step) {
            log.push(step, vec![total, l_mw.double_value(&[]), kl.double_value(&[])]);
        }
        model.step += 1;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video_2x2(bits: [bool; 4]) -> BinaryVideo {
        BinaryVideo::from_fn(1, 2, 2, |_, y, x| bits[y * 2 + x]).unwrap()
    }

    #[test]
    fn worked_balance_example() {
        let m = video_2x2([true, false, false, false]);
        let w = compute_balance_weights(&m, &m, 0.0).unwrap();
        assert!((w.w_bg - 0.25).abs() < 1e-15);
        assert!((w.w_fg - 0.75).abs() < 1e-15);
        let fg: f64 = w.matrix[[0, 0, 0]];
        let bg: f64 = w.matrix.sum() - fg;
        assert!((fg - bg).abs() < 1e-15);
    }

    #[test]
    fn half_foreground_is_uniform() {
        let m = video_2x2([true, true, false, false]);
        let w = compute_balance_weights(&m, &m, 0.0).unwrap();
        assert_eq!((w.w_fg, w.w_bg), (0.5, 0.5));
    }

    #[test]
    fn empty_videos_use_epsilon() {
        let m = BinaryVideo::zeros(1, 64, 64).unwrap();
        let w = compute_balance_weights(&m, &m, 1.0).unwrap();
        assert_eq!(w.w_bg, 1.0 / 8192.0);
        assert!((w.w_fg - 1.0).abs() < 1e-3);
        assert!(w.matrix.iter().all(|v| *v == w.w_bg));
    }

    #[test]
    fn scalar_weights_sum_to_one_plus_eps_ratio() {
        let m = BinaryVideo::from_fn(2, 8, 8, |t, y, x| (t + y + x) % 5 == 0).unwrap();
        let h = BinaryVideo::from_fn(2, 8, 8, |_, y, _| y == 3).unwrap();
        let w = compute_balance_weights(&m, &h, 3.0).unwrap();
        assert!((w.w_fg + w.w_bg - (1.0 + 3.0 / 128.0)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = BinaryVideo::zeros(1, 2, 2).unwrap();
        let b = BinaryVideo::zeros(2, 2, 2).unwrap();
        assert!(compute_balance_weights(&a, &b, 1.0).is_err());
    }

    #[test]
    fn static_video_has_no_diff_weight() {
        let m = BinaryVideo::from_fn(4, 8, 8, |_, y, x| y < 3 && x < 3).unwrap();
        let d = compute_diff_weights(&m, 2.0).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_flip_is_weighted_on_second_frame() {
        let m = BinaryVideo::from_fn(2, 2, 2, |t, y, x| t == 0 && y == 0 && x == 1).unwrap();
        let d = compute_diff_weights(&m, 1.5).unwrap();
        assert!(d.index_axis(ndarray::Axis(0), 0).iter().all(|v| *v == 0.0));
        assert_eq!(d[[1, 0, 1]], 1.5);
        assert_eq!(d.sum(), 1.5);
    }

    #[test]
    fn shifted_box_marks_two_columns() {
        let m = BinaryVideo::from_fn(2, 6, 8, |t, y, x| y >= 1 && y < 4 && x >= 2 + t && x < 5 + t).unwrap();
        let d = compute_diff_weights(&m, 1.0).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                // brute-force XOR of consecutive frames
                let expect = (m.get(1, y, x) != m.get(0, y, x)) as u8 as f64;
                assert_eq!(d[[1, y, x]], expect);
            }
        }
        assert_eq!(d[[1, 2, 2]], 1.0);
        assert_eq!(d[[1, 2, 5]], 1.0);
        assert_eq!(d[[1, 2, 3]], 0.0);
    }

    #[test]
    fn worked_loss_example() {
        let m = video_2x2([true, false, false, false]);
        let raw = VideoTensor::filled(VideoShape::new(1, 2, 2, 1), 0.5).unwrap();
        let params = LossParams {
            epsilon: 0.0,
            ..Default::default()
        };
        let l = motion_weighted_loss(&m, &raw, &params).unwrap();
        assert!((l - 0.15625).abs() < 1e-12, "{l}");
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let m = BinaryVideo::from_fn(3, 8, 8, |t, y, x| x >= t && x < t + 3 && y < 4).unwrap();
        let l = motion_weighted_loss(&m, m.video(), &LossParams::default()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn decode_zero_latent_is_valid_video() {
        let cfg = MotionVaeConfig {
            n: 8,
            h: 16,
            w: 16,
            latent_dim: 8,
            conv: ConvSpec::new(&[4, 8]),
            ..Default::default()
        };
        let model = MotionVae::new(cfg, 0).unwrap();
        let v = model.decode(&LatentCode::zeros(LatentKind::Motion, 8)).unwrap();
        assert_eq!(v.shape(), VideoShape::new(8, 16, 16, 1));
        let m = BinaryVideo::from_fn(8, 16, 16, |_, y, x| y < 4 && x < 4).unwrap();
        let (a, _) = model.encode(&m).unwrap();
        let (b, _) = model.encode(&m).unwrap();
        assert_eq!(a, b);
        let wrong = BinaryVideo::zeros(4, 16, 16).unwrap();
        assert!(matches!(model.encode(&wrong), Err(Error::Dimension(_))));
        assert!(model.decode(&LatentCode::zeros(LatentKind::Content, 8)).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = MotionVaeConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MotionVaeConfig {
            binarize_threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(MotionVaeConfig::default().validate().is_ok());
    }
}
