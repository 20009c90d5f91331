//! Content autoencoder over single frames, trained with a masked L1 loss so
//! that only object pixels constrain the reconstruction.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::checkpoint::{Checkpoint, ModelType};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, LatentKind};
use crate::layers::{kl_standard_normal, reparameterize, ConvDecoder, ConvEncoder, ConvSpec};
use crate::preprocess::{frames_to_tensor, tensor_to_frames, PreparedEpisode};
use crate::rng::{init_var_store, SeededRng};
use crate::train::{finite_scalar, BatchSampler, LossLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// First frame of the rasterized box video.
    MotionRef,
    /// First frame of the refined background-difference masks.
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContentVaeConfig {
    pub h: usize,
    pub w: usize,
    pub latent_dim: i64,
    pub kl_weight: f64,
    pub content_mask: MaskSource,
    pub conv: ConvSpec,
}

impl Default for ContentVaeConfig {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            latent_dim: 128,
            kl_weight: 1e-3,
            content_mask: MaskSource::Refined,
            conv: ConvSpec::new(&[32, 64, 128]),
        }
    }
}

impl ContentVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        if self.h < 8 || self.w < 8 {
            return Err(Error::Config("frames must be at least 8x8".into()));
        }
        self.conv.validate(&[self.h, self.w])
    }
}

/// `mean(|f_hat - f| * mask)` over `(b, c, h, w)` frames and `(b, 1, h, w)` masks.
/// The mean runs over every element, masked or not.
pub fn content_weighted_loss_batch(f: &Tensor, f_hat: &Tensor, mask: &Tensor) -> Tensor {
    let kind = f_hat.kind();
    ((f_hat - f.to_kind(kind)).abs() * mask.to_kind(kind)).mean(kind)
}

/// Masked L1 between a frame and its reconstruction; `mask` is broadcast over channels.
pub fn content_weighted_loss(f: ArrayView3<'_, f32>, f_hat: ArrayView3<'_, f32>, mask: ArrayView2<'_, f32>) -> Result<f64> {
    let (h, w, _) = f.dim();
    if f.dim() != f_hat.dim() || mask.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "frame {:?}, reconstruction {:?} and mask {:?} disagree",
            f.dim(),
            f_hat.dim(),
            mask.dim()
        )));
    }
    if mask.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Validation("content mask must be binary".into()));
    }
    let to64 = |a: ArrayView3<'_, f32>| frames_to_tensor(&[a]).map(|t| t.to_kind(Kind::Double));
    let m = mask_to_tensor(&[mask]).to_kind(Kind::Double);
    Ok(content_weighted_loss_batch(&to64(f)?, &to64(f_hat)?, &m).double_value(&[]))
}

/// `(h, w)` masks to a `(b, 1, h, w)` float tensor.
pub fn mask_to_tensor(masks: &[ArrayView2<'_, f32>]) -> Tensor {
    let (h, w) = masks[0].dim();
    let flat: Vec<f32> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    Tensor::from_slice(&flat).view([masks.len() as i64, 1, h as i64, w as i64])
}

/// One training example: a content reference frame and its loss mask.
#[derive(Debug, Clone)]
pub struct ContentSample {
    pub frame: Array3<f32>,
    pub mask: Array2<f32>,
}

/// First frame of each episode with the configured mask.
pub fn content_samples(episodes: &[PreparedEpisode], source: MaskSource) -> Vec<ContentSample> {
    episodes
        .iter()
        .map(|ep| {
            let mask_video = match source {
                MaskSource::MotionRef => &ep.motion,
                MaskSource::Refined => &ep.masks,
            };
            ContentSample {
                frame: ep.video.frame(0).to_owned(),
                mask: mask_video.video().frame(0).index_axis(ndarray::Axis(2), 0).to_owned(),
            }
        })
        .collect()
}

#[derive(Debug)]
pub struct ContentVae {
    vs: nn::VarStore,
    encoder: ConvEncoder,
    decoder: ConvDecoder,
    config: ContentVaeConfig,
    step: usize,
}

impl ContentVae {
    pub fn new(config: ContentVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let extents = [config.h, config.w];
        let encoder = ConvEncoder::new(&(vs.root() / "enc"), 3, &extents, &config.conv, config.latent_dim, true);
        let decoder = ConvDecoder::new(&(vs.root() / "dec"), config.latent_dim, 3, &extents, &config.conv);
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
        ckpt.expect_type(ModelType::ContentVae)?;
        let mut model = Self::new(ckpt.config()?, 0)?;
        ckpt.load_into(&mut model.vs, ModelType::ContentVae)?;
        model.step = ckpt.meta.step;
        Ok(model)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_var_store(&self.vs, ModelType::ContentVae, &self.config, self.step)
    }

    pub fn config(&self) -> &ContentVaeConfig {
        &self.config
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn steps_trained(&self) -> usize {
        self.step
    }

    pub fn encode_batch(&self, frames: &Tensor) -> (Tensor, Tensor) {
        self.encoder.encode(&frames.to_kind(Kind::Float))
    }

    pub fn decode_batch(&self, z: &Tensor) -> Tensor {
        self.decoder.logits(z).sigmoid()
    }

    fn check_frame(&self, dim: (usize, usize, usize)) -> Result<()> {
        if dim != (self.config.h, self.config.w, 3) {
            return Err(Error::Dimension(format!(
                "content model expects {}x{}x3 frames, got {dim:?}",
                self.config.h, self.config.w
            )));
        }
        Ok(())
    }

    pub fn encode(&self, frame: ArrayView3<'_, f32>) -> Result<(LatentCode, LatentCode)> {
        self.check_frame(frame.dim())?;
        let batch = frames_to_tensor(&[frame])?;
        let (mean, logvar) = tch::no_grad(|| self.encode_batch(&batch));
        Ok((
            LatentCode::new(LatentKind::Content, Vec::<f32>::try_from(&mean.get(0))?)?,
            LatentCode::new(LatentKind::Content, Vec::<f32>::try_from(&logvar.get(0))?)?,
        ))
    }

    pub fn decode(&self, z: &LatentCode) -> Result<Array3<f32>> {
        z.expect(LatentKind::Content, self.config.latent_dim as usize)?;
        let out = tch::no_grad(|| self.decode_batch(&z.to_tensor()));
        Ok(tensor_to_frames(&out)?.remove(0))
    }

    /// Mean masked L1 of posterior-mean reconstructions.
    pub fn masked_l1(&self, samples: &[ContentSample]) -> Result<f64> {
        let (frames, masks) = stack_samples(samples)?;
        let loss = tch::no_grad(|| {
            let (mean, _) = self.encode_batch(&frames);
            content_weighted_loss_batch(&frames, &self.decode_batch(&mean), &masks)
        });
        Ok(loss.double_value(&[]))
    }
}

fn stack_samples(samples: &[ContentSample]) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Validation("no content samples".into()));
    }
    let frames: Vec<_> = samples.iter().map(|s| s.frame.view()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.view()).collect();
    if masks.iter().any(|m| m.iter().any(|v| *v != 0.0 && *v != 1.0)) {
        return Err(Error::Validation("content mask must be binary".into()));
    }
    Ok((frames_to_tensor(&frames)?, mask_to_tensor(&masks)))
}

/// Train on (frame, mask) pairs with `L_CW + beta * KL`.
pub fn train_content_vae(
    samples: &[ContentSample],
    config: ContentVaeConfig,
    train: &TrainConfig,
) -> Result<(ContentVae, LossLog)> {
    train.validate()?;
    let mut model = ContentVae::new(config, train.seed)?;
    let (frames, masks) = stack_samples(samples)?;
    model.check_frame(samples[0].frame.dim())?;
    let beta = model.config.kl_weight;
    let latent = model.config.latent_dim;
    let mut opt = nn::Adam::default().build(&model.vs, train.learning_rate)?;
    let mut sampler = BatchSampler::new(samples.len(), train.batch_size, train.seed);
    let mut noise = SeededRng::stream(train.seed, "content-reparam");
    let mut log = LossLog::new(&["loss", "l_cw", "kl"]);
    for step in 0..train.steps {
        let idx: Vec<i64> = sampler.next_batch().iter().map(|&i| i as i64).collect();
        let idx_t = Tensor::from_slice(&idx);
        let (f, m) = (frames.index_select(0, &idx_t), masks.index_select(0, &idx_t));
        let (mean, logvar) = model.encode_batch(&f);
        let eps = noise.normal(&[idx.len() as i64, latent]);
        let recon = model.decode_batch(&reparameterize(&mean, &logvar, &eps));
        let l_cw = content_weighted_loss_batch(&f, &recon, &m);
        let kl = kl_standard_normal(&mean, &logvar);
        let loss = &l_cw + &kl * beta;
        opt.backward_step(&loss);
        let total = finite_scalar(&loss, step, "content VAE loss")?;
        if train.should_log(step) {
            log.push(step, vec![total, l_cw.double_value(&[]), kl.double_value(&[])]);
        }
        model.step += 1;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_give_zero() {
        let f = Array3::<f32>::from_elem((4, 4, 3), 0.3);
        let m = Array2::<f32>::ones((4, 4));
        assert_eq!(content_weighted_loss(f.view(), f.view(), m.view()).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_gives_zero() {
        let f = Array3::<f32>::zeros((4, 4, 3));
        let g = Array3::<f32>::ones((4, 4, 3));
        let m = Array2::<f32>::zeros((4, 4));
        assert_eq!(content_weighted_loss(f.view(), g.view(), m.view()).unwrap(), 0.0);
    }

    #[test]
    fn worked_example_single_pixel() {
        let f = Array3::<f32>::zeros((2, 2, 1));
        let mut g = Array3::<f32>::zeros((2, 2, 1));
        g[[1, 0, 0]] = 0.8;
        g[[0, 1, 0]] = 0.5; // unmasked
        let mut m = Array2::<f32>::zeros((2, 2));
        m[[1, 0]] = 1.0;
        let l = content_weighted_loss(f.view(), g.view(), m.view()).unwrap();
        assert!((l - 0.2).abs() < 1e-7, "{l}");
    }

    #[test]
    fn non_binary_mask_rejected() {
        let f = Array3::<f32>::zeros((2, 2, 3));
        let m = Array2::<f32>::from_elem((2, 2), 0.5);
        assert!(matches!(
            content_weighted_loss(f.view(), f.view(), m.view()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn zero_latent_decodes_to_valid_frame() {
        let cfg = ContentVaeConfig {
            h: 16,
            w: 16,
            latent_dim: 4,
            conv: ConvSpec::new(&[4, 8]),
            ..Default::default()
        };
        let model = ContentVae::new(cfg, 1).unwrap();
        let f = model.decode(&LatentCode::zeros(LatentKind::Content, 4)).unwrap();
        assert_eq!(f.dim(), (16, 16, 3));
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        let (a, _) = model.encode(f.view()).unwrap();
        let (b, _) = model.encode(f.view()).unwrap();
        assert_eq!(a, b);
        let wrong = Array3::<f32>::zeros((8, 16, 3));
        assert!(model.encode(wrong.view()).is_err());
    }
}
