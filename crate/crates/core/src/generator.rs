//! Video generator: a decoder from concatenated motion and content latents
//! to a rough video, followed by a noise-conditioned residual refiner.

use std::path::Path;

use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::checkpoint::{Checkpoint, ModelType};
use crate::content_vae::{ContentVae, ContentVaeConfig};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, LatentKind};
use crate::layers::{ConvDecoder, ConvSpec};
use crate::motion_vae::{stack_motion, MotionVae, MotionVaeConfig};
use crate::preprocess::{frames_to_tensor, rasterize_tracks, PreparedEpisode};
use crate::rng::{init_var_store, SeededRng};
use crate::tracks::BoxTrackSet;
use crate::train::{finite_scalar, BatchSampler, LossLog, TrainConfig};
use crate::video::{VideoShape, VideoTensor};

/// Keeps `logit` finite on saturated decoder outputs.
const LOGIT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub motion_latent_dim: i64,
    pub content_latent_dim: i64,
    pub noise_dim: i64,
    pub decoder_conv: ConvSpec,
    pub sr_hidden: i64,
    /// Channels the noise vector is projected to before being broadcast
    /// over every frame and pixel.
    pub sr_noise_channels: i64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 16,
            h: 64,
            w: 64,
            motion_latent_dim: 128,
            content_latent_dim: 128,
            noise_dim: 64,
            decoder_conv: ConvSpec::new(&[32, 64, 128]),
            sr_hidden: 16,
            sr_noise_channels: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.motion_latent_dim < 1 || self.content_latent_dim < 1 || self.noise_dim < 1 {
            return Err(Error::Config("latent dimensions must be positive".into()));
        }
        if self.sr_hidden < 1 || self.sr_noise_channels < 1 {
            return Err(Error::Config("refiner widths must be positive".into()));
        }
        self.decoder_conv.validate(&[self.n, self.h, self.w])
    }

    pub fn shape(&self) -> VideoShape {
        VideoShape::new(self.n, self.h, self.w, 3)
    }

    /// Check that latents produced by the given autoencoders fit this generator.
    pub fn check_compatible(&self, motion: &MotionVaeConfig, content: &ContentVaeConfig) -> Result<()> {
        let mut problems = Vec::new();
        if motion.latent_dim != self.motion_latent_dim {
            problems.push(format!(
                "motion latent {} vs generator {}",
                motion.latent_dim, self.motion_latent_dim
            ));
        }
        if content.latent_dim != self.content_latent_dim {
            problems.push(format!(
                "content latent {} vs generator {}",
                content.latent_dim, self.content_latent_dim
            ));
        }
        if (motion.n, motion.h, motion.w) != (self.n, self.h, self.w) {
            problems.push(format!(
                "motion video {}x{}x{} vs generator {}x{}x{}",
                motion.n, motion.h, motion.w, self.n, self.h, self.w
            ));
        }
        if (content.h, content.w) != (self.h, self.w) {
            problems.push(format!(
                "content frame {}x{} vs generator {}x{}",
                content.h, content.w, self.h, self.w
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Residual refiner acting in logit space: `sigmoid(logit(v) + r(v, z))`.
/// The last layer starts at zero so an untrained refiner is the identity.
#[derive(Debug)]
struct SuperRes {
    noise_proj: nn::Linear,
    conv1: nn::Conv3D,
    conv2: nn::Conv3D,
    out: nn::Conv3D,
    noise_channels: i64,
}

impl SuperRes {
    fn new(p: &nn::Path, config: &GeneratorConfig) -> Self {
        let c = nn::ConvConfig {
            padding: 1,
            ..Default::default()
        };
        let hid = config.sr_hidden;
        Self {
            noise_proj: nn::linear(p / "noise_proj", config.noise_dim, config.sr_noise_channels, Default::default()),
            conv1: nn::conv3d(p / "conv1", 3 + config.sr_noise_channels, hid, 3, c),
            conv2: nn::conv3d(p / "conv2", hid, hid, 3, c),
            out: nn::conv3d(p / "zero_init_out", hid, 3, 3, c),
            noise_channels: config.sr_noise_channels,
        }
    }

    fn forward(&self, v_hat: &Tensor, z: &Tensor) -> Tensor {
        let s = v_hat.size();
        let (b, n, h, w) = (s[0], s[2], s[3], s[4]);
        let zc = self.noise_channels;
        let zmap = z
            .apply(&self.noise_proj)
            .view([b, zc, 1, 1, 1])
            .expand([b, zc, n, h, w], false);
        let r = Tensor::cat(&[v_hat, &zmap], 1)
            .apply(&self.conv1)
            .relu()
            .apply(&self.conv2)
            .relu()
            .apply(&self.out);
        (v_hat.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS).logit(None) + r).sigmoid()
    }
}

#[derive(Debug)]
pub struct Generator {
    vs: nn::VarStore,
    decoder: ConvDecoder,
    sr: SuperRes,
    config: GeneratorConfig,
    step: usize,
    stage: ModelType,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let decoder = ConvDecoder::new(
            &(vs.root() / "dec"),
            config.motion_latent_dim + config.content_latent_dim,
            3,
            &[config.n, config.h, config.w],
            &config.decoder_conv,
        );
        let sr = SuperRes::new(&(vs.root() / "sr"), &config);
        init_var_store(&vs, seed);
        Ok(Self {
            vs,
            decoder,
            sr,
            config,
            step: 0,
            stage: ModelType::Decoder,
        })
    }

    /// Accepts both stage-1 (`decoder`) and stage-2 (`generator`) checkpoints.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let stage = ckpt.meta.model_type;
        if stage != ModelType::Decoder && stage != ModelType::Generator {
            ckpt.expect_type(ModelType::Generator)?;
        }
        let mut model = Self::new(ckpt.config()?, 0)?;
        ckpt.load_into(&mut model.vs, stage)?;
        model.step = ckpt.meta.step;
        model.stage = stage;
        Ok(model)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_var_store(&self.vs, self.stage, &self.config, self.step)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn steps_trained(&self) -> usize {
        self.step
    }

    pub fn stage(&self) -> ModelType {
        self.stage
    }

    pub(crate) fn mark_adversarial(&mut self, steps: usize) {
        self.stage = ModelType::Generator;
        self.step += steps;
    }

    /// `(b, dm)` and `(b, dc)` latents to a rough `(b, 3, n, h, w)` video in [0,1].
    pub fn decode_batch(&self, motion: &Tensor, content: &Tensor) -> Tensor {
        let z = Tensor::cat(&[motion.to_kind(Kind::Float), content.to_kind(Kind::Float)], 1);
        self.decoder.logits(&z).sigmoid()
    }

    pub fn super_resolve_batch(&self, v_hat: &Tensor, z: &Tensor) -> Tensor {
        self.sr.forward(&v_hat.to_kind(Kind::Float), &z.to_kind(Kind::Float))
    }

    pub fn forward_batch(&self, motion: &Tensor, content: &Tensor, noise: &Tensor) -> Tensor {
        self.super_resolve_batch(&self.decode_batch(motion, content), noise)
    }

    pub fn decode_video(&self, motion: &LatentCode, content: &LatentCode) -> Result<VideoTensor> {
        motion.expect(LatentKind::Motion, self.config.motion_latent_dim as usize)?;
        content.expect(LatentKind::Content, self.config.content_latent_dim as usize)?;
        let out = tch::no_grad(|| self.decode_batch(&motion.to_tensor(), &content.to_tensor()));
        VideoTensor::from_tensor(&out.get(0))
    }

    pub fn super_resolve(&self, v_hat: &VideoTensor, z: &LatentCode) -> Result<VideoTensor> {
        if v_hat.shape() != self.config.shape() {
            return Err(Error::Dimension(format!(
                "refiner expects {:?}, got {:?}",
                self.config.shape(),
                v_hat.shape()
            )));
        }
        z.expect(LatentKind::Noise, self.config.noise_dim as usize)?;
        let v = v_hat.to_tensor(Kind::Float).unsqueeze(0);
        let out = tch::no_grad(|| self.super_resolve_batch(&v, &z.to_tensor()));
        VideoTensor::from_tensor(&out.get(0))
    }
}

/// `L_D`: mean absolute error between two batches of videos.
pub fn decoder_l1_batch(v_hat: &Tensor, v: &Tensor) -> Tensor {
    (v_hat - v.to_kind(v_hat.kind())).abs().mean(v_hat.kind())
}

pub fn decoder_reconstruction_loss(v_hat: &VideoTensor, v: &VideoTensor) -> Result<f64> {
    if v_hat.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} and target {:?} differ in shape",
            v_hat.shape(),
            v.shape()
        )));
    }
    let sum: f64 = v_hat
        .data()
        .iter()
        .zip(v.data().iter())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(sum / v.data().len() as f64)
}

/// Posterior-mean latents and target videos of a set of episodes.
pub struct EncodedEpisodes {
    pub motion: Tensor,
    pub content: Tensor,
    pub videos: Tensor,
}

pub fn encode_episodes(episodes: &[PreparedEpisode], motion: &MotionVae, content: &ContentVae) -> Result<EncodedEpisodes> {
    if episodes.is_empty() {
        return Err(Error::Validation("no episodes".into()));
    }
    let motions: Vec<_> = episodes.iter().map(|e| &e.motion).collect();
    let firsts: Vec<_> = episodes.iter().map(|e| e.video.frame(0)).collect();
    let m = stack_motion(&motions)?;
    let f = frames_to_tensor(&firsts)?;
    let (lm, lc) = tch::no_grad(|| (motion.encode_batch(&m).0, content.encode_batch(&f).0));
    let videos = Tensor::stack(
        &episodes.iter().map(|e| e.video.to_tensor(Kind::Float)).collect::<Vec<_>>(),
        0,
    );
    Ok(EncodedEpisodes {
        motion: lm,
        content: lc,
        videos,
    })
}

/// Stage 1: fit the decoder to dataset videos from frozen encoder means.
pub fn train_decoder(
    episodes: &[PreparedEpisode],
    motion: &MotionVae,
    content: &ContentVae,
    config: GeneratorConfig,
    train: &TrainConfig,
) -> Result<(Generator, LossLog)> {
    train.validate()?;
    config.check_compatible(motion.config(), content.config())?;
    let mut model = Generator::new(config, train.seed)?;
    if episodes.iter().any(|e| e.shape() != model.config.shape()) {
        return Err(Error::Dimension(format!(
            "episodes must be {:?} to train this decoder",
            model.config.shape()
        )));
    }
    let data = encode_episodes(episodes, motion, content)?;
    let mut opt = nn::Adam::default().build(&model.vs, train.learning_rate)?;
    let mut sampler = BatchSampler::new(episodes.len(), train.batch_size, train.seed);
    let mut log = LossLog::new(&["l_d"]);
    for step in 0..train.steps {
        let idx: Vec<i64> = sampler.next_batch().iter().map(|&i| i as i64).collect();
        let idx = Tensor::from_slice(&idx);
        let recon = model.decode_batch(&data.motion.index_select(0, &idx), &data.content.index_select(0, &idx));
        let loss = decoder_l1_batch(&recon, &data.videos.index_select(0, &idx));
        opt.backward_step(&loss);
        let v = finite_scalar(&loss, step, "decoder loss")?;
        if train.should_log(step) {
            log.push(step, vec![v]);
        }
        model.step += 1;
    }
    Ok((model, log))
}

/// Mean `L_D` of the stage-1 decoder over episodes.
pub fn decoder_l1(generator: &Generator, data: &EncodedEpisodes) -> f64 {
    tch::no_grad(|| decoder_l1_batch(&generator.decode_batch(&data.motion, &data.content), &data.videos))
        .double_value(&[])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    Controlled,
    Unconditional,
}

impl std::str::FromStr for GenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "controlled" => Ok(Self::Controlled),
            "unconditional" => Ok(Self::Unconditional),
            other => Err(Error::Validation(format!(
                "unknown mode {other:?}, expected controlled or unconditional"
            ))),
        }
    }
}

pub fn noise_code(seed: u64, dim: usize) -> LatentCode {
    let values = SeededRng::stream(seed, "noise").normal_vec(dim);
    LatentCode::new(LatentKind::Noise, values).expect("normal samples are finite")
}

fn sampled_code(seed: u64, kind: LatentKind, dim: usize) -> LatentCode {
    let label = match kind {
        LatentKind::Motion => "motion",
        LatentKind::Content => "content",
        LatentKind::Noise => "noise",
    };
    LatentCode::new(kind, SeededRng::stream(seed, label).normal_vec(dim)).expect("normal samples are finite")
}

/// Everything needed to generate: both encoders plus the generator.
#[derive(Debug)]
pub struct Pipeline {
    pub motion: MotionVae,
    pub content: ContentVae,
    pub generator: Generator,
}

pub const MOTION_CKPT: &str = "motion_vae";
pub const CONTENT_CKPT: &str = "content_vae";
pub const DECODER_CKPT: &str = "decoder";
pub const GENERATOR_CKPT: &str = "generator";
pub const CRITIC_CKPT: &str = "critic";

impl Pipeline {
    pub fn new(motion: MotionVae, content: ContentVae, generator: Generator) -> Result<Self> {
        generator
            .config()
            .check_compatible(motion.config(), content.config())?;
        Ok(Self {
            motion,
            content,
            generator,
        })
    }

    /// Load from a model directory; a stage-2 `generator` checkpoint takes
    /// precedence over the stage-1 `decoder`.
    pub fn load(dir: &Path) -> Result<Self> {
        let motion = MotionVae::from_checkpoint(&Checkpoint::load(dir, MOTION_CKPT)?)?;
        let content = ContentVae::from_checkpoint(&Checkpoint::load(dir, CONTENT_CKPT)?)?;
        let gen_name = if dir.join(format!("{GENERATOR_CKPT}.json")).exists() {
            GENERATOR_CKPT
        } else {
            DECODER_CKPT
        };
        let generator = Generator::from_checkpoint(&Checkpoint::load(dir, gen_name)?)?;
        Self::new(motion, content, generator)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.motion.checkpoint()?.save(dir, MOTION_CKPT)?;
        self.content.checkpoint()?.save(dir, CONTENT_CKPT)?;
        let name = match self.generator.stage() {
            ModelType::Generator => GENERATOR_CKPT,
            _ => DECODER_CKPT,
        };
        self.generator.checkpoint()?.save(dir, name)?;
        Ok(())
    }

    pub fn shape(&self) -> VideoShape {
        self.generator.config().shape()
    }

    /// Encoder latents for a content frame and commanded tracks.
    pub fn controlled_latents(&self, content: ArrayView3<'_, f32>, tracks: &BoxTrackSet) -> Result<(LatentCode, LatentCode)> {
        let s = self.shape();
        if tracks.num_frames != s.n {
            return Err(Error::Validation(format!(
                "tracks num_frames {} does not match model n {}",
                tracks.num_frames, s.n
            )));
        }
        if (tracks.width, tracks.height) != (s.w, s.h) {
            return Err(Error::Validation(format!(
                "tracks are for a {}x{} frame, model generates {}x{}",
                tracks.width, tracks.height, s.w, s.h
            )));
        }
        if content.dim() != (s.h, s.w, 3) {
            return Err(Error::Validation(format!(
                "content image is {:?}, model expects {}x{}x3",
                content.dim(),
                s.h,
                s.w
            )));
        }
        tracks.validate()?;
        let m = rasterize_tracks(tracks, s.n, s.h, s.w)?;
        let (lm, _) = self.motion.encode(&m)?;
        let (lc, _) = self.content.encode(content)?;
        Ok((lm, lc))
    }

    pub fn generate(
        &self,
        mode: GenerateMode,
        content: Option<ArrayView3<'_, f32>>,
        tracks: Option<&BoxTrackSet>,
        seed: u64,
    ) -> Result<VideoTensor> {
        let cfg = self.generator.config();
        let (lm, lc) = match mode {
            GenerateMode::Controlled => {
                let content = content
                    .ok_or_else(|| Error::Validation("controlled generation requires a content image".into()))?;
                let tracks =
                    tracks.ok_or_else(|| Error::Validation("controlled generation requires tracks".into()))?;
                self.controlled_latents(content, tracks)?
            }
            GenerateMode::Unconditional => (
                sampled_code(seed, LatentKind::Motion, cfg.motion_latent_dim as usize),
                sampled_code(seed, LatentKind::Content, cfg.content_latent_dim as usize),
            ),
        };
        let z = noise_code(seed, cfg.noise_dim as usize);
        let v_hat = self.generator.decode_video(&lm, &lc)?;
        self.generator.super_resolve(&v_hat, &z)
    }

    pub fn generate_controlled(&self, content: ArrayView3<'_, f32>, tracks: &BoxTrackSet, seed: u64) -> Result<VideoTensor> {
        self.generate(GenerateMode::Controlled, Some(content), Some(tracks), seed)
    }

    pub fn generate_unconditional(&self, seed: u64) -> Result<VideoTensor> {
        self.generate(GenerateMode::Unconditional, None, None, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n: 4,
            h: 8,
            w: 8,
            motion_latent_dim: 3,
            content_latent_dim: 2,
            noise_dim: 5,
            decoder_conv: ConvSpec::new(&[4, 4]),
            sr_hidden: 4,
            sr_noise_channels: 2,
        }
    }

    #[test]
    fn zero_latents_give_valid_video() {
        let g = Generator::new(small(), 3).unwrap();
        let v = g
            .decode_video(&LatentCode::zeros(LatentKind::Motion, 3), &LatentCode::zeros(LatentKind::Content, 2))
            .unwrap();
        assert_eq!(v.shape(), VideoShape::new(4, 8, 8, 3));
        let again = g
            .decode_video(&LatentCode::zeros(LatentKind::Motion, 3), &LatentCode::zeros(LatentKind::Content, 2))
            .unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn untrained_refiner_is_identity() {
        let g = Generator::new(small(), 3).unwrap();
        let mut rng = SeededRng::new(9);
        let v = VideoTensor::from_tensor(&rng.uniform(&[3, 4, 8, 8])).unwrap();
        let out = g.super_resolve(&v, &noise_code(1, 5)).unwrap();
        assert!(out.max_abs_diff(&v) <= 1e-5, "{}", out.max_abs_diff(&v));
    }

    #[test]
    fn wrong_latent_kind_rejected() {
        let g = Generator::new(small(), 3).unwrap();
        let bad = LatentCode::zeros(LatentKind::Content, 3);
        assert!(g.decode_video(&bad, &LatentCode::zeros(LatentKind::Content, 2)).is_err());
        let v = VideoTensor::zeros(VideoShape::new(4, 8, 16, 3)).unwrap();
        assert!(g.super_resolve(&v, &noise_code(0, 5)).is_err());
    }

    #[test]
    fn l1_constant_offset() {
        let a = VideoTensor::filled(VideoShape::new(2, 8, 8, 3), 0.25).unwrap();
        let b = VideoTensor::filled(VideoShape::new(2, 8, 8, 3), 0.35).unwrap();
        let l = decoder_reconstruction_loss(&b, &a).unwrap();
        assert!((l - 0.1).abs() < 1e-7);
        assert_eq!(decoder_reconstruction_loss(&a, &a).unwrap(), 0.0);
        let c = VideoTensor::zeros(VideoShape::new(1, 8, 8, 3)).unwrap();
        assert!(decoder_reconstruction_loss(&a, &c).is_err());
    }

    #[test]
    fn checkpoint_keeps_stage() {
        let mut g = Generator::new(small(), 1).unwrap();
        let ck = g.checkpoint().unwrap();
        assert_eq!(ck.meta.model_type, ModelType::Decoder);
        g.mark_adversarial(2);
        let back = Generator::from_checkpoint(&g.checkpoint().unwrap()).unwrap();
        assert_eq!(back.stage(), ModelType::Generator);
        assert_eq!(back.steps_trained(), 2);
    }

    #[test]
    fn mode_parses() {
        assert_eq!("controlled".parse::<GenerateMode>().unwrap(), GenerateMode::Controlled);
        assert!("other".parse::<GenerateMode>().is_err());
    }
}
