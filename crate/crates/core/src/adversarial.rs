//! Wasserstein critic with gradient penalty and the adversarial fine-tuning
//! loop over the whole generator.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::checkpoint::{Checkpoint, ModelType};
use crate::error::{Error, Result};
use crate::generator::{encode_episodes, EncodedEpisodes, Generator, CRITIC_CKPT, GENERATOR_CKPT};
use crate::content_vae::ContentVae;
use crate::layers::{ConvEncoder, ConvSpec};
use crate::motion_vae::MotionVae;
use crate::preprocess::PreparedEpisode;
use crate::rng::{init_var_store, SeededRng};
use crate::train::{finite_scalar, BatchSampler, LossLog, TrainConfig};
use crate::video::{VideoShape, VideoTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub conv: ConvSpec,
    pub gp_weight: f64,
    pub critic_steps: usize,
    pub critic_lr: f64,
    pub generator_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            n: 16,
            h: 64,
            w: 64,
            conv: ConvSpec::new(&[16, 32, 64]),
            gp_weight: 10.0,
            critic_steps: 5,
            critic_lr: 1e-4,
            generator_lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gp_weight >= 0.0) {
            return Err(Error::Config("gp_weight must be non-negative".into()));
        }
        if self.critic_steps < 1 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        if !(self.critic_lr > 0.0 && self.generator_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.conv.validate(&[self.n, self.h, self.w])
    }

    pub fn shape(&self) -> VideoShape {
        VideoShape::new(self.n, self.h, self.w, 3)
    }

    fn adam(&self) -> nn::Adam {
        nn::Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            wd: 0.0,
            eps: 1e-8,
            amsgrad: false,
        }
    }
}

/// 3D-convolutional critic with an unbounded scalar output.
#[derive(Debug)]
pub struct Critic {
    vs: nn::VarStore,
    net: ConvEncoder,
    config: CriticConfig,
    step: usize,
}

impl Critic {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let net = ConvEncoder::new(&(vs.root() / "net"), 3, &[config.n, config.h, config.w], &config.conv, 1, false);
        init_var_store(&vs, seed);
        Ok(Self {
            vs,
            net,
            config,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_type(ModelType::Critic)?;
        let mut model = Self::new(ckpt.config()?, 0)?;
        ckpt.load_into(&mut model.vs, ModelType::Critic)?;
        model.step = ckpt.meta.step;
        Ok(model)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_var_store(&self.vs, ModelType::Critic, &self.config, self.step)
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    /// `(b, 3, n, h, w)` videos to `(b,)` scores.
    pub fn score_batch(&self, v: &Tensor) -> Tensor {
        self.net.features(&v.to_kind(Kind::Float)).view([-1])
    }

    pub fn critic_score(&self, v: &VideoTensor) -> Result<f64> {
        Ok(self.critic_scores(std::slice::from_ref(v))?[0])
    }

    pub fn critic_scores(&self, videos: &[VideoTensor]) -> Result<Vec<f64>> {
        if videos.is_empty() {
            return Ok(Vec::new());
        }
        for v in videos {
            if v.shape() != self.config.shape() {
                return Err(Error::Dimension(format!(
                    "critic expects {:?}, got {:?}",
                    self.config.shape(),
                    v.shape()
                )));
            }
        }
        let batch = Tensor::stack(&videos.iter().map(|v| v.to_tensor(Kind::Float)).collect::<Vec<_>>(), 0);
        let scores = tch::no_grad(|| self.score_batch(&batch));
        Ok(Vec::<f64>::try_from(&scores.to_kind(Kind::Double))?)
    }
}

/// `E[(||grad critic(x~)|| - 1)^2]` over `x~ = u*real + (1-u)*fake`, one `u` per sample.
///
/// `u` has shape `(b,)`. A critic whose output does not depend on its input
/// has zero gradient and yields a penalty of one.
pub fn gradient_penalty<F>(critic: F, real: &Tensor, fake: &Tensor, u: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Tensor,
{
    if real.size() != fake.size() {
        return Err(Error::Dimension(format!(
            "real {:?} and fake {:?} batches differ",
            real.size(),
            fake.size()
        )));
    }
    let b = real.size()[0];
    let kind = real.kind();
    let mut bshape = vec![b];
    bshape.extend(std::iter::repeat(1).take(real.dim() - 1));
    let u = u.to_kind(kind).view(bshape.as_slice());
    let one_minus: Tensor = 1.0 - &u;
    let x: Tensor = (&u * real + one_minus * fake.to_kind(kind))
        .detach()
        .set_requires_grad(true);
    let out = critic(&x);
    if out.numel() != b as usize {
        return Err(Error::Capability(format!(
            "critic returned {:?} for a batch of {b}",
            out.size()
        )));
    }
    let norms = if out.requires_grad() {
        let grads = Tensor::f_run_backward(&[out.sum(out.kind())], &[&x], true, true)
            .map_err(|e| Error::Capability(format!("critic is not differentiable: {e}")))?;
        grads[0].flatten(1, -1).square().sum_dim_intlist(1, false, kind).sqrt()
    } else {
        Tensor::zeros([b], (kind, Device::Cpu))
    };
    Ok((norms - 1.0).square().mean(kind))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub critic: CriticConfig,
    /// Fraction of each fake batch built from encoder latents of dataset
    /// episodes instead of standard-normal samples.
    pub encoder_latent_ratio: f64,
    /// Save generator and critic every this many generator steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            critic: CriticConfig::default(),
            encoder_latent_ratio: 0.0,
            checkpoint_every: 50,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.encoder_latent_ratio) {
            return Err(Error::Config("encoder_latent_ratio must be in [0,1]".into()));
        }
        self.critic.validate()
    }
}

/// Stepwise adversarial trainer. Critic steps never touch generator
/// weights and generator steps never touch critic weights.
pub struct GanTrainer {
    pub generator: Generator,
    pub critic: Critic,
    config: GanConfig,
    data: EncodedEpisodes,
    gen_opt: nn::Optimizer,
    critic_opt: nn::Optimizer,
    sampler: BatchSampler,
    rng: SeededRng,
    batch: usize,
    steps: usize,
}

/// Values of one critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStep {
    pub critic_loss: f64,
    pub gp: f64,
}

impl GanTrainer {
    pub fn new(
        generator: Generator,
        episodes: &[PreparedEpisode],
        motion: &MotionVae,
        content: &ContentVae,
        config: GanConfig,
        train: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        let gcfg = generator.config().clone();
        gcfg.check_compatible(motion.config(), content.config())?;
        if config.critic.shape() != gcfg.shape() {
            return Err(Error::Config(format!(
                "critic shape {:?} does not match generator {:?}",
                config.critic.shape(),
                gcfg.shape()
            )));
        }
        let data = encode_episodes(episodes, motion, content)?;
        let critic = Critic::new(config.critic.clone(), crate::rng::derive_seed(train.seed, "critic"))?;
        let gen_opt = config.critic.adam().build(generator.var_store(), config.critic.generator_lr)?;
        let critic_opt = config.critic.adam().build(critic.var_store(), config.critic.critic_lr)?;
        Ok(Self {
            generator,
            critic,
            data,
            gen_opt,
            critic_opt,
            sampler: BatchSampler::new(episodes.len(), train.batch_size, train.seed),
            rng: SeededRng::stream(train.seed, "gan"),
            batch: train.batch_size,
            config,
            steps: 0,
        })
    }

    fn latents(&mut self) -> (Tensor, Tensor, Tensor) {
        let g = self.generator.config();
        let b = self.batch as i64;
        let mut motion = self.rng.normal(&[b, g.motion_latent_dim]);
        let mut content = self.rng.normal(&[b, g.content_latent_dim]);
        let noise = self.rng.normal(&[b, g.noise_dim]);
        let k = (self.config.encoder_latent_ratio * self.batch as f64).round() as i64;
        if k > 0 {
            let idx: Vec<i64> = self.sampler.next_batch().iter().take(k as usize).map(|&i| i as i64).collect();
            let idx = Tensor::from_slice(&idx);
            let k = idx.size()[0];
            motion = Tensor::cat(&[self.data.motion.index_select(0, &idx), motion.narrow(0, k, b - k)], 0);
            content = Tensor::cat(&[self.data.content.index_select(0, &idx), content.narrow(0, k, b - k)], 0);
        }
        (motion, content, noise)
    }

    fn real_batch(&mut self) -> Tensor {
        let idx: Vec<i64> = self.sampler.next_batch().iter().map(|&i| i as i64).collect();
        let idx = Tensor::from_slice(&idx);
        let real = self.data.videos.index_select(0, &idx);
        if real.size()[0] == self.batch as i64 {
            real
        } else {
            // Fewer episodes than the batch size: repeat to fill.
            let reps = (self.batch as i64 + real.size()[0] - 1) / real.size()[0];
            real.repeat([reps, 1, 1, 1, 1]).narrow(0, 0, self.batch as i64)
        }
    }

    /// One critic update against a detached fake batch.
    pub fn critic_step(&mut self) -> Result<CriticStep> {
        let real = self.real_batch();
        let (lm, lc, z) = self.latents();
        let fake = tch::no_grad(|| self.generator.forward_batch(&lm, &lc, &z));
        let u = self.rng.uniform(&[self.batch as i64]);
        let critic = &self.critic;
        let gp = gradient_penalty(|x| critic.score_batch(x), &real, &fake, &u)?;
        let wass = critic.score_batch(&fake).mean(Kind::Float) - critic.score_batch(&real).mean(Kind::Float);
        let loss = &wass + &gp * self.config.critic.gp_weight;
        self.critic_opt.backward_step(&loss);
        self.critic.step += 1;
        Ok(CriticStep {
            critic_loss: finite_scalar(&loss, self.steps, "critic loss")?,
            gp: finite_scalar(&gp, self.steps, "gradient penalty")?,
        })
    }

    /// One generator update; decoder and refiner both receive gradients.
    pub fn generator_step(&mut self) -> Result<f64> {
        let (lm, lc, z) = self.latents();
        let fake = self.generator.forward_batch(&lm, &lc, &z);
        let loss = -self.critic.score_batch(&fake).mean(Kind::Float);
        self.gen_opt.backward_step(&loss);
        let v = finite_scalar(&loss, self.steps, "generator loss")?;
        self.steps += 1;
        Ok(v)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn into_models(mut self) -> (Generator, Critic) {
        let steps = self.steps;
        self.generator.mark_adversarial(steps);
        (self.generator, self.critic)
    }

    fn save(&self, dir: &std::path::Path) -> Result<()> {
        let mut gck = self.generator.checkpoint()?;
        gck.meta.model_type = ModelType::Generator;
        gck.meta.step += self.steps;
        gck.save(dir, GENERATOR_CKPT)?;
        self.critic.checkpoint()?.save(dir, CRITIC_CKPT)?;
        Ok(())
    }
}

/// Stage 2: alternate `critic_steps` critic updates with one generator
/// update, `train.steps` times. Rows of the log are per generator step.
///
/// With `checkpoint_dir` set, checkpoints are written every
/// `checkpoint_every` steps; a non-finite loss aborts the run and leaves the
/// last good checkpoint in place.
pub fn train_gan(
    generator: Generator,
    episodes: &[PreparedEpisode],
    motion: &MotionVae,
    content: &ContentVae,
    config: GanConfig,
    train: &TrainConfig,
    checkpoint_dir: Option<PathBuf>,
) -> Result<(Generator, Critic, LossLog)> {
    let every = config.checkpoint_every;
    let critic_steps = config.critic.critic_steps;
    let mut trainer = GanTrainer::new(generator, episodes, motion, content, config, train)?;
    let mut log = LossLog::new(&["critic_loss", "gen_loss", "gp"]);
    for step in 0..train.steps {
        let mut last = None;
        for _ in 0..critic_steps {
            last = Some(trainer.critic_step()?);
        }
        let c = last.expect("critic_steps >= 1");
        let g = trainer.generator_step()?;
        if train.should_log(step) {
            log.push(step, vec![c.critic_loss, g, c.gp]);
        }
        if let Some(dir) = &checkpoint_dir {
            if every > 0 && (step + 1) % every == 0 {
                trainer.save(dir)?;
            }
        }
    }
    if let Some(dir) = &checkpoint_dir {
        trainer.save(dir)?;
    }
    let (g, c) = trainer.into_models();
    Ok((g, c, log))
}
