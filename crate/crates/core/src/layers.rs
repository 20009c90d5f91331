//! Strided convolutional encoder/decoder stacks shared by every network.

use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Tensor};

use crate::error::{Error, Result};

/// Channel widths of a stack of stride-2, kernel-4 convolutions.
///
/// Each layer halves every spatial (and, for 3D stacks, temporal) dimension,
/// so input extents must be divisible by `2^channels.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConvSpec {
    pub channels: Vec<i64>,
}

impl ConvSpec {
    pub fn new(channels: &[i64]) -> Self {
        Self {
            channels: channels.to_vec(),
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self, extents: &[usize]) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|c| *c < 1) {
            return Err(Error::Config(format!("bad channel spec {:?}", self.channels)));
        }
        let factor = 1usize << self.depth();
        for e in extents {
            if *e % factor != 0 || *e < factor {
                return Err(Error::Config(format!(
                    "extent {e} not divisible by 2^{} required by a {}-layer stack",
                    self.depth(),
                    self.depth()
                )));
            }
        }
        Ok(())
    }

    /// Extents after the full stack of downsampling layers.
    pub fn reduced(&self, extents: &[usize]) -> Vec<i64> {
        extents
            .iter()
            .map(|e| (*e >> self.depth()) as i64)
            .collect()
    }
}

fn conv_cfg() -> nn::ConvConfig {
    nn::ConvConfig {
        stride: 2,
        padding: 1,
        ..Default::default()
    }
}

fn conv_t_cfg() -> nn::ConvTransposeConfig {
    nn::ConvTransposeConfig {
        stride: 2,
        padding: 1,
        ..Default::default()
    }
}

/// Convolutions followed by a linear projection to `out_dim` features
/// (twice that when `variational`, for mean and log-variance).
#[derive(Debug)]
pub struct ConvEncoder {
    convs: Vec<Box<dyn Module>>,
    head: nn::Linear,
    out_dim: i64,
}

impl ConvEncoder {
    /// `extents` are the spatial(-temporal) input sizes: `[h, w]` or `[n, h, w]`.
    pub fn new(
        p: &nn::Path,
        in_channels: i64,
        extents: &[usize],
        spec: &ConvSpec,
        out_dim: i64,
        variational: bool,
    ) -> Self {
        let mut convs: Vec<Box<dyn Module>> = Vec::new();
        let mut c_in = in_channels;
        for (i, &c) in spec.channels.iter().enumerate() {
            let path = p / format!("conv{i}");
            let layer: Box<dyn Module> = if extents.len() == 3 {
                Box::new(nn::conv3d(path, c_in, c, 4, conv_cfg()))
            } else {
                Box::new(nn::conv2d(path, c_in, c, 4, conv_cfg()))
            };
            convs.push(layer);
            c_in = c;
        }
        let flat = c_in * spec.reduced(extents).iter().product::<i64>();
        let head_dim = if variational { 2 * out_dim } else { out_dim };
        let head = nn::linear(p / "head", flat, head_dim, Default::default());
        Self {
            convs,
            head,
            out_dim,
        }
    }

    pub fn features(&self, xs: &Tensor) -> Tensor {
        let mut h = xs.shallow_clone();
        for conv in &self.convs {
            h = conv.forward(&h).leaky_relu();
        }
        h.flatten(1, -1).apply(&self.head)
    }

    /// Split the head output into (mean, log-variance).
    pub fn encode(&self, xs: &Tensor) -> (Tensor, Tensor) {
        let out = self.features(xs);
        let mean = out.narrow(1, 0, self.out_dim);
        let logvar = out.narrow(1, self.out_dim, self.out_dim).clamp(-10.0, 10.0);
        (mean, logvar)
    }
}

/// Linear projection to a small feature volume followed by transposed
/// convolutions back to the input resolution. Returns logits.
#[derive(Debug)]
pub struct ConvDecoder {
    stem: nn::Linear,
    deconvs: Vec<Box<dyn Module>>,
    seed_shape: Vec<i64>,
}

impl ConvDecoder {
    pub fn new(p: &nn::Path, in_dim: i64, out_channels: i64, extents: &[usize], spec: &ConvSpec) -> Self {
        let reduced = spec.reduced(extents);
        let top = *spec.channels.last().expect("validated spec");
        let mut seed_shape = vec![top];
        seed_shape.extend(&reduced);
        let stem = nn::linear(p / "stem", in_dim, seed_shape.iter().product(), Default::default());
        let mut widths: Vec<i64> = spec.channels.iter().rev().copied().collect();
        widths.push(out_channels);
        let deconvs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let path = p / format!("deconv{i}");
                let layer: Box<dyn Module> = if extents.len() == 3 {
                    Box::new(nn::conv_transpose3d(path, w[0], w[1], 4, conv_t_cfg()))
                } else {
                    Box::new(nn::conv_transpose2d(path, w[0], w[1], 4, conv_t_cfg()))
                };
                layer
            })
            .collect();
        Self {
            stem,
            deconvs,
            seed_shape,
        }
    }

    pub fn logits(&self, zs: &Tensor) -> Tensor {
        let batch = zs.size()[0];
        let mut shape = vec![batch];
        shape.extend(&self.seed_shape);
        let mut h = zs.apply(&self.stem).relu().view(shape.as_slice());
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            h = d.forward(&h);
            if i < last {
                h = h.relu();
            }
        }
        h
    }
}

/// Reparameterized sample `mean + exp(logvar/2) * eps`.
pub fn reparameterize(mean: &Tensor, logvar: &Tensor, eps: &Tensor) -> Tensor {
    mean + (logvar * 0.5).exp() * eps
}

/// KL divergence to the standard normal, averaged over latent dimensions and batch.
pub fn kl_standard_normal(mean: &Tensor, logvar: &Tensor) -> Tensor {
    let per = (logvar.exp() + mean.square() - 1.0 - logvar) * 0.5;
    per.mean(tch::Kind::Float)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn encoder_decoder_shapes_3d() {
        let vs = nn::VarStore::new(Device::Cpu);
        let spec = ConvSpec::new(&[4, 8]);
        spec.validate(&[8, 16, 16]).unwrap();
        let enc = ConvEncoder::new(&(vs.root() / "e"), 1, &[8, 16, 16], &spec, 5, true);
        let dec = ConvDecoder::new(&(vs.root() / "d"), 5, 1, &[8, 16, 16], &spec);
        let x = Tensor::zeros([2, 1, 8, 16, 16], (Kind::Float, Device::Cpu));
        let (m, lv) = enc.encode(&x);
        assert_eq!(m.size(), vec![2, 5]);
        assert_eq!(lv.size(), vec![2, 5]);
        assert_eq!(dec.logits(&m).size(), vec![2, 1, 8, 16, 16]);
    }

    #[test]
    fn spec_rejects_indivisible_extents() {
        assert!(ConvSpec::new(&[4, 8, 16]).validate(&[12, 64, 64]).is_err());
        assert!(ConvSpec::new(&[]).validate(&[8]).is_err());
    }

    #[test]
    fn kl_zero_at_standard_normal() {
        let m = Tensor::zeros([3, 4], (Kind::Float, Device::Cpu));
        let kl = kl_standard_normal(&m, &m);
        assert_eq!(kl.double_value(&[]), 0.0);
    }
}
