use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Motion,
    Content,
    Noise,
}

/// A fixed-length latent vector tagged with what it encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    kind: LatentKind,
    values: Vec<f32>,
}

impl LatentCode {
    pub fn new(kind: LatentKind, values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension(format!("{kind:?} latent is empty")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{kind:?} latent contains NaN/Inf")));
        }
        Ok(Self { kind, values })
    }

    pub fn zeros(kind: LatentKind, dim: usize) -> Self {
        Self {
            kind,
            values: vec![0.0; dim.max(1)],
        }
    }

    pub fn kind(&self) -> LatentKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn expect(&self, kind: LatentKind, dim: usize) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Validation(format!(
                "expected a {kind:?} latent, got {:?}",
                self.kind
            )));
        }
        if self.values.len() != dim {
            return Err(Error::Dimension(format!(
                "{kind:?} latent has length {}, model expects {dim}",
                self.values.len()
            )));
        }
        Ok(())
    }

    /// A `(1, dim)` float tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.values).view([1, -1])
    }

    /// Split a `(batch, dim)` tensor into one code per row.
    pub fn from_batch(kind: LatentKind, t: &Tensor) -> Result<Vec<Self>> {
        let t = t.to_kind(Kind::Float).contiguous();
        let rows = t.size()[0];
        (0..rows)
            .map(|i| Self::new(kind, Vec::<f32>::try_from(&t.get(i))?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(LatentCode::new(LatentKind::Noise, vec![0.0, f32::NAN]).is_err());
        assert!(LatentCode::new(LatentKind::Noise, vec![]).is_err());
    }

    #[test]
    fn kind_and_length_checked() {
        let c = LatentCode::zeros(LatentKind::Content, 4);
        assert!(c.expect(LatentKind::Content, 4).is_ok());
        assert!(c.expect(LatentKind::Motion, 4).is_err());
        assert!(c.expect(LatentKind::Content, 5).is_err());
    }
}
