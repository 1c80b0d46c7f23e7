//! The continuous relaxation of the code space and the complexity penalty.

use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::unet::{ArchCode, StageSpec};
use crate::{EnsError, Result};

/// Per-stage option table the search runs over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Block counts of option `z` per stage; option 0 is the teacher.
    pub blocks: Vec<Vec<usize>>,
}

impl SearchSpace {
    pub fn from_specs(specs: &[StageSpec]) -> Self {
        SearchSpace {
            blocks: specs
                .iter()
                .map(|s| std::iter::once(s.teacher_blocks).chain(s.surrogate_blocks.iter().copied()).collect())
                .collect(),
        }
    }

    /// The same space with every stage outside `active` pinned to its
    /// teacher option.
    pub fn restricted(&self, active: &[usize]) -> Self {
        SearchSpace {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| if active.contains(&i) { b.clone() } else { vec![b[0]] })
                .collect(),
        }
    }

    pub fn dims(&self) -> usize {
        self.blocks.len()
    }

    pub fn options(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn size(&self) -> usize {
        self.blocks.iter().map(Vec::len).product()
    }

    /// Equal-width binning: `z_i = min(floor(x_i K_i), K_i - 1)`.
    pub fn decode(&self, x: &[f64]) -> Result<ArchCode> {
        if x.len() != self.dims() {
            return Err(EnsError::Contract(format!("point has {} components, expected {}", x.len(), self.dims())));
        }
        if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EnsError::Contract(format!("point component {bad} outside [0, 1]")));
        }
        Ok(ArchCode(
            x.iter()
                .zip(&self.blocks)
                .map(|(&v, b)| ((v * b.len() as f64).floor() as usize).min(b.len() - 1))
                .collect(),
        ))
    }

    /// Center of the bin holding `code`.
    pub fn encode_center(&self, code: &ArchCode) -> Vec<f64> {
        code.0
            .iter()
            .zip(&self.blocks)
            .map(|(&z, b)| (z as f64 + 0.5) / b.len() as f64)
            .collect()
    }

    pub fn penalty(&self, code: &ArchCode, weights: &PenaltyWeights) -> Result<f64> {
        weights.validate()?;
        if code.0.len() != self.dims() || code.0.iter().zip(&self.blocks).any(|(&z, b)| z >= b.len()) {
            return Err(EnsError::Contract(format!("code {code} is outside the search space")));
        }
        Ok(code
            .0
            .iter()
            .zip(&self.blocks)
            .map(|(&z, b)| {
                let w = if z == 0 { weights.teacher } else { weights.surrogate };
                w * b[z] as f64
            })
            .sum())
    }
}

/// Cost per teacher block and per surrogate block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyWeights {
    pub teacher: f64,
    pub surrogate: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            teacher: 3.0,
            surrogate: 1.0,
        }
    }
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.surrogate > 0.0 && self.teacher > self.surrogate && self.teacher.is_finite()) {
            return Err(EnsError::config(format!(
                "penalty weights need teacher > surrogate > 0, got {} and {}",
                self.teacher, self.surrogate
            )));
        }
        Ok(())
    }
}

impl PenaltyWeights {
    /// Penalty of an arbitrary per-stage block layout, such as the
    /// equal-split hybrids that no code describes. Agrees with
    /// [`SearchSpace::penalty`] on layouts a code produces.
    pub fn of_kinds(&self, kinds: &[Vec<BlockKind>]) -> f64 {
        kinds
            .iter()
            .flatten()
            .map(|k| match k {
                BlockKind::Teacher => self.teacher,
                BlockKind::Surrogate => self.surrogate,
            })
            .sum()
    }
}
