use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::SeedKey;

/// Partition of patch indices into visible and masked sets, both sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from an explicit masked set.
    pub fn from_masked(n: usize, masked: &[usize]) -> Result<Self, ModelError> {
        let mut flags = vec![false; n];
        for &i in masked {
            if i >= n || flags[i] {
                return Err(ModelError::Mask(format!("index {i} repeated or outside 0..{n}")));
            }
            flags[i] = true;
        }
        let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| flags[i]);
        Ok(MaskPlan { visible, masked })
    }

    pub fn fully_visible(n: usize) -> Self {
        MaskPlan {
            visible: (0..n).collect(),
            masked: Vec::new(),
        }
    }

    pub fn fully_masked(n: usize) -> Self {
        MaskPlan {
            visible: Vec::new(),
            masked: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Masks `floor(ratio * n)` patches; ratios 0 and 1 are allowed here.
    pub fn with_ratio(n: usize, ratio: f64, seed: u64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(ModelError::Mask(format!("ratio {ratio} outside [0, 1]")));
        }
        let k = (ratio * n as f64).floor() as usize;
        let mut rng = SeedKey::new(seed).named("mask").rng();
        let masked = index::sample(&mut rng, n, k).into_vec();
        Self::from_masked(n, &masked)
    }
}

/// Uniform random subset of `floor(ratio * n)` masked patches.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan, ModelError> {
    if n < 2 {
        return Err(ModelError::Mask(format!("need at least 2 patches, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ModelError::Mask(format!("ratio {ratio} outside (0, 1)")));
    }
    MaskPlan::with_ratio(n, ratio, seed)
}
