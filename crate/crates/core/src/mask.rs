//! Mask sampling.

use crate::error::{PacoError, Result};
use crate::rng::Rng;
use rand::seq::index::sample;

/// The sampled subset of patch positions to substitute.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// Sorted, duplicate-free positions in [0, K).
    pub positions: Vec<usize>,
    pub ratio: f64,
    pub num_patches: usize,
}

impl MaskSet {
    /// Build a mask from explicit positions (sorted and deduplicated here).
    pub fn from_positions(mut positions: Vec<usize>, num_patches: usize) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if positions.last().is_some_and(|&p| p >= num_patches) {
            return Err(PacoError::arg("mask position out of range"));
        }
        let ratio = if num_patches == 0 {
            0.0
        } else {
            positions.len() as f64 / num_patches as f64
        };
        Ok(MaskSet {
            positions,
            ratio,
            num_patches,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.positions.binary_search(&position).is_ok()
    }
}

/// Round half-up; decides mask cardinality from the ratio.
pub fn mask_cardinality(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64).round() as usize
}

/// Sample `round(ratio * K)` positions uniformly without replacement.
pub fn sample_mask(num_patches: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PacoError::arg(format!("mask ratio {ratio} outside [0,1]")));
    }
    let count = mask_cardinality(num_patches, ratio);
    let mut positions: Vec<usize> = sample(rng, num_patches, count).into_iter().collect();
    positions.sort_unstable();
    Ok(MaskSet {
        positions,
        ratio,
        num_patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    #[test]
    fn vit_b16_mask_cardinality() {
        // K=196 at 75% masks exactly 147 positions.
        let mut rng = seed_rng(0);
        let m = sample_mask(196, 0.75, &mut rng).unwrap();
        assert_eq!(m.len(), 147);
    }

    #[test]
    fn boundary_ratios() {
        let mut rng = seed_rng(1);
        assert!(sample_mask(10, 0.0, &mut rng).unwrap().is_empty());
        let full = sample_mask(10, 1.0, &mut rng).unwrap();
        assert_eq!(full.positions, (0..10).collect::<Vec<_>>());
        assert!(sample_mask(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_mask() {
        let a = sample_mask(64, 0.75, &mut seed_rng(42)).unwrap();
        let b = sample_mask(64, 0.75, &mut seed_rng(42)).unwrap();
        assert_eq!(a, b);
        let c = sample_mask(64, 0.75, &mut seed_rng(43)).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn empirical_frequency_is_uniform() {
        // K=4 at ratio 0.5 over 10k draws: each position near 0.5.
        let mut rng = seed_rng(7);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let m = sample_mask(4, 0.5, &mut rng).unwrap();
            assert_eq!(m.len(), 2);
            for &p in &m.positions {
                counts[p] += 1;
            }
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "freq {freq} off uniform");
        }
    }
}
