//! Co-visibility: how many training frames observe each test pixel, and the
//! thresholded mask that restricts evaluation to adequately seen regions.

use rayon::prelude::*;
use thiserror::Error;

use crate::flow::{occlusion_mask, FlowError, FlowField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovisError {
    #[error("co-visibility needs at least one training flow pair")]
    Empty,
    #[error("flow pair {index} is {got_w}x{got_h}, expected {width}x{height}")]
    DimensionMismatch { index: usize, width: usize, height: usize, got_w: usize, got_h: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Per-pixel count of training frames in which the test pixel is visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovisibilityHeatmap {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
    pub n_train: u32,
}

/// Evaluation mask, `true` where a pixel was seen at least `beta` times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovisibilityMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub beta: u32,
}

impl CovisibilityMask {
    /// Mask selecting every pixel.
    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height], beta: 0 }
    }

    pub fn from_bools(width: usize, height: usize, data: Vec<bool>) -> Option<Self> {
        (data.len() == width * height).then_some(Self { width, height, data, beta: 0 })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// `β = max(min, ⌈frac·N⌉)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaRule {
    pub min: u32,
    pub frac: f64,
}

impl Default for BetaRule {
    fn default() -> Self {
        Self { min: 5, frac: 0.1 }
    }
}

impl BetaRule {
    pub fn beta(&self, n_train: u32) -> u32 {
        let x = self.frac * n_train as f64;
        // 0.1·70 evaluates to 7.000000000000001; treat near-integers as integers
        let r = x.round();
        let c = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) { r } else { x.ceil() };
        self.min.max(c.max(0.0) as u32)
    }
}

/// Sums visibility over training frames. Each entry is the test→train
/// forward flow and the train→test backward flow.
pub fn covisibility_heatmap(test_to_train: &[(FlowField, FlowField)]) -> Result<CovisibilityHeatmap, CovisError> {
    let (first, _) = test_to_train.first().ok_or(CovisError::Empty)?;
    let (w, h) = (first.width, first.height);
    for (index, (f, b)) in test_to_train.iter().enumerate() {
        for (gw, gh) in [(f.width, f.height), (b.width, b.height)] {
            if (gw, gh) != (w, h) {
                return Err(CovisError::DimensionMismatch { index, width: w, height: h, got_w: gw, got_h: gh });
            }
        }
    }
    let masks = test_to_train
        .par_iter()
        .map(|(f, b)| occlusion_mask(f, b))
        .collect::<Result<Vec<_>, _>>()?;
    let mut counts = vec![0u32; w * h];
    for m in &masks {
        for (c, &occ) in counts.iter_mut().zip(&m.data) {
            *c += u32::from(!occ);
        }
    }
    Ok(CovisibilityHeatmap { width: w, height: h, counts, n_train: test_to_train.len() as u32 })
}

pub fn covisibility_mask(h: &CovisibilityHeatmap, rule: &BetaRule) -> CovisibilityMask {
    let beta = rule.beta(h.n_train);
    CovisibilityMask {
        width: h.width,
        height: h.height,
        data: h.counts.iter().map(|&c| c >= beta).collect(),
        beta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;
    use proptest::prelude::*;

    #[test]
    fn beta_table() {
        let r = BetaRule::default();
        assert_eq!(r.beta(30), 5);
        assert_eq!(r.beta(50), 5);
        assert_eq!(r.beta(200), 20);
        assert_eq!(r.beta(70), 7);
        assert_eq!(r.beta(51), 6);
        assert_eq!(r.beta(1), 5);
    }

    proptest! {
        #[test]
        fn beta_properties(n in 1u32..100_000) {
            let b = BetaRule::default().beta(n);
            prop_assert!(b >= 5);
            if n >= 50 && n % 10 == 0 {
                prop_assert_eq!(b, n / 10);
            }
            prop_assert!(b as f64 >= 0.1 * n as f64 - 1e-9);
        }

        #[test]
        fn mask_is_monotone_in_counts(counts in proptest::collection::vec(0u32..60, 16), bump in 0usize..16, n in 1u32..60) {
            let counts: Vec<u32> = counts.into_iter().map(|c| c.min(n)).collect();
            let h = CovisibilityHeatmap { width: 4, height: 4, counts: counts.clone(), n_train: n };
            let m = covisibility_mask(&h, &BetaRule::default());
            let mut raised = counts;
            raised[bump] = (raised[bump] + 1).min(n);
            let m2 = covisibility_mask(&CovisibilityHeatmap { counts: raised, ..h }, &BetaRule::default());
            for i in 0..16 {
                prop_assert!(!m.data[i] || m2.data[i]);
            }
        }
    }

    #[test]
    fn static_frames_saturate() {
        let z = FlowField::constant(6, 4, Vector2::zeros());
        let pairs = vec![(z.clone(), z); 12];
        let h = covisibility_heatmap(&pairs).unwrap();
        assert!(h.counts.iter().all(|&c| c == 12));
        assert_eq!(h.n_train, 12);
        let m = covisibility_mask(&h, &BetaRule::default());
        assert_eq!(m.count(), 24);
        assert_eq!(m.beta, 5);
    }

    #[test]
    fn fully_occluded_is_zero() {
        let f = FlowField::constant(6, 4, Vector2::new(100.0, 0.0));
        let pairs = vec![(f.clone(), f); 3];
        let h = covisibility_heatmap(&pairs).unwrap();
        assert!(h.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn one_consistent_one_inconsistent() {
        let z = FlowField::constant(6, 4, Vector2::zeros());
        let mut bad = z.clone();
        bad.data[6 + 2] = Vector2::new(2.0, 0.0); // |f+b|² = 4 ≥ 0.01·4 + 0.5
        let h = covisibility_heatmap(&[(z.clone(), z.clone()), (bad, z)]).unwrap();
        assert_eq!(h.counts[6 + 2], 1);
        assert_eq!(h.counts[0], 2);
    }

    #[test]
    fn errors() {
        assert_eq!(covisibility_heatmap(&[]), Err(CovisError::Empty));
        let a = FlowField::constant(6, 4, Vector2::zeros());
        let b = FlowField::constant(5, 4, Vector2::zeros());
        assert!(matches!(covisibility_heatmap(&[(a.clone(), a.clone()), (b.clone(), b)]), Err(CovisError::DimensionMismatch { index: 1, .. })));
    }
}
