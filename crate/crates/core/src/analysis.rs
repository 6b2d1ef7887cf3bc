//! Element-magnitude distribution of reconstructed deltas.

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::reconstruct_delta;
use crate::error::Result;
use crate::lora::LoraModel;

pub const BINS: usize = 64;
/// log10 range covered by the bins; magnitudes outside are clamped to the edge bins.
pub const LOG10_MIN: f64 = -10.0;
pub const LOG10_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MagnitudeHistogram {
    pub counts: Vec<u64>,
    pub zeros: u64,
    pub below_range: u64,
    pub above_range: u64,
    pub total: u64,
}

impl Default for MagnitudeHistogram {
    fn default() -> Self {
        Self {
            counts: vec![0; BINS],
            zeros: 0,
            below_range: 0,
            above_range: 0,
            total: 0,
        }
    }
}

impl MagnitudeHistogram {
    pub fn bin_width() -> f64 {
        (LOG10_MAX - LOG10_MIN) / BINS as f64
    }

    /// `[lo, hi)` in absolute value for bin `i`.
    pub fn bin_edges(i: usize) -> (f64, f64) {
        let w = Self::bin_width();
        (
            10f64.powf(LOG10_MIN + w * i as f64),
            10f64.powf(LOG10_MIN + w * (i + 1) as f64),
        )
    }

    pub fn add(&mut self, value: f32) {
        self.total += 1;
        let mag = f64::from(value.abs());
        if mag == 0.0 {
            self.zeros += 1;
            return;
        }
        let pos = (mag.log10() - LOG10_MIN) / Self::bin_width();
        let bin = if pos < 0.0 {
            self.below_range += 1;
            0
        } else if pos >= BINS as f64 {
            self.above_range += 1;
            BINS - 1
        } else {
            pos as usize
        };
        self.counts[bin] += 1;
    }

    pub fn merge(&mut self, other: &MagnitudeHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.zeros += other.zeros;
        self.below_range += other.below_range;
        self.above_range += other.above_range;
        self.total += other.total;
    }
}

/// Histogram over every element of every reconstructed delta in `model`.
pub fn model_histogram(model: &LoraModel, apply_lora_alpha: bool) -> Result<MagnitudeHistogram> {
    let parts = model
        .layers
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|layer| {
            let delta = reconstruct_delta(layer, apply_lora_alpha)?;
            let mut h = MagnitudeHistogram::default();
            delta.data().iter().for_each(|&v| h.add(v));
            Ok(h)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = MagnitudeHistogram::default();
    parts.iter().for_each(|h| total.merge(h));
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning() {
        let mut h = MagnitudeHistogram::default();
        for v in [0.0, 1.0, -1.0, 1e-20, 1e9] {
            h.add(v);
        }
        assert_eq!(h.total, 5);
        assert_eq!(h.zeros, 1);
        assert_eq!(h.below_range, 1);
        assert_eq!(h.above_range, 1);
        // log10(1) = 0 sits at (0 - -10) / 0.1875 = 53.33
        assert_eq!(h.counts[53], 2);
        let (lo, hi) = MagnitudeHistogram::bin_edges(53);
        assert!(lo <= 1.0 && 1.0 < hi);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
    }
}
