//! Baseline schedules that ignore weight magnitudes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{
    scale_at, FixedReading, LayerOrigin, ScheduleMode, ScheduleParams, Selection, SelectionSchedule,
};
use crate::error::{Error, Result};

fn weightless(
    params: &ScheduleParams,
    layers: &[String],
    grid: Vec<Vec<Selection>>,
    mode: ScheduleMode,
) -> SelectionSchedule {
    SelectionSchedule {
        layer_order: layers.to_vec(),
        origins: vec![LayerOrigin::Matched; layers.len()],
        grid,
        params: params.clone(),
        gamma: None,
        importances: Vec::new(),
        mode,
    }
}

/// Every layer takes the same choice per step, decided by the step scale alone.
pub fn build_fixed_schedule(
    params: &ScheduleParams,
    layers: &[String],
    reading: FixedReading,
) -> Result<SelectionSchedule> {
    params.validate()?;
    let column: Vec<Selection> = (0..params.total_steps)
        .map(|t| {
            let above_one = scale_at(t, params) > 1.0;
            let content = match reading {
                FixedReading::EarlyContent => !above_one,
                FixedReading::ContentAboveOne => above_one,
            };
            if content {
                Selection::Content
            } else {
                Selection::Style
            }
        })
        .collect();
    let grid = vec![column; layers.len()];
    Ok(weightless(
        params,
        layers,
        grid,
        ScheduleMode::Fixed { reading },
    ))
}

/// Independent draws per cell, layer-major then step order.
pub fn build_random_schedule(
    params: &ScheduleParams,
    layers: &[String],
    seed: u64,
    p_content: f64,
) -> Result<SelectionSchedule> {
    params.validate()?;
    if !(0.0..=1.0).contains(&p_content) {
        return Err(Error::Argument(format!(
            "p_content must lie in [0, 1], got {p_content}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = layers
        .iter()
        .map(|_| {
            (0..params.total_steps)
                .map(|_| {
                    if rng.gen_bool(p_content) {
                        Selection::Content
                    } else {
                        Selection::Style
                    }
                })
                .collect()
        })
        .collect();
    Ok(weightless(
        params,
        layers,
        grid,
        ScheduleMode::Random { seed, p_content },
    ))
}

/// Number of active layers per step: `⌈fraction · L⌉`.
///
/// A tolerance of 1e-9 absorbs products such as `0.3 · 10 = 3.0000000000000004`.
pub fn subset_size(fraction: f64, layers: usize) -> usize {
    let exact = fraction * layers as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(layers)
}

/// Single-adapter analysis: per step a random `⌈fraction · L⌉` subset of layers
/// is active (`Content`), the rest `Off`.
pub fn build_subset_schedule(
    params: &ScheduleParams,
    layers: &[String],
    fraction: f64,
    seed: u64,
) -> Result<SelectionSchedule> {
    params.validate()?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!(
            "fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let n = layers.len();
    let active = subset_size(fraction, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![vec![Selection::Off; params.total_steps]; n];
    #[allow(clippy::needless_range_loop)]
    for t in 0..params.total_steps {
        for layer in sample(&mut rng, n, active) {
            grid[layer][t] = Selection::Content;
        }
    }
    Ok(weightless(
        params,
        layers,
        grid,
        ScheduleMode::Subset { fraction, seed },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ScaleMode;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("layer{i}")).collect()
    }

    fn params(alpha: f64, beta: f64) -> ScheduleParams {
        ScheduleParams {
            alpha,
            beta,
            ..Default::default()
        }
    }

    #[test]
    fn fixed_threshold_at_one_third() {
        let s =
            build_fixed_schedule(&params(1.5, 0.5), &names(3), FixedReading::EarlyContent).unwrap();
        for row in &s.grid {
            assert!(row[..17].iter().all(|&c| c == Selection::Content));
            assert!(row[17..].iter().all(|&c| c == Selection::Style));
        }
        let lit = build_fixed_schedule(&params(1.5, 0.5), &names(1), FixedReading::ContentAboveOne)
            .unwrap();
        assert_eq!(lit.grid[0][0], Selection::Style);
        assert_eq!(lit.grid[0][49], Selection::Content);
    }

    #[test]
    fn fixed_constant_scales() {
        let all_style =
            build_fixed_schedule(&params(0.0, 1.5), &names(4), FixedReading::EarlyContent).unwrap();
        assert_eq!(all_style.count(Selection::Style), 4 * 50);
        let all_content =
            build_fixed_schedule(&params(0.0, 0.5), &names(4), FixedReading::EarlyContent).unwrap();
        assert_eq!(all_content.count(Selection::Content), 4 * 50);
    }

    #[test]
    fn random_degenerate_probabilities_and_determinism() {
        let p = ScheduleParams::default();
        let all_c = build_random_schedule(&p, &names(5), 1, 1.0).unwrap();
        assert_eq!(all_c.count(Selection::Content), 250);
        let all_s = build_random_schedule(&p, &names(5), 1, 0.0).unwrap();
        assert_eq!(all_s.count(Selection::Style), 250);
        let a = build_random_schedule(&p, &names(5), 42, 1.0 / 3.0).unwrap();
        let b = build_random_schedule(&p, &names(5), 42, 1.0 / 3.0).unwrap();
        assert_eq!(a, b);
        let c = build_random_schedule(&p, &names(5), 43, 1.0 / 3.0).unwrap();
        assert_ne!(a.grid, c.grid);
        assert!(build_random_schedule(&p, &names(5), 1, 1.5).is_err());
    }

    #[test]
    fn subset_cardinality() {
        let p = ScheduleParams::default();
        for (fraction, expected) in [(1.0, 10), (0.0, 0), (0.5, 5), (0.3, 3), (0.31, 4)] {
            let s = build_subset_schedule(&p, &names(10), fraction, 9).unwrap();
            for t in 0..p.total_steps {
                let active = s
                    .column(t)
                    .iter()
                    .filter(|&&c| c == Selection::Content)
                    .count();
                assert_eq!(active, expected, "fraction {fraction}");
            }
        }
        assert!(build_subset_schedule(&p, &names(3), -0.1, 0).is_err());
    }

    #[test]
    fn fixed_with_unit_scale_is_all_content() {
        let p = ScheduleParams {
            scale_mode: ScaleMode::None,
            ..Default::default()
        };
        let s = build_fixed_schedule(&p, &names(1), FixedReading::EarlyContent).unwrap();
        assert_eq!(s.count(Selection::Content), 50);
    }
}
