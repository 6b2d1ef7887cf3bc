//! Per-layer importance scoring and the layer × step selection schedule.
//!
//! For every layer present in both adapters the engine reconstructs the two
//! delta matrices, sums their `K` largest magnitudes (`K = r_c · r_s`), and
//! compares the content score against the style score multiplied by a global
//! balancing ratio γ and a step-dependent scale. The comparison is repeated
//! for every denoising step, giving one Content/Style decision per cell.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraLayer, LoraModel};
use crate::tensor::{abs_sum, matmul, topk_abs_sum, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `α·x + β`
    Linear,
    /// `(α′·x + β′) mod α`, with an exact zero mapped to `α`.
    Modular,
    /// Constant 1.
    None,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::Linear => "linear",
            ScaleMode::Modular => "modular",
            ScaleMode::None => "none",
        })
    }
}

/// What happens to a layer that only one of the two adapters provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoloPolicy {
    /// Apply the single available adapter at every step.
    #[default]
    SoloPass,
    /// Leave the layer out of the schedule.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub total_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub scale_mode: ScaleMode,
    pub alpha_prime: f64,
    pub beta_prime: f64,
    pub k_override: Option<usize>,
    pub apply_lora_alpha: bool,
    pub solo_policy: SoloPolicy,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            total_steps: 50,
            alpha: 1.5,
            beta: 0.5,
            scale_mode: ScaleMode::Linear,
            alpha_prime: 1.5,
            beta_prime: 1.3,
            k_override: None,
            apply_lora_alpha: true,
            solo_policy: SoloPolicy::SoloPass,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 2 {
            return Err(Error::Argument(format!(
                "total_steps must be at least 2, got {}",
                self.total_steps
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_prime", self.alpha_prime),
            ("beta_prime", self.beta_prime),
        ] {
            if !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be finite, got {v}")));
            }
        }
        match self.scale_mode {
            ScaleMode::Linear if self.alpha + self.beta <= 0.0 => Err(Error::Argument(format!(
                "linear scale needs alpha + beta > 0, got {} + {}",
                self.alpha, self.beta
            ))),
            ScaleMode::Modular if self.alpha <= 0.0 => Err(Error::Argument(format!(
                "modular scale needs alpha > 0, got {}",
                self.alpha
            ))),
            _ if self.k_override == Some(0) => {
                Err(Error::Argument("k_override must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Completed fraction of denoising at `step_index`: 0 at the first step, 1 at the last.
    pub fn progress(&self, step_index: usize) -> f64 {
        step_index as f64 / (self.total_steps - 1) as f64
    }
}

/// Top-K scores of one layer present in both adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub base_module: String,
    pub s_content: f64,
    pub s_style: f64,
    pub k_used: usize,
    pub rank_content: usize,
    pub rank_style: usize,
}

/// Ratio of total content magnitude to total style magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFactor {
    pub value: f64,
    pub content_total: f64,
    pub style_total: f64,
}

impl GammaFactor {
    fn from_totals(content_total: f64, style_total: f64) -> Result<Self> {
        if style_total <= 0.0 {
            return Err(Error::Degenerate(
                "style adapter has zero total magnitude over the matched layers".into(),
            ));
        }
        if content_total <= 0.0 {
            return Err(Error::Degenerate(
                "content adapter has zero total magnitude over the matched layers".into(),
            ));
        }
        Ok(Self {
            value: content_total / style_total,
            content_total,
            style_total,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Selection {
    Content,
    Style,
    /// No adapter applied (random layer-subset analysis only).
    Off,
}

impl Selection {
    pub fn symbol(self) -> &'static str {
        match self {
            Selection::Content => "C",
            Selection::Style => "S",
            Selection::Off => "O",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "C" => Some(Selection::Content),
            "S" => Some(Selection::Style),
            "O" => Some(Selection::Off),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrigin {
    Matched,
    ContentOnly,
    StyleOnly,
}

/// How the fixed-selection baseline maps the step scale to a choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedReading {
    /// Content while the scale is at most 1 (early steps), style afterwards.
    #[default]
    EarlyContent,
    /// Content while the scale exceeds 1.
    ContentAboveOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleMode {
    TopK,
    TopKNoScale,
    Fixed { reading: FixedReading },
    Random { seed: u64, p_content: f64 },
    Subset { fraction: f64, seed: u64 },
}

impl ScheduleMode {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleMode::TopK => "topk",
            ScheduleMode::TopKNoScale => "topk_no_scale",
            ScheduleMode::Fixed { .. } => "fixed",
            ScheduleMode::Random { .. } => "random",
            ScheduleMode::Subset { .. } => "subset",
        }
    }
}

/// Where a row of the grid changes from Content to Style.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchStep {
    /// Every cell is Content.
    Never,
    /// Every cell is Style.
    AlwaysStyle,
    /// Content prefix, Style suffix starting at this step.
    At(usize),
    /// Any other pattern.
    Irregular,
}

/// The (layer × step) grid of choices and everything that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSchedule {
    pub layer_order: Vec<String>,
    pub origins: Vec<LayerOrigin>,
    /// `grid[layer][step]`
    pub grid: Vec<Vec<Selection>>,
    pub params: ScheduleParams,
    pub gamma: Option<GammaFactor>,
    /// One entry per matched layer, in `layer_order` order.
    pub importances: Vec<LayerImportance>,
    pub mode: ScheduleMode,
}

impl SelectionSchedule {
    pub fn num_layers(&self) -> usize {
        self.layer_order.len()
    }

    pub fn total_steps(&self) -> usize {
        self.params.total_steps
    }

    pub fn column(&self, step: usize) -> Vec<Selection> {
        self.grid.iter().map(|row| row[step]).collect()
    }

    pub fn count(&self, which: Selection) -> usize {
        self.grid.iter().flatten().filter(|&&c| c == which).count()
    }

    pub fn importance(&self, base_module: &str) -> Option<&LayerImportance> {
        self.importances
            .iter()
            .find(|i| i.base_module == base_module)
    }

    /// Checks grid dimensions against `layer_order` and `total_steps`.
    pub fn validate(&self) -> Result<()> {
        if self.origins.len() != self.layer_order.len() || self.grid.len() != self.layer_order.len()
        {
            return Err(Error::Format(format!(
                "schedule has {} layers but {} origins and {} grid rows",
                self.layer_order.len(),
                self.origins.len(),
                self.grid.len()
            )));
        }
        if let Some((i, row)) = self
            .grid
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != self.params.total_steps)
        {
            return Err(Error::Format(format!(
                "grid row {i} has {} cells, expected {}",
                row.len(),
                self.params.total_steps
            )));
        }
        Ok(())
    }
}

/// Classifies a grid row.
pub fn switch_step(row: &[Selection]) -> SwitchStep {
    let first_style = row.iter().position(|&c| c != Selection::Content);
    match first_style {
        None => SwitchStep::Never,
        Some(i) if row[i..].iter().all(|&c| c == Selection::Style) => {
            if i == 0 {
                SwitchStep::AlwaysStyle
            } else {
                SwitchStep::At(i)
            }
        }
        Some(_) => SwitchStep::Irregular,
    }
}

/// `ΔW = up · down`, scaled by `alpha / rank` when requested and alpha is present.
pub fn reconstruct_delta(layer: &LoraLayer, apply_lora_alpha: bool) -> Result<DenseMatrix> {
    let delta = matmul(&layer.up, &layer.down, &layer.base_module)?;
    match layer.alpha {
        Some(alpha) if apply_lora_alpha => {
            let scale = f64::from(alpha) / layer.rank as f64;
            let (rows, cols) = (delta.rows(), delta.cols());
            let data = delta
                .into_data()
                .into_iter()
                .map(|v| (f64::from(v) * scale) as f32)
                .collect();
            DenseMatrix::new(rows, cols, data)
        }
        _ => Ok(delta),
    }
}

/// Default `K = r_c · r_s`, or the override, clamped to the element count.
pub fn k_for(
    rank_content: usize,
    rank_style: usize,
    elements: usize,
    k_override: Option<usize>,
) -> usize {
    k_override
        .unwrap_or_else(|| rank_content.saturating_mul(rank_style))
        .min(elements)
        .max(1)
}

struct LayerScore {
    importance: LayerImportance,
    content_mass: f64,
    style_mass: f64,
}

fn score_pair(
    content: &LoraLayer,
    style: &LoraLayer,
    params: &ScheduleParams,
) -> Result<LayerScore> {
    let dc = reconstruct_delta(content, params.apply_lora_alpha)?;
    let ds = reconstruct_delta(style, params.apply_lora_alpha)?;
    if dc.shape() != ds.shape() {
        return Err(Error::Pairing(format!(
            "layer `{}`: content delta is {:?} but style delta is {:?}",
            content.base_module,
            dc.shape(),
            ds.shape()
        )));
    }
    let k = k_for(content.rank, style.rank, dc.len(), params.k_override);
    Ok(LayerScore {
        importance: LayerImportance {
            base_module: content.base_module.clone(),
            s_content: topk_abs_sum(&dc, k)?.value(),
            s_style: topk_abs_sum(&ds, k)?.value(),
            k_used: k,
            rank_content: content.rank,
            rank_style: style.rank,
        },
        content_mass: abs_sum(&dc).value(),
        style_mass: abs_sum(&ds).value(),
    })
}

/// Top-K scores for one layer pair.
pub fn layer_importance(
    content: &LoraLayer,
    style: &LoraLayer,
    params: &ScheduleParams,
) -> Result<LayerImportance> {
    score_pair(content, style, params).map(|s| s.importance)
}

/// γ over the `matched` layers: total content magnitude over total style magnitude.
pub fn compute_gamma(
    content: &LoraModel,
    style: &LoraModel,
    matched: &[String],
    apply_lora_alpha: bool,
) -> Result<GammaFactor> {
    if matched.is_empty() {
        return Err(Error::Argument(
            "gamma needs at least one matched layer".into(),
        ));
    }
    let masses = matched
        .par_iter()
        .map(|name| {
            let (c, s) = lookup_pair(content, style, name)?;
            Ok((
                abs_sum(&reconstruct_delta(c, apply_lora_alpha)?).value(),
                abs_sum(&reconstruct_delta(s, apply_lora_alpha)?).value(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (ct, st) = masses
        .iter()
        .fold((0.0, 0.0), |(a, b), (c, s)| (a + c, b + s));
    GammaFactor::from_totals(ct, st)
}

fn lookup_pair<'a>(
    content: &'a LoraModel,
    style: &'a LoraModel,
    name: &str,
) -> Result<(&'a LoraLayer, &'a LoraLayer)> {
    match (content.get(name), style.get(name)) {
        (Some(c), Some(s)) => Ok((c, s)),
        _ => Err(Error::Pairing(format!(
            "layer `{name}` is not present in both adapters"
        ))),
    }
}

/// Step multiplier applied to the style score.
pub fn scale_at(step_index: usize, params: &ScheduleParams) -> f64 {
    let x = params.progress(step_index);
    match params.scale_mode {
        ScaleMode::Linear => params.alpha * x + params.beta,
        ScaleMode::Modular => {
            let s = (params.alpha_prime * x + params.beta_prime) % params.alpha;
            if s == 0.0 {
                params.alpha
            } else {
                s
            }
        }
        ScaleMode::None => 1.0,
    }
}

/// `S_s · γ · scale`
pub fn effective_style_score(imp: &LayerImportance, gamma: &GammaFactor, scale: f64) -> f64 {
    imp.s_style * gamma.value * scale
}

/// Content wins ties.
pub fn select_layer(s_content: f64, s_style_effective: f64) -> Selection {
    if s_content >= s_style_effective {
        Selection::Content
    } else {
        Selection::Style
    }
}

fn matched_layers(content: &LoraModel, style: &LoraModel) -> Result<Vec<String>> {
    let matched: Vec<String> = content
        .layers
        .keys()
        .filter(|k| style.layers.contains_key(*k))
        .cloned()
        .collect();
    if matched.is_empty() {
        return Err(Error::Pairing(format!(
            "no layer is shared by the two adapters; content has [{}], style has [{}]",
            preview_keys(content),
            preview_keys(style)
        )));
    }
    Ok(matched)
}

fn preview_keys(model: &LoraModel) -> String {
    const SHOWN: usize = 8;
    let mut s = model
        .layers
        .keys()
        .take(SHOWN)
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(", ");
    if model.len() > SHOWN {
        s.push_str(&format!(", ... ({} total)", model.len()));
    }
    s
}

/// Layer order plus origin: content order first, then style-only layers.
fn layer_plan(
    content: &LoraModel,
    style: &LoraModel,
    policy: SoloPolicy,
) -> Vec<(String, LayerOrigin)> {
    let mut plan = Vec::new();
    for name in content.layers.keys() {
        if style.layers.contains_key(name) {
            plan.push((name.clone(), LayerOrigin::Matched));
        } else if policy == SoloPolicy::SoloPass {
            plan.push((name.clone(), LayerOrigin::ContentOnly));
        }
    }
    if policy == SoloPolicy::SoloPass {
        for name in style.layers.keys() {
            if !content.layers.contains_key(name) {
                plan.push((name.clone(), LayerOrigin::StyleOnly));
            }
        }
    }
    plan
}

fn topk_schedule(
    content: &LoraModel,
    style: &LoraModel,
    params: &ScheduleParams,
    use_scale: bool,
) -> Result<SelectionSchedule> {
    params.validate()?;
    let matched = matched_layers(content, style)?;
    let scores = matched
        .par_iter()
        .map(|name| {
            let (c, s) = lookup_pair(content, style, name)?;
            score_pair(c, s, params)
        })
        .collect::<Result<Vec<_>>>()?;
    let (ct, st) = scores.iter().fold((0.0, 0.0), |(a, b), s| {
        (a + s.content_mass, b + s.style_mass)
    });
    let gamma = GammaFactor::from_totals(ct, st)?;

    let (balance, scales): (GammaFactor, Vec<f64>) = if use_scale {
        (
            gamma,
            (0..params.total_steps)
                .map(|t| scale_at(t, params))
                .collect(),
        )
    } else {
        let unit = GammaFactor {
            value: 1.0,
            ..gamma
        };
        (unit, vec![1.0; params.total_steps])
    };

    let plan = layer_plan(content, style, params.solo_policy);
    let mut importances = Vec::with_capacity(scores.len());
    let mut grid = Vec::with_capacity(plan.len());
    let mut score_iter = scores.into_iter();
    for (_, origin) in &plan {
        let row = match origin {
            LayerOrigin::Matched => {
                let imp = score_iter
                    .next()
                    .expect("one score per matched layer")
                    .importance;
                let row = scales
                    .iter()
                    .map(|&scale| {
                        select_layer(imp.s_content, effective_style_score(&imp, &balance, scale))
                    })
                    .collect();
                importances.push(imp);
                row
            }
            LayerOrigin::ContentOnly => vec![Selection::Content; params.total_steps],
            LayerOrigin::StyleOnly => vec![Selection::Style; params.total_steps],
        };
        grid.push(row);
    }

    let (layer_order, origins) = plan.into_iter().unzip();
    Ok(SelectionSchedule {
        layer_order,
        origins,
        grid,
        params: params.clone(),
        gamma: Some(gamma),
        importances,
        mode: if use_scale {
            ScheduleMode::TopK
        } else {
            ScheduleMode::TopKNoScale
        },
    })
}

/// The full Top-K schedule: γ once, importance once per matched layer, one decision per cell.
pub fn build_schedule(
    content: &LoraModel,
    style: &LoraModel,
    params: &ScheduleParams,
) -> Result<SelectionSchedule> {
    topk_schedule(content, style, params, true)
}

/// Plain Top-K comparison `S_c ≥ S_s` with neither the step scale nor γ.
///
/// γ is still computed and recorded for reporting.
pub fn build_topk_no_scale_schedule(
    content: &LoraModel,
    style: &LoraModel,
    params: &ScheduleParams,
) -> Result<SelectionSchedule> {
    topk_schedule(content, style, params, false)
}

/// One Top-K schedule per `K`, everything else unchanged.
pub fn k_sweep(
    content: &LoraModel,
    style: &LoraModel,
    params: &ScheduleParams,
    k_values: &[usize],
) -> Result<Vec<(usize, SelectionSchedule)>> {
    if k_values.is_empty() {
        return Err(Error::Argument("k sweep needs at least one k".into()));
    }
    k_values
        .iter()
        .map(|&k| {
            let p = ScheduleParams {
                k_override: Some(k),
                ..params.clone()
            };
            build_schedule(content, style, &p).map(|s| (k, s))
        })
        .collect()
}
