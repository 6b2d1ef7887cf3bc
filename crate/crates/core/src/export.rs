//! Per-step merged checkpoints and schedule heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::engine::{Selection, SelectionSchedule};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::lora::LoraModel;
use crate::safetensors::{serialize_container, TensorPayload};

/// Tensors active at `step`, copied from whichever adapter the grid selects.
///
/// Factors are re-encoded in their original dtype and layout, so each output
/// tensor is byte-identical to its source. Names follow the content
/// adapter's convention; `Off` cells are omitted.
pub fn merged_tensors(
    content: &LoraModel,
    style: &LoraModel,
    schedule: &SelectionSchedule,
    step: usize,
) -> Result<Vec<TensorPayload>> {
    if step >= schedule.total_steps() {
        return Err(Error::Argument(format!(
            "step {step} is outside [0, {})",
            schedule.total_steps()
        )));
    }
    let mut out = Vec::new();
    for (name, row) in schedule.layer_order.iter().zip(&schedule.grid) {
        let (source, label) = match row[step] {
            Selection::Content => (content, "content"),
            Selection::Style => (style, "style"),
            Selection::Off => continue,
        };
        let layer = source.get(name).ok_or_else(|| {
            Error::Pairing(format!(
                "schedule selects the {label} adapter for `{name}`, which it does not contain"
            ))
        })?;
        out.extend(layer.payloads(content.naming_convention));
    }
    Ok(out)
}

pub fn export_merged_lora(
    content: &LoraModel,
    style: &LoraModel,
    schedule: &SelectionSchedule,
    step: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let tensors = merged_tensors(content, style, schedule, step)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("klora.step".to_string(), step.to_string());
    metadata.insert(
        "klora.total_steps".to_string(),
        schedule.total_steps().to_string(),
    );
    let bytes = serialize_container(&tensors, &metadata)?;
    fsutil::write_atomic(path.as_ref(), &bytes)
}

/// Step 0 plus every step whose column differs from the previous one.
pub fn boundary_steps(schedule: &SelectionSchedule) -> Vec<usize> {
    (0..schedule.total_steps())
        .filter(|&t| t == 0 || schedule.grid.iter().any(|row| row[t] != row[t - 1]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Svg,
    Ppm,
}

impl FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svg" => Ok(HeatmapFormat::Svg),
            "ppm" => Ok(HeatmapFormat::Ppm),
            other => Err(Error::Argument(format!("unknown heatmap format `{other}`"))),
        }
    }
}

pub const CONTENT_RGB: [u8; 3] = [0x3B, 0x6F, 0xB5];
pub const STYLE_RGB: [u8; 3] = [0x4C, 0xAF, 0x50];
pub const OFF_RGB: [u8; 3] = [0xD9, 0xD9, 0xD9];
pub const DEFAULT_CELL: usize = 4;

fn rgb(sel: Selection) -> [u8; 3] {
    match sel {
        Selection::Content => CONTENT_RGB,
        Selection::Style => STYLE_RGB,
        Selection::Off => OFF_RGB,
    }
}

/// Binary P6 image: layers along x, steps along y (step 0 at the top).
pub fn heatmap_ppm(schedule: &SelectionSchedule, cell: usize) -> Vec<u8> {
    let (layers, steps) = (schedule.num_layers(), schedule.total_steps());
    let (width, height) = (layers * cell, steps * cell);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height * 3);
    for t in 0..steps {
        let mut line = Vec::with_capacity(width * 3);
        for row in &schedule.grid {
            let px = rgb(row[t]);
            for _ in 0..cell {
                line.extend_from_slice(&px);
            }
        }
        for _ in 0..cell {
            out.extend_from_slice(&line);
        }
    }
    out
}

pub fn heatmap_svg(schedule: &SelectionSchedule, cell: usize) -> String {
    let (layers, steps) = (schedule.num_layers(), schedule.total_steps());
    let (width, height) = (layers * cell, steps * cell);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(
        out,
        "<title>{} layers x {} steps, mode {}</title>",
        layers,
        steps,
        schedule.mode.name()
    );
    for t in 0..steps {
        for (l, row) in schedule.grid.iter().enumerate() {
            let [r, g, b] = rgb(row[t]);
            let _ = writeln!(
                out,
                r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="#{r:02X}{g:02X}{b:02X}"/>"##,
                l * cell,
                t * cell,
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_heatmap(
    schedule: &SelectionSchedule,
    path: impl AsRef<Path>,
    format: HeatmapFormat,
    cell: usize,
) -> Result<()> {
    if cell == 0 {
        return Err(Error::Argument("heatmap cell size must be positive".into()));
    }
    let bytes = match format {
        HeatmapFormat::Svg => heatmap_svg(schedule, cell).into_bytes(),
        HeatmapFormat::Ppm => heatmap_ppm(schedule, cell),
    };
    fsutil::write_atomic(path.as_ref(), &bytes)
}
