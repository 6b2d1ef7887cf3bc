//! The fusion manifest: a canonical JSON record of a selection schedule.
//!
//! Keys are sorted, floats are written with 17 significant digits and grid
//! rows are run-length encoded as `[["C", 17], ["S", 33]]`, so identical
//! schedules always produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{
    switch_step, GammaFactor, LayerImportance, LayerOrigin, ScheduleMode, ScheduleParams,
    Selection, SelectionSchedule, SwitchStep,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::lora::LoraModel;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub path: String,
    pub sha256: String,
}

impl SourceRef {
    pub fn of(model: &LoraModel) -> Self {
        Self {
            path: model.source_path.clone(),
            sha256: model.sha256.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchLabel {
    Never,
    AlwaysStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SwitchField {
    Step(usize),
    Label(SwitchLabel),
}

impl SwitchField {
    fn from_row(row: &[Selection]) -> Option<Self> {
        match switch_step(row) {
            SwitchStep::Never => Some(SwitchField::Label(SwitchLabel::Never)),
            SwitchStep::AlwaysStyle => Some(SwitchField::Label(SwitchLabel::AlwaysStyle)),
            SwitchStep::At(t) => Some(SwitchField::Step(t)),
            SwitchStep::Irregular => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub base_module: String,
    pub origin: LayerOrigin,
    pub s_content: Option<f64>,
    pub s_style: Option<f64>,
    pub k_used: Option<usize>,
    pub rank_content: Option<usize>,
    pub rank_style: Option<usize>,
    pub switch_step: Option<SwitchField>,
}

pub type RleRow = Vec<(String, usize)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionManifest {
    pub format_version: String,
    pub content_source: Option<SourceRef>,
    pub style_source: Option<SourceRef>,
    pub params: ScheduleParams,
    pub gamma: Option<GammaFactor>,
    pub layers: Vec<ManifestLayer>,
    pub grid: Vec<RleRow>,
    pub mode: String,
    pub mode_detail: ScheduleMode,
    /// Free-form echo of the invocation that produced this file.
    pub run_config: Option<Value>,
}

pub fn rle_encode(row: &[Selection]) -> RleRow {
    let mut out: RleRow = Vec::new();
    for &cell in row {
        match out.last_mut() {
            Some((sym, n)) if sym == cell.symbol() => *n += 1,
            _ => out.push((cell.symbol().to_string(), 1)),
        }
    }
    out
}

pub fn rle_decode(row: &[(String, usize)], expected_len: usize) -> Result<Vec<Selection>> {
    let mut out = Vec::with_capacity(expected_len);
    for (sym, n) in row {
        let cell = Selection::from_symbol(sym)
            .ok_or_else(|| Error::Format(format!("unknown grid symbol `{sym}`")))?;
        if *n == 0 || out.len() + n > expected_len {
            return Err(Error::Format(format!(
                "run-length row does not decode to {expected_len} cells"
            )));
        }
        out.extend(std::iter::repeat_n(cell, *n));
    }
    if out.len() != expected_len {
        return Err(Error::Format(format!(
            "run-length row decodes to {} cells, expected {expected_len}",
            out.len()
        )));
    }
    Ok(out)
}

impl FusionManifest {
    pub fn from_schedule(schedule: &SelectionSchedule) -> Self {
        let layers = schedule
            .layer_order
            .iter()
            .zip(&schedule.origins)
            .zip(&schedule.grid)
            .map(|((name, &origin), row)| {
                let imp = schedule.importance(name);
                ManifestLayer {
                    base_module: name.clone(),
                    origin,
                    s_content: imp.map(|i| i.s_content),
                    s_style: imp.map(|i| i.s_style),
                    k_used: imp.map(|i| i.k_used),
                    rank_content: imp.map(|i| i.rank_content),
                    rank_style: imp.map(|i| i.rank_style),
                    switch_step: SwitchField::from_row(row),
                }
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION.to_string(),
            content_source: None,
            style_source: None,
            params: schedule.params.clone(),
            gamma: schedule.gamma,
            layers,
            grid: schedule.grid.iter().map(|r| rle_encode(r)).collect(),
            mode: schedule.mode.name().to_string(),
            mode_detail: schedule.mode,
            run_config: None,
        }
    }

    pub fn with_sources(mut self, content: Option<&LoraModel>, style: Option<&LoraModel>) -> Self {
        self.content_source = content.map(SourceRef::of);
        self.style_source = style.map(SourceRef::of);
        self
    }

    pub fn with_run_config(mut self, config: Value) -> Self {
        self.run_config = Some(config);
        self
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)
            .map_err(|e| Error::Format(format!("manifest encoding: {e}")))?;
        let mut out = String::new();
        write_canonical(&value, 0, &mut out);
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;
        match value.get("format_version").and_then(Value::as_str) {
            Some(FORMAT_VERSION) => {}
            Some(other) => {
                return Err(Error::UnsupportedVersion {
                    found: other.to_string(),
                    expected: FORMAT_VERSION.to_string(),
                })
            }
            None => return Err(Error::Format("manifest has no format_version".into())),
        }
        let manifest: FusionManifest = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("manifest schema: {e}")))?;
        manifest.to_schedule()?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fsutil::write_atomic(path.as_ref(), self.to_canonical_json()?.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fsutil::read_file(path.as_ref())?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?;
        Self::from_json(text)
    }

    /// Rebuilds the schedule, checking RLE lengths and switch-step consistency.
    pub fn to_schedule(&self) -> Result<SelectionSchedule> {
        if self.mode != self.mode_detail.name() {
            return Err(Error::Format(format!(
                "mode `{}` disagrees with mode_detail `{}`",
                self.mode,
                self.mode_detail.name()
            )));
        }
        if self.layers.len() != self.grid.len() {
            return Err(Error::Format(format!(
                "{} layers but {} grid rows",
                self.layers.len(),
                self.grid.len()
            )));
        }
        let steps = self.params.total_steps;
        let mut grid = Vec::with_capacity(self.grid.len());
        let mut importances = Vec::new();
        for (layer, rle) in self.layers.iter().zip(&self.grid) {
            let row = rle_decode(rle, steps)
                .map_err(|e| Error::Format(format!("layer `{}`: {e}", layer.base_module)))?;
            if layer.switch_step != SwitchField::from_row(&row) {
                return Err(Error::Format(format!(
                    "layer `{}`: switch_step {:?} does not match its grid row",
                    layer.base_module, layer.switch_step
                )));
            }
            if let (Some(s_content), Some(s_style), Some(k_used), Some(rc), Some(rs)) = (
                layer.s_content,
                layer.s_style,
                layer.k_used,
                layer.rank_content,
                layer.rank_style,
            ) {
                importances.push(LayerImportance {
                    base_module: layer.base_module.clone(),
                    s_content,
                    s_style,
                    k_used,
                    rank_content: rc,
                    rank_style: rs,
                });
            }
            grid.push(row);
        }
        let schedule = SelectionSchedule {
            layer_order: self.layers.iter().map(|l| l.base_module.clone()).collect(),
            origins: self.layers.iter().map(|l| l.origin).collect(),
            grid,
            params: self.params.clone(),
            gamma: self.gamma,
            importances,
            mode: self.mode_detail,
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Writes `schedule` as a manifest without source digests.
pub fn write_manifest(schedule: &SelectionSchedule, path: impl AsRef<Path>) -> Result<()> {
    schedule.validate()?;
    FusionManifest::from_schedule(schedule).write(path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SelectionSchedule> {
    FusionManifest::read(path)?.to_schedule()
}

fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn is_scalar(v: &Value) -> bool {
    !matches!(v, Value::Array(_) | Value::Object(_))
}

fn write_canonical(value: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                out.push_str(&format_float(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) if items.iter().all(is_scalar) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_canonical(item, indent, out);
            }
            out.push(']');
        }
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_canonical(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, key) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[*key], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::build_random_schedule;
    use Selection::*;

    #[test]
    fn rle_examples() {
        assert_eq!(rle_encode(&[Content; 50]), vec![("C".to_string(), 50)]);
        assert_eq!(
            rle_encode(&[Content, Content, Style]),
            vec![("C".to_string(), 2), ("S".to_string(), 1)]
        );
        assert!(rle_decode(&[("C".into(), 3)], 4).is_err());
        assert!(rle_decode(&[("C".into(), 5)], 4).is_err());
        assert!(rle_decode(&[("X".into(), 4)], 4).is_err());
        assert!(rle_decode(&[("C".into(), 0), ("S".into(), 4)], 4).is_err());
    }

    #[test]
    fn floats_use_seventeen_digits() {
        assert_eq!(format_float(1.5), "1.5000000000000000e0");
        assert_eq!(format_float(0.1).parse::<f64>().unwrap(), 0.1);
        let v = 1.0 / 3.0;
        assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn round_trip_and_version_errors() {
        let names: Vec<String> = (0..3).map(|i| format!("l{i}")).collect();
        let s = build_random_schedule(&ScheduleParams::default(), &names, 3, 0.4).unwrap();
        let m = FusionManifest::from_schedule(&s);
        let json = m.to_canonical_json().unwrap();
        let back = FusionManifest::from_json(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_schedule().unwrap(), s);
        assert_eq!(back.to_canonical_json().unwrap(), json);

        let bumped = json.replace("\"format_version\": \"1\"", "\"format_version\": \"9\"");
        assert!(matches!(
            FusionManifest::from_json(&bumped),
            Err(Error::UnsupportedVersion { .. })
        ));
        assert!(matches!(
            FusionManifest::from_json(&json[..json.len() / 2]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn inconsistent_switch_step_is_rejected() {
        let names = vec!["a".to_string()];
        let s = build_random_schedule(&ScheduleParams::default(), &names, 0, 1.0).unwrap();
        let mut m = FusionManifest::from_schedule(&s);
        assert_eq!(
            m.layers[0].switch_step,
            Some(SwitchField::Label(SwitchLabel::Never))
        );
        m.layers[0].switch_step = Some(SwitchField::Step(3));
        assert!(m.to_schedule().is_err());
    }
}
