//! LoRA checkpoints: pairing raw tensors into down/up factor pairs and
//! writing them back out.
//!
//! Two community naming conventions are understood:
//!
//! | convention | down (A, `r×n`)        | up (B, `m×r`)        |
//! |------------|------------------------|----------------------|
//! | `UpDown`   | `<base>.lora_down.weight` | `<base>.lora_up.weight` |
//! | `AB`       | `<base>.lora_A.weight`    | `<base>.lora_B.weight`  |
//!
//! Either may carry a scalar `<base>.alpha`. The canonical layer key is
//! `<base>`, so both conventions yield the same key set.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::safetensors::{serialize_container, Container, TensorPayload, TensorRecord};
use crate::tensor::{decode_to_f32, encode_from_f32, DenseMatrix, Dtype};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NamingConvention {
    UpDown,
    AB,
}

impl NamingConvention {
    pub fn down_suffix(self) -> &'static str {
        match self {
            NamingConvention::UpDown => ".lora_down.weight",
            NamingConvention::AB => ".lora_A.weight",
        }
    }

    pub fn up_suffix(self) -> &'static str {
        match self {
            NamingConvention::UpDown => ".lora_up.weight",
            NamingConvention::AB => ".lora_B.weight",
        }
    }
}

impl fmt::Display for NamingConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NamingConvention::UpDown => f.write_str("lora_up/lora_down"),
            NamingConvention::AB => f.write_str("lora_A/lora_B"),
        }
    }
}

const ALPHA_SUFFIX: &str = ".alpha";

/// How a tensor was stored on disk, kept so it can be written back unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub down: TensorLayout,
    pub up: TensorLayout,
    pub alpha: Option<TensorLayout>,
    /// Both factors were stored transposed (`[n, r]` and `[r, m]`).
    pub transposed: bool,
}

/// One adapted base weight: `ΔW = up · down`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub base_module: String,
    /// The `r×n` factor.
    pub down: DenseMatrix,
    /// The `m×r` factor.
    pub up: DenseMatrix,
    pub rank: usize,
    pub alpha: Option<f32>,
    pub layout: LayerLayout,
}

impl LoraLayer {
    /// Builds an `F32` layer from 2-D factors.
    pub fn new(
        base_module: impl Into<String>,
        down: DenseMatrix,
        up: DenseMatrix,
        alpha: Option<f32>,
    ) -> Result<Self> {
        let base_module = base_module.into();
        check_factor_shapes(&base_module, &down, &up)?;
        if let Some(a) = alpha {
            check_alpha(&format!("{base_module}{ALPHA_SUFFIX}"), a)?;
        }
        let layout = LayerLayout {
            down: TensorLayout {
                dtype: Dtype::F32,
                shape: down.shape().to_vec(),
            },
            up: TensorLayout {
                dtype: Dtype::F32,
                shape: up.shape().to_vec(),
            },
            alpha: alpha.map(|_| TensorLayout {
                dtype: Dtype::F32,
                shape: vec![],
            }),
            transposed: false,
        };
        Ok(Self {
            rank: down.rows(),
            base_module,
            down,
            up,
            alpha,
            layout,
        })
    }

    /// Shape of the reconstructed `ΔW`.
    pub fn delta_shape(&self) -> [usize; 2] {
        [self.up.rows(), self.down.cols()]
    }

    /// Same layer with both factors multiplied by `factor` (alpha untouched).
    pub fn scaled(&self, factor: f32) -> LoraLayer {
        LoraLayer {
            down: self.down.scaled(factor),
            up: self.up.scaled(factor),
            ..self.clone()
        }
    }

    /// Encodes this layer's tensors under `convention`, restoring the on-disk layout.
    pub fn payloads(&self, convention: NamingConvention) -> Vec<TensorPayload> {
        let (down, up) = if self.layout.transposed {
            (self.down.transpose(), self.up.transpose())
        } else {
            (self.down.clone(), self.up.clone())
        };
        let mut out = vec![
            TensorPayload {
                name: format!("{}{}", self.base_module, convention.down_suffix()),
                dtype: self.layout.down.dtype,
                shape: self.layout.down.shape.clone(),
                bytes: encode_from_f32(down.data(), self.layout.down.dtype),
            },
            TensorPayload {
                name: format!("{}{}", self.base_module, convention.up_suffix()),
                dtype: self.layout.up.dtype,
                shape: self.layout.up.shape.clone(),
                bytes: encode_from_f32(up.data(), self.layout.up.dtype),
            },
        ];
        if let Some(alpha) = self.alpha {
            let layout = self.layout.alpha.clone().unwrap_or(TensorLayout {
                dtype: Dtype::F32,
                shape: vec![],
            });
            out.push(TensorPayload {
                name: format!("{}{ALPHA_SUFFIX}", self.base_module),
                bytes: encode_from_f32(&[alpha], layout.dtype),
                dtype: layout.dtype,
                shape: layout.shape,
            });
        }
        out
    }
}

fn check_factor_shapes(base: &str, down: &DenseMatrix, up: &DenseMatrix) -> Result<()> {
    if down.rows() != up.cols() {
        return Err(Error::shape(
            base,
            &down.shape(),
            &up.shape(),
            "down rows and up cols must both equal the rank",
        ));
    }
    let rank = down.rows();
    if rank > up.rows().min(down.cols()) {
        return Err(Error::shape(
            base,
            &down.shape(),
            &up.shape(),
            format!("rank {rank} exceeds min(out, in)"),
        ));
    }
    Ok(())
}

fn check_alpha(tensor: &str, alpha: f32) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::Data {
            tensor: tensor.to_string(),
            reason: format!("alpha must be positive, got {alpha}"),
        })
    }
}

/// All layers parsed from one checkpoint, in header order.
#[derive(Debug, Clone)]
pub struct LoraModel {
    pub layers: IndexMap<String, LoraLayer>,
    pub source_path: String,
    pub naming_convention: NamingConvention,
    pub metadata: BTreeMap<String, String>,
    /// Hex SHA-256 of the source file, empty for in-memory models.
    pub sha256: String,
    /// Tensors that were present but not part of any LoRA pair.
    pub warnings: Vec<String>,
}

impl LoraModel {
    /// In-memory model; fails on duplicate base modules.
    pub fn from_layers(
        layers: impl IntoIterator<Item = LoraLayer>,
        naming_convention: NamingConvention,
    ) -> Result<Self> {
        let mut map = IndexMap::new();
        for layer in layers {
            let key = layer.base_module.clone();
            if map.insert(key.clone(), layer).is_some() {
                return Err(Error::Pairing(format!("duplicate base module `{key}`")));
            }
        }
        Ok(Self {
            layers: map,
            source_path: String::new(),
            naming_convention,
            metadata: BTreeMap::new(),
            sha256: String::new(),
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, base_module: &str) -> Option<&LoraLayer> {
        self.layers.get(base_module)
    }

    /// Same model with every factor tensor multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> LoraModel {
        LoraModel {
            layers: self
                .layers
                .iter()
                .map(|(k, l)| (k.clone(), l.scaled(factor)))
                .collect(),
            ..self.clone()
        }
    }

    pub fn from_bytes(bytes: &[u8], source_path: &str) -> Result<Self> {
        let container = Container::parse(bytes)?;
        let paired = pair_lora_layers(&container)?;
        let mut model = Self::from_layers(paired.layers, paired.convention)?;
        model.source_path = source_path.to_string();
        model.metadata = container.metadata;
        model.sha256 = fsutil::sha256_hex(bytes);
        model.warnings = paired.warnings;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<TensorPayload> = self
            .layers
            .values()
            .flat_map(|l| l.payloads(self.naming_convention))
            .collect();
        serialize_container(&tensors, &self.metadata)
    }
}

/// Reads and pairs a safetensors LoRA checkpoint.
pub fn parse_file(path: impl AsRef<Path>) -> Result<LoraModel> {
    let path = path.as_ref();
    let bytes = fsutil::read_file(path)?;
    LoraModel::from_bytes(&bytes, &path.to_string_lossy())
}

/// Writes `model` as a safetensors container (atomically).
pub fn serialize_file(model: &LoraModel, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &model.to_bytes()?)
}

#[derive(Debug)]
pub struct PairedLayers {
    pub layers: Vec<LoraLayer>,
    pub convention: NamingConvention,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Down,
    Up,
    Alpha,
}

fn classify(name: &str) -> Option<(&str, Slot, Option<NamingConvention>)> {
    use NamingConvention::*;
    let table = [
        (UpDown.down_suffix(), Slot::Down, Some(UpDown)),
        (UpDown.up_suffix(), Slot::Up, Some(UpDown)),
        (AB.down_suffix(), Slot::Down, Some(AB)),
        (AB.up_suffix(), Slot::Up, Some(AB)),
        (ALPHA_SUFFIX, Slot::Alpha, None),
    ];
    table.into_iter().find_map(|(suffix, slot, conv)| {
        name.strip_suffix(suffix)
            .filter(|base| !base.is_empty())
            .map(|base| (base, slot, conv))
    })
}

#[derive(Default)]
struct Slots<'a> {
    down: Option<&'a TensorRecord>,
    up: Option<&'a TensorRecord>,
    alpha: Option<&'a TensorRecord>,
}

/// Groups the container's tensors into down/up pairs keyed by base module.
pub fn pair_lora_layers(container: &Container) -> Result<PairedLayers> {
    for skipped in &container.skipped {
        if classify(&skipped.name).is_some() {
            return Err(Error::Format(format!(
                "tensor `{}`: unsupported dtype `{}`",
                skipped.name, skipped.dtype
            )));
        }
    }

    let mut warnings: Vec<String> = container
        .skipped
        .iter()
        .map(|s| format!("ignored non-LoRA tensor `{}` ({})", s.name, s.dtype))
        .collect();
    let mut groups: IndexMap<&str, Slots<'_>> = IndexMap::new();
    let mut conventions: Vec<NamingConvention> = Vec::new();

    for record in &container.records {
        let Some((base, slot, conv)) = classify(&record.name) else {
            warnings.push(format!("ignored non-LoRA tensor `{}`", record.name));
            continue;
        };
        if let Some(c) = conv {
            if !conventions.contains(&c) {
                conventions.push(c);
            }
        }
        let slots = groups.entry(base).or_default();
        let target = match slot {
            Slot::Down => &mut slots.down,
            Slot::Up => &mut slots.up,
            Slot::Alpha => &mut slots.alpha,
        };
        if let Some(existing) = target {
            return Err(Error::Pairing(format!(
                "ambiguous tensors for `{base}`: both `{}` and `{}` claim the same slot",
                existing.name, record.name
            )));
        }
        *target = Some(record);
    }

    if conventions.len() > 1 {
        return Err(Error::Pairing(
            "mixed naming conventions (lora_up/lora_down and lora_A/lora_B) in one file".into(),
        ));
    }
    let convention = conventions
        .first()
        .copied()
        .unwrap_or(NamingConvention::UpDown);

    let mut layers = Vec::with_capacity(groups.len());
    for (base, slots) in groups {
        let (down_rec, up_rec) = match (slots.down, slots.up) {
            (Some(d), Some(u)) => (d, u),
            (Some(only), None) | (None, Some(only)) => {
                return Err(Error::Pairing(format!(
                    "orphan factor `{}` has no matching partner",
                    only.name
                )))
            }
            (None, None) => {
                let alpha = slots.alpha.expect("group created by some slot");
                return Err(Error::Pairing(format!(
                    "orphan alpha `{}` has no factors",
                    alpha.name
                )));
            }
        };
        layers.push(build_layer(container, base, down_rec, up_rec, slots.alpha)?);
    }

    Ok(PairedLayers {
        layers,
        convention,
        warnings,
    })
}

fn load_matrix(container: &Container, record: &TensorRecord) -> Result<(DenseMatrix, bool)> {
    let values = decode_to_f32(
        container.payload(record),
        record.dtype,
        record.element_count(),
        &record.name,
    )?;
    let (rows, cols, is_conv) = match record.shape[..] {
        [r, c] => (r, c, false),
        [o, i, kh, kw] => (o, i * kh * kw, true),
        _ => {
            return Err(Error::shape(
                &record.name,
                &record.shape,
                &[],
                "LoRA factors must be 2-D or 4-D",
            ))
        }
    };
    Ok((DenseMatrix::new(rows, cols, values)?, is_conv))
}

fn build_layer(
    container: &Container,
    base: &str,
    down_rec: &TensorRecord,
    up_rec: &TensorRecord,
    alpha_rec: Option<&TensorRecord>,
) -> Result<LoraLayer> {
    let (down, down_conv) = load_matrix(container, down_rec)?;
    let (up, up_conv) = load_matrix(container, up_rec)?;

    let fits = |d: &DenseMatrix, u: &DenseMatrix| check_factor_shapes(base, d, u).is_ok();
    let (down, up, transposed) = if fits(&down, &up) {
        (down, up, false)
    } else if !down_conv && !up_conv && fits(&down.transpose(), &up.transpose()) {
        (down.transpose(), up.transpose(), true)
    } else {
        return Err(Error::shape(
            base,
            &down_rec.shape,
            &up_rec.shape,
            "down/up factors do not share a rank dimension",
        ));
    };

    let (alpha, alpha_layout) = match alpha_rec {
        Some(rec) => {
            if rec.element_count() != 1 {
                return Err(Error::shape(
                    &rec.name,
                    &rec.shape,
                    &[],
                    "alpha must be a scalar",
                ));
            }
            let v = decode_to_f32(container.payload(rec), rec.dtype, 1, &rec.name)?[0];
            check_alpha(&rec.name, v)?;
            (
                Some(v),
                Some(TensorLayout {
                    dtype: rec.dtype,
                    shape: rec.shape.clone(),
                }),
            )
        }
        None => (None, None),
    };

    Ok(LoraLayer {
        base_module: base.to_string(),
        rank: down.rows(),
        down,
        up,
        alpha,
        layout: LayerLayout {
            down: TensorLayout {
                dtype: down_rec.dtype,
                shape: down_rec.shape.clone(),
            },
            up: TensorLayout {
                dtype: up_rec.dtype,
                shape: up_rec.shape.clone(),
            },
            alpha: alpha_layout,
            transposed,
        },
    })
}
