//! Training-free fusion of a content LoRA and a style LoRA.
//!
//! Each adapted layer is scored by the sum of the `K` largest magnitudes of
//! its reconstructed delta (`K = r_c · r_s`). At every denoising step the
//! content score is compared against the style score rescaled by a global
//! balance ratio and a step-dependent factor, and the winning adapter is
//! selected for that layer. The result is a layer × step [`SelectionSchedule`]
//! that can be written as a manifest, exported as per-step checkpoints, or
//! rendered as a heatmap.

pub mod ablation;
pub mod analysis;
pub mod engine;
pub mod error;
pub mod export;
pub mod fsutil;
pub mod lora;
pub mod manifest;
pub mod safetensors;
pub mod synth;
pub mod tensor;

pub use ablation::{build_fixed_schedule, build_random_schedule, build_subset_schedule};
pub use engine::{
    build_schedule, build_topk_no_scale_schedule, compute_gamma, effective_style_score, k_sweep,
    layer_importance, reconstruct_delta, scale_at, select_layer, FixedReading, GammaFactor,
    LayerImportance, LayerOrigin, ScaleMode, ScheduleMode, ScheduleParams, Selection,
    SelectionSchedule, SoloPolicy, SwitchStep,
};
pub use error::{Error, Result};
pub use export::{export_merged_lora, render_heatmap, HeatmapFormat};
pub use lora::{parse_file, serialize_file, LoraLayer, LoraModel, NamingConvention};
pub use manifest::{read_manifest, write_manifest, FusionManifest};
pub use tensor::{abs_sum, matmul, topk_abs_sum, DenseMatrix, Dtype, ScalarStat};
