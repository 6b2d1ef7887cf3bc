//! Seeded synthetic adapters for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lora::{LoraLayer, LoraModel, NamingConvention};
use crate::tensor::DenseMatrix;

/// Shape of one synthetic layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub out_features: usize,
    pub in_features: usize,
    pub rank: usize,
}

/// Uniform `[-amplitude, amplitude]` matrix.
pub fn uniform_matrix<R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    amplitude: f32,
) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-amplitude..=amplitude))
        .collect();
    DenseMatrix::new(rows, cols, data).expect("positive dimensions")
}

pub fn random_layer<R: Rng>(
    rng: &mut R,
    spec: &LayerSpec,
    alpha: Option<f32>,
) -> Result<LoraLayer> {
    let down = uniform_matrix(rng, spec.rank, spec.in_features, 1.0);
    let up = uniform_matrix(rng, spec.out_features, spec.rank, 1.0);
    LoraLayer::new(spec.name.clone(), down, up, alpha)
}

/// A model with one random layer per spec; `alpha` is attached to every layer.
pub fn random_model(
    seed: u64,
    specs: &[LayerSpec],
    alpha: Option<f32>,
    convention: NamingConvention,
) -> Result<LoraModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|s| random_layer(&mut rng, s, alpha))
        .collect::<Result<Vec<_>>>()?;
    LoraModel::from_layers(layers, convention)
}

/// Attention-projection style layer names: `unet.block{i}.attn.to_{q,k,v,out}`.
pub fn layer_name(i: usize) -> String {
    const PROJ: [&str; 4] = ["to_q", "to_k", "to_v", "to_out.0"];
    format!("unet.block{}.attn.{}", i / 4, PROJ[i % 4])
}

/// Content/style pair over the same layer shapes with independently drawn ranks.
pub fn random_pair(
    seed: u64,
    layers: usize,
    rank_range: (usize, usize),
    dim_range: (usize, usize),
) -> Result<(LoraModel, LoraModel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut content_specs = Vec::with_capacity(layers);
    let mut style_specs = Vec::with_capacity(layers);
    for i in 0..layers {
        let out_features = rng.gen_range(dim_range.0..=dim_range.1);
        let in_features = rng.gen_range(dim_range.0..=dim_range.1);
        let cap = out_features.min(in_features);
        let mut rank = || rng.gen_range(rank_range.0..=rank_range.1).min(cap);
        let (rc, rs) = (rank(), rank());
        content_specs.push(LayerSpec {
            name: layer_name(i),
            out_features,
            in_features,
            rank: rc,
        });
        style_specs.push(LayerSpec {
            rank: rs,
            ..content_specs[i].clone()
        });
    }
    let content = random_model(rng.gen(), &content_specs, None, NamingConvention::UpDown)?;
    let style = random_model(rng.gen(), &style_specs, None, NamingConvention::UpDown)?;
    Ok((content, style))
}

/// One raw checkpoint of the fixture corpus.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// A deterministic corpus of `count` small checkpoints varying naming
/// convention, dtype, alpha metadata, conv-shaped factors, transposed storage
/// and stray non-LoRA tensors.
pub fn fixture_corpus(count: usize) -> Vec<Fixture> {
    use std::collections::BTreeMap;

    use crate::safetensors::{serialize_container, TensorPayload};
    use crate::tensor::{encode_from_f32, Dtype};

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut tensor = |name: String, shape: Vec<usize>, dtype: Dtype| {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        TensorPayload {
            name,
            dtype,
            bytes: encode_from_f32(&values, dtype),
            shape,
        }
    };

    (0..count)
        .map(|i| {
            let convention = if i % 2 == 0 {
                NamingConvention::UpDown
            } else {
                NamingConvention::AB
            };
            let dtype = [Dtype::F32, Dtype::F16, Dtype::BF16][i % 3];
            let with_alpha = i % 3 != 1;
            let mut tensors = Vec::new();
            for l in 0..1 + i % 4 {
                let base = layer_name(l);
                let rank = 2 + (i + l) % 4;
                let (down_shape, up_shape) = if i % 4 == 0 && l == 0 {
                    (vec![rank, 6, 3, 3], vec![10, rank, 1, 1])
                } else if i % 7 == 3 && l == 0 {
                    (vec![12, rank], vec![rank, 9])
                } else {
                    (vec![rank, 12], vec![9, rank])
                };
                tensors.push(tensor(
                    format!("{base}{}", convention.down_suffix()),
                    down_shape,
                    dtype,
                ));
                tensors.push(tensor(
                    format!("{base}{}", convention.up_suffix()),
                    up_shape,
                    dtype,
                ));
                if with_alpha {
                    tensors.push(TensorPayload {
                        name: format!("{base}.alpha"),
                        dtype: Dtype::F32,
                        shape: vec![],
                        bytes: encode_from_f32(&[rank as f32 * 2.0], Dtype::F32),
                    });
                }
            }
            if i % 6 == 5 {
                tensors.push(tensor(
                    "text_model.embeddings".into(),
                    vec![4, 4],
                    Dtype::F32,
                ));
            }
            let mut metadata = BTreeMap::new();
            metadata.insert("fixture".to_string(), i.to_string());
            Fixture {
                name: format!("fixture_{i:02}"),
                bytes: serialize_container(&tensors, &metadata).expect("valid fixture"),
            }
        })
        .collect()
}
