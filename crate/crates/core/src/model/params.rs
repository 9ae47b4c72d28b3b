use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::layers::{AttentionWeights, Conv, DurationPredictorWeights, FftBlockWeights, Linear, Norm};
use super::ModelError;
use crate::tensor::Tensor;

/// Index of every parameter group inside [`ModelParameters`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub phoneme_embedding: usize,
    pub pitch_embedding: usize,
    /// Row `k - 1` embeds a note of `k` frames, `k` clamped to `max_note_frames`.
    pub duration_embedding: usize,
    pub encoder: Vec<FftBlockWeights>,
    pub duration_predictor: DurationPredictorWeights,
    pub decoder: Vec<FftBlockWeights>,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
    Constant(f64),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, inputs: usize, outputs: usize) -> Linear {
        Linear {
            weight: self.add(
                format!("{prefix}.weight"),
                vec![inputs, outputs],
                Init::Xavier {
                    fan_in: inputs,
                    fan_out: outputs,
                },
            ),
            bias: self.add(format!("{prefix}.bias"), vec![outputs], Init::Constant(0.0)),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![dim], Init::Constant(1.0)),
            bias: self.add(format!("{prefix}.bias"), vec![dim], Init::Constant(0.0)),
        }
    }

    fn conv(&mut self, prefix: &str, kernel: usize, inputs: usize, outputs: usize) -> Conv {
        Conv {
            weight: self.add(
                format!("{prefix}.weight"),
                vec![kernel, inputs, outputs],
                Init::Xavier {
                    fan_in: kernel * inputs,
                    fan_out: kernel * outputs,
                },
            ),
            bias: self.add(format!("{prefix}.bias"), vec![outputs], Init::Constant(0.0)),
        }
    }

    fn fft_block(&mut self, prefix: &str, c: &ModelConfig) -> FftBlockWeights {
        let d = c.hidden_dim;
        FftBlockWeights {
            attention_norm: self.norm(&format!("{prefix}.attention_norm"), d),
            attention: AttentionWeights {
                query: self.linear(&format!("{prefix}.attention.query"), d, d),
                key: self.linear(&format!("{prefix}.attention.key"), d, d),
                value: self.linear(&format!("{prefix}.attention.value"), d, d),
                output: self.linear(&format!("{prefix}.attention.output"), d, d),
            },
            ffn_norm: self.norm(&format!("{prefix}.ffn_norm"), d),
            conv1: self.conv(&format!("{prefix}.conv1"), c.conv_kernel_size, d, c.conv_filter_dim),
            conv2: self.conv(&format!("{prefix}.conv2"), c.conv_kernel_size, c.conv_filter_dim, d),
        }
    }
}

fn plan(c: &ModelConfig) -> (Layout, Vec<Spec>) {
    let d = c.hidden_dim;
    let emb = Init::Normal(1.0 / (d as f64).sqrt());
    let mut b = Builder::default();
    let phoneme_embedding = b.add("embedding.phoneme".into(), vec![c.phoneme_vocab_size, d], emb);
    let pitch_embedding = b.add("embedding.pitch".into(), vec![c.pitch_vocab_size, d], emb);
    let duration_embedding = b.add("embedding.note_duration".into(), vec![c.max_note_frames, d], emb);
    let encoder = (0..c.encoder_blocks)
        .map(|i| b.fft_block(&format!("encoder.{i}"), c))
        .collect();
    let k = c.conv_kernel_size;
    let duration_predictor = DurationPredictorWeights {
        conv1: b.conv("duration.conv1", k, d, d),
        norm1: b.norm("duration.norm1", d),
        conv2: b.conv("duration.conv2", k, d, d),
        norm2: b.norm("duration.norm2", d),
        projection: b.linear("duration.projection", d, 1),
    };
    let decoder = (0..c.decoder_blocks)
        .map(|i| b.fft_block(&format!("decoder.{i}"), c))
        .collect();
    let output = b.linear("output", d, c.output_dim);
    let layout = Layout {
        phoneme_embedding,
        pitch_embedding,
        duration_embedding,
        encoder,
        duration_predictor,
        decoder,
        output,
    };
    (layout, b.specs)
}

/// Named parameter tensors in a fixed order determined by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParameters {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

pub(crate) fn initialize(c: &ModelConfig, seed: u64) -> (Layout, ModelParameters) {
    let (layout, specs) = plan(c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::Xavier { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Constant(v) => vec![v; n],
        };
        names.push(spec.name);
        tensors.push(Tensor::new(spec.shape, data).expect("parameter shape"));
    }
    (layout, ModelParameters { names, tensors })
}

/// Checks externally supplied tensors against the layout for `c`.
pub(crate) fn adopt(c: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<(Layout, ModelParameters), ModelError> {
    let (layout, specs) = plan(c);
    if named.len() != specs.len() {
        return Err(ModelError::Parameters(format!(
            "expected {} tensors, got {}",
            specs.len(),
            named.len()
        )));
    }
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for (spec, (name, tensor)) in specs.into_iter().zip(named) {
        if name != spec.name || tensor.shape() != spec.shape.as_slice() {
            return Err(ModelError::Parameters(format!(
                "expected '{}' {:?}, found '{name}' {:?}",
                spec.name,
                spec.shape,
                tensor.shape()
            )));
        }
        names.push(name);
        tensors.push(tensor);
    }
    Ok((layout, ModelParameters { names, tensors }))
}
