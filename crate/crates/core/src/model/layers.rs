//! Building blocks expressed on an autodiff [`Graph`].
//!
//! Weight structs hold indices into a bound parameter list (`&[Var]`), so
//! the same layout serves training (parameters) and inference (constants).

use rand::RngCore;

use crate::autodiff::{Graph, GraphError, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Self-attention plus a two-layer convolution, each behind a layer norm and
/// wrapped in a residual connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FftBlockWeights {
    pub attention_norm: Norm,
    pub attention: AttentionWeights,
    pub ffn_norm: Norm,
    pub conv1: Conv,
    pub conv2: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DurationPredictorWeights {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub projection: Linear,
}

/// Valid (non-padding) positions of a `[batch, len]` padded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqMask {
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
    pub valid: Vec<bool>,
}

impl SeqMask {
    pub fn from_lengths(lengths: &[usize], len: usize) -> Self {
        let valid = lengths
            .iter()
            .flat_map(|&l| (0..len).map(move |t| t < l))
            .collect();
        Self {
            batch: lengths.len(),
            len,
            lengths: lengths.to_vec(),
            valid,
        }
    }

    pub fn full(len: usize) -> Self {
        Self::from_lengths(&[len], len)
    }

    /// Row validity broadcast across `width` columns.
    pub fn expand(&self, width: usize) -> Vec<bool> {
        self.valid
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(width))
            .collect()
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var, GraphError> {
        let width = g.value(x).cols();
        g.mask(x, self.expand(width))
    }
}

/// Train-mode dropout source; `rng: None` disables dropout.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, GraphError> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

pub fn linear(g: &mut Graph, p: &[Var], w: Linear, x: Var) -> Result<Var, GraphError> {
    let y = g.matmul(x, p[w.weight])?;
    g.add_bias(y, p[w.bias])
}

pub fn layer_norm(g: &mut Graph, p: &[Var], w: Norm, x: Var) -> Result<Var, GraphError> {
    g.layer_norm(x, p[w.gain], p[w.bias])
}

pub fn conv(g: &mut Graph, p: &[Var], w: Conv, x: Var) -> Result<Var, GraphError> {
    g.conv1d(x, p[w.weight], p[w.bias])
}

/// Multi-head scaled dot-product self-attention over `[B,L,d]`; padded
/// positions neither attend nor are attended to. Returns the output and each
/// head's attention node, whose probabilities [`Graph::attention_weights`]
/// reads back.
pub fn self_attention(
    g: &mut Graph,
    p: &[Var],
    w: &AttentionWeights,
    x: Var,
    mask: &SeqMask,
    heads: usize,
) -> Result<(Var, Vec<Var>), GraphError> {
    let dim = g.value(x).cols();
    let head_dim = dim / heads;
    let q = linear(g, p, w.query, x)?;
    let q = g.scale(q, 1.0 / (head_dim as f64).sqrt())?;
    let k = linear(g, p, w.key, x)?;
    let v = linear(g, p, w.value, x)?;
    let qs = g.split_last(q, heads)?;
    let ks = g.split_last(k, heads)?;
    let vs = g.split_last(v, heads)?;
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        contexts.push(g.attention(qs[h], ks[h], vs[h], &mask.lengths)?);
    }
    let joined = g.concat_last(&contexts)?;
    Ok((linear(g, p, w.output, joined)?, contexts))
}

/// One feed-forward transformer block (pre-norm). Shape-preserving; with all
/// projection and convolution weights zero it is the identity.
pub fn fft_block(
    g: &mut Graph,
    p: &[Var],
    w: &FftBlockWeights,
    x: Var,
    mask: &SeqMask,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Vec<Var>), GraphError> {
    let h = layer_norm(g, p, w.attention_norm, x)?;
    let (a, attention) = self_attention(g, p, &w.attention, h, mask, heads)?;
    let a = dropout.apply(g, a)?;
    let x = g.add(x, a)?;
    let x = mask.apply(g, x)?;

    let h = layer_norm(g, p, w.ffn_norm, x)?;
    let h = mask.apply(g, h)?;
    let c = conv(g, p, w.conv1, h)?;
    let c = g.relu(c)?;
    let c = mask.apply(g, c)?;
    let c = conv(g, p, w.conv2, c)?;
    let c = dropout.apply(g, c)?;
    let x = g.add(x, c)?;
    Ok((mask.apply(g, x)?, attention))
}

/// Two convolution layers (ReLU, layer norm, dropout after each) and a
/// scalar projection: `[B,N,d] -> [B,N,1]` log-domain durations.
pub fn duration_predictor(
    g: &mut Graph,
    p: &[Var],
    w: &DurationPredictorWeights,
    x: Var,
    mask: &SeqMask,
    dropout: &mut Dropout<'_>,
) -> Result<Var, GraphError> {
    let mut h = x;
    for (c, n) in [(w.conv1, w.norm1), (w.conv2, w.norm2)] {
        h = conv(g, p, c, h)?;
        h = g.relu(h)?;
        h = layer_norm(g, p, n, h)?;
        h = mask.apply(g, h)?;
        h = dropout.apply(g, h)?;
    }
    let out = linear(g, p, w.projection, h)?;
    mask.apply(g, out)
}

/// Sinusoidal position table `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).expect("positional shape")
}

/// Position table repeated over the batch, zeroed on padding.
pub(crate) fn batched_positions(mask: &SeqMask, dim: usize) -> Tensor {
    let table = positional_encoding(mask.len, dim);
    let mut data = Vec::with_capacity(mask.batch * mask.len * dim);
    for b in 0..mask.batch {
        for t in 0..mask.len {
            if mask.valid[b * mask.len + t] {
                data.extend_from_slice(table.row(t));
            } else {
                data.extend(std::iter::repeat(0.0).take(dim));
            }
        }
    }
    Tensor::new(vec![mask.batch, mask.len, dim], data).expect("positional shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        params: Vec<Tensor>,
        block: FftBlockWeights,
    }

    fn block_fixture(dim: usize, filter: usize, scale: f64, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut add = |shape: &[usize], fill: Option<f64>| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| fill.unwrap_or_else(|| scale * rng.gen_range(-1.0..1.0)))
                .collect();
            params.push(Tensor::new(shape.to_vec(), data).unwrap());
            params.len() - 1
        };
        let lin = |add: &mut dyn FnMut(&[usize], Option<f64>) -> usize| Linear {
            weight: add(&[dim, dim], None),
            bias: add(&[dim], None),
        };
        let attention = AttentionWeights {
            query: lin(&mut add),
            key: lin(&mut add),
            value: lin(&mut add),
            output: lin(&mut add),
        };
        let block = FftBlockWeights {
            attention_norm: Norm {
                gain: add(&[dim], Some(1.0)),
                bias: add(&[dim], Some(0.0)),
            },
            attention,
            ffn_norm: Norm {
                gain: add(&[dim], Some(1.0)),
                bias: add(&[dim], Some(0.0)),
            },
            conv1: Conv {
                weight: add(&[3, dim, filter], None),
                bias: add(&[filter], None),
            },
            conv2: Conv {
                weight: add(&[3, filter, dim], None),
                bias: add(&[dim], None),
            },
        };
        Fixture { params, block }
    }

    fn random_input(len: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, len, dim], (0..len * dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn fft_block_preserves_shape_and_attention_rows_sum_to_one() {
        let fx = block_fixture(8, 12, 0.3, 1);
        for len in [1, 7, 33] {
            let mut g = Graph::new();
            let p: Vec<Var> = fx.params.iter().map(|t| g.constant(t.clone())).collect();
            let x = g.constant(random_input(len, 8, len as u64));
            let (y, attn) =
                fft_block(&mut g, &p, &fx.block, x, &SeqMask::full(len), 2, &mut Dropout::disabled()).unwrap();
            assert_eq!(g.shape(y), &[1, len, 8]);
            assert!(g.value(y).all_finite());
            for a in attn {
                let w = g.attention_weights(a, 0).unwrap();
                assert_eq!(w.shape(), &[len, len]);
                for r in 0..len {
                    let sum: f64 = w.row(r).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_projection_weights_make_block_identity() {
        let fx = block_fixture(8, 12, 0.0, 2);
        let mut g = Graph::new();
        let p: Vec<Var> = fx.params.iter().map(|t| g.constant(t.clone())).collect();
        let input = random_input(7, 8, 3);
        let x = g.constant(input.clone());
        let (y, _) = fft_block(&mut g, &p, &fx.block, x, &SeqMask::full(7), 2, &mut Dropout::disabled()).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let fx = block_fixture(8, 12, 0.4, 4);
        let input = random_input(5, 8, 5);
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let p: Vec<Var> = fx.params.iter().map(|t| g.constant(t.clone())).collect();
            let xv = g.constant(x);
            let (y, _) = self_attention(&mut g, &p, &fx.block.attention, xv, &SeqMask::full(5), 2).unwrap();
            g.value(y).clone()
        };
        let swap = |t: &Tensor, i: usize, j: usize| {
            let mut out = t.clone();
            let d = t.cols();
            for c in 0..d {
                out.data_mut().swap(i * d + c, j * d + c);
            }
            out
        };
        let direct = run(input.clone());
        let permuted = run(swap(&input, 1, 3));
        let expected = swap(&direct, 1, 3);
        for (a, b) in permuted.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_does_not_leak_into_valid_positions() {
        let fx = block_fixture(8, 12, 0.3, 6);
        let short = random_input(4, 8, 7);
        let run = |x: Tensor, lengths: &[usize], len: usize| {
            let mut g = Graph::new();
            let p: Vec<Var> = fx.params.iter().map(|t| g.constant(t.clone())).collect();
            let xv = g.constant(x);
            let mask = SeqMask::from_lengths(lengths, len);
            let (y, _) = fft_block(&mut g, &p, &fx.block, xv, &mask, 2, &mut Dropout::disabled()).unwrap();
            g.value(y).clone()
        };
        let alone = run(short.clone(), &[4], 4);
        let mut padded = short.data().to_vec();
        padded.extend(std::iter::repeat(0.0).take(3 * 8));
        let padded = Tensor::new(vec![1, 7, 8], padded).unwrap();
        let batched = run(padded, &[4], 7);
        assert_eq!(&batched.data()[..4 * 8], alone.data());
        assert!(batched.data()[4 * 8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positional_encoding_layout() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(2)[0] - 2f64.sin()).abs() < 1e-15);
        assert!((pe.row(1)[2] - (1.0f64 / 100.0).sin()).abs() < 1e-15);
    }
}
