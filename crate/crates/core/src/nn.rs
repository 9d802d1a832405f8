//! Differentiable building blocks: dense layers, layer norm, multi-head
//! attention, and pre-norm transformer blocks.
//!
//! Layer structs own parameter ids, not values; every forward pass binds
//! them onto a [`Tape`] so the same weights can be reused across calls and
//! across shared modules.

use crate::error::{Error, Result};
use crate::params::{ones, trunc_normal, zeros, ParamId, ParamStore, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{lit, Scalar};

pub use crate::tensor::Tensor;

/// Affine map `x @ W + b` with `W: [input, output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    input: usize,
    output: usize,
}

impl Linear {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        group: &str,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add(group, &format!("{name}.w"), trunc_normal(rng, input, output, 0.02))?;
        let b = if bias {
            Some(store.add(group, &format!("{name}.b"), zeros(1, output))?)
        } else {
            None
        };
        Ok(Linear { w, b, input, output })
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input {
            return Err(Error::shape(
                "linear",
                format!("input axis {cols} does not match weight rows {}", self.input),
            ));
        }
        let w = tape.param(store, self.w);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = tape.param(store, b);
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        group: &str,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(group, &format!("{name}.gain"), ones(1, dim))?,
            shift: store.add(group, &format!("{name}.shift"), zeros(1, dim))?,
            eps: 1e-5,
        })
    }

    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let gain = tape.param(store, self.gain);
        let shift = tape.param(store, self.shift);
        tape.layer_norm(x, gain, shift, lit::<E>(self.eps))
    }
}

/// Multi-head attention. Returns the output and the head-averaged attention
/// matrix so downstream consumers can reweight a single `[Lq, Lk]` map.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        group: &str,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, group, &format!("{name}.q"), dim, dim, true, rng)?,
            wk: Linear::new(store, group, &format!("{name}.k"), dim, dim, true, rng)?,
            wv: Linear::new(store, group, &format!("{name}.v"), dim, dim, true, rng)?,
            wo: Linear::new(store, group, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// `key_mask[j] == false` removes key/value row `j` from every query's
    /// softmax; `causal` restricts query `i` to keys `j <= i`.
    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        query: Var,
        key: Var,
        value: Var,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<(Var, Var)> {
        let q = self.wq.forward(tape, store, query)?;
        let k = self.wk.forward(tape, store, key)?;
        let v = self.wv.forward(tape, store, value)?;
        let head_dim = self.dim / self.heads;
        let scale = lit::<E>(1.0 / (head_dim as f64).sqrt());

        let mut contexts = Vec::with_capacity(self.heads);
        let mut attn_sum: Option<Var> = None;
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.attn_softmax(scores, key_mask, causal)?;
            contexts.push(tape.matmul(attn, vh)?);
            attn_sum = Some(match attn_sum {
                None => attn,
                Some(acc) => tape.add(acc, attn)?,
            });
        }
        let ctx = tape.concat_cols(&contexts)?;
        let out = self.wo.forward(tape, store, ctx)?;
        let attn_avg = tape.scale(attn_sum.expect("at least one head"), lit::<E>(1.0 / self.heads as f64));
        Ok((out, attn_avg))
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        group: &str,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, group, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, group, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, group, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, group, &format!("{name}.fc1"), dim, mlp_hidden, true, rng)?,
            fc2: Linear::new(store, group, &format!("{name}.fc2"), mlp_hidden, dim, true, rng)?,
        })
    }

    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        x: Var,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let (a, _) = self.attn.forward(tape, store, h, h, h, key_mask, causal)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.quick_gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Rng;
    use crate::tensor::Tensor;
    use rand::{Rng as _, SeedableRng};

    fn rng() -> Rng {
        Rng::seed_from_u64(42)
    }

    fn eye(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    #[test]
    fn linear_identity_and_zero_cases() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let lin = Linear::new(&mut store, "g", "l", 2, 2, true, &mut r).unwrap();
        store.set_value(lin.w, eye(2)).unwrap();
        store
            .set_value(lin.b.unwrap(), Tensor::row_vec(vec![0.0, 0.0]))
            .unwrap();

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        // zeros(3) through any weight gives exactly the bias
        let mut store2 = ParamStore::<f64>::new();
        let lin2 = Linear::new(&mut store2, "g", "l", 3, 4, true, &mut r).unwrap();
        store2
            .set_value(lin2.b.unwrap(), Tensor::row_vec(vec![0.5, -1.0, 2.0, 0.25]))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let y = lin2.forward(&mut tape, &store2, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn linear_matches_brute_force_matmul_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let lin = Linear::new(&mut store, "g", "l", 5, 3, true, &mut r).unwrap();
        let x: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(4, 5, x.clone()).unwrap());
        let y = lin.forward(&mut tape, &store, xv).unwrap();

        let w = store.get(lin.w);
        let b = store.get(lin.b.unwrap());
        for i in 0..4 {
            for j in 0..3 {
                let mut want = b.data()[j];
                for k in 0..5 {
                    want += x[i * 5 + k] * w.at(k, j);
                }
                assert!((tape.value(y).at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_reports_offending_axes() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let lin = Linear::new(&mut store, "g", "l", 4, 2, false, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let err = lin.forward(&mut tape, &store, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn layer_norm_limit_cases() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "g", "ln", 4).unwrap();

        // constant row collapses to the shift (zero here)
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let y = ln.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));

        // already-normalized row survives as eps -> 0
        let mut store2 = ParamStore::<f64>::new();
        let mut ln2 = LayerNorm::new(&mut store2, "g", "ln", 2).unwrap();
        ln2.eps = 1e-12;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y = ln2.forward(&mut tape, &store2, x).unwrap();
        assert!((tape.value(y).at(0, 0) - 1.0).abs() < 1e-6);
        assert!((tape.value(y).at(0, 1) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_statistics_on_random_rows() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "g", "ln", 16).unwrap();
        let mut r = rng();
        let data: Vec<f64> = (0..48).map(|_| r.gen_range(-4.0..4.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 16, data).unwrap());
        let y = ln.forward(&mut tape, &store, x).unwrap();
        for i in 0..3 {
            let row = tape.value(y).row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn attention_single_key_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let mha = MultiHeadAttention::new(&mut store, "g", "a", 8, 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(5, 8, (0..40).map(|v| v as f64 * 0.01).collect()).unwrap());
        let kv = tape.constant(Tensor::matrix(1, 8, (0..8).map(|v| v as f64 * 0.1).collect()).unwrap());
        let (out, attn) = mha.forward(&mut tape, &store, q, kv, kv, None, false).unwrap();
        assert!(tape.value(attn).data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        // every query row receives the same projected value
        let first = tape.value(out).row(0).to_vec();
        for i in 1..5 {
            for (a, b) in tape.value(out).row(i).iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_softmax_oracle_with_identity_projections() {
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let mha = MultiHeadAttention::new(&mut store, "g", "a", d, 1, &mut r).unwrap();
        for lin in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            store.set_value(lin.w, eye(d)).unwrap();
            store.set_value(lin.b.unwrap(), Tensor::row_vec(vec![0.0; d])).unwrap();
        }
        let xdata: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, d, xdata.clone()).unwrap());
        let (_, attn) = mha.forward(&mut tape, &store, x, x, x, None, false).unwrap();

        // independent brute-force softmax(Q K^T / sqrt(d)) oracle
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..3 {
            let mut logits = [0.0; 3];
            for j in 0..3 {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += xdata[i * d + t] * xdata[j * d + t];
                }
                logits[j] = dot * scale;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                assert!((tape.value(attn).at(i, j) - exps[j] / sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let mha = MultiHeadAttention::new(&mut store, "g", "a", 16, 4, &mut r).unwrap();
        for (lq, lk) in [(1, 1), (3, 7), (64, 64), (5, 64)] {
            let mut tape = Tape::new();
            let q = tape.constant(Tensor::matrix(lq, 16, (0..lq * 16).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap());
            let kv = tape.constant(Tensor::matrix(lk, 16, (0..lk * 16).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap());
            let (_, attn) = mha.forward(&mut tape, &store, q, kv, kv, None, false).unwrap();
            for i in 0..lq {
                let s: f64 = tape.value(attn).row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s} at Lq={lq} Lk={lk}");
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let err = MultiHeadAttention::new(&mut store, "g", "a", 10, 3, &mut r).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn block_preserves_shape_and_zero_projections_give_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let block = TransformerBlock::new(&mut store, "g", "b", 32, 4, 64, &mut r).unwrap();
        store.set_value(block.attn.wo.w, Tensor::zeros(vec![32, 32])).unwrap();
        store.set_value(block.attn.wo.b.unwrap(), Tensor::zeros(vec![1, 32])).unwrap();
        store.set_value(block.fc2.w, Tensor::zeros(vec![64, 32])).unwrap();
        store.set_value(block.fc2.b.unwrap(), Tensor::zeros(vec![1, 32])).unwrap();

        let data: Vec<f64> = (0..7 * 32).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(7, 32, data.clone()).unwrap());
        let y = block.forward(&mut tape, &store, x, None, false).unwrap();
        assert_eq!(tape.value(y).shape(), &[7, 32]);
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
