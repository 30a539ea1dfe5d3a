//! The attention + feed-forward block shared by the text encoder, KARC and
//! the patch encoder.
//!
//! Layout is post-norm:
//!
//! ```text
//! x   = LN1(q + Wo · concat_h softmax(Q_h K_hᵀ / sqrt(d_h)) V_h)
//! out = LN2(x + FF2(gelu(FF1(x))))
//! ```
//!
//! with `Q = q Wq`, `K = k Wk`, `V = v Wv` and the feed-forward hidden width `4D`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{LinearMap, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
    pub output: LinearMap,
    pub ff_in: LinearMap,
    pub ff_out: LinearMap,
    pub norm1_gain: ParamId,
    pub norm1_offset: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_offset: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerBlockParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        let hidden = 4 * dim;
        Ok(TransformerBlockParams {
            query: LinearMap::new(store, &format!("{prefix}.attn.query"), dim, dim, rng)?,
            key: LinearMap::new(store, &format!("{prefix}.attn.key"), dim, dim, rng)?,
            value: LinearMap::new(store, &format!("{prefix}.attn.value"), dim, dim, rng)?,
            output: LinearMap::new(store, &format!("{prefix}.attn.output"), dim, dim, rng)?,
            ff_in: LinearMap::new(store, &format!("{prefix}.ff.in"), dim, hidden, rng)?,
            ff_out: LinearMap::new(store, &format!("{prefix}.ff.out"), hidden, dim, rng)?,
            norm1_gain: store.add(format!("{prefix}.norm1.gain"), Tensor::full(&[1, dim], 1.0))?,
            norm1_offset: store.add(format!("{prefix}.norm1.offset"), Tensor::zeros(&[1, dim]))?,
            norm2_gain: store.add(format!("{prefix}.norm2.gain"), Tensor::full(&[1, dim], 1.0))?,
            norm2_offset: store.add(format!("{prefix}.norm2.offset"), Tensor::zeros(&[1, dim]))?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
        self.forward_traced(tape, q, k, v).map(|(out, _)| out)
    }

    /// Like [`forward`](Self::forward), also returning each head's attention matrix.
    pub fn forward_traced(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        let d = self.dim;
        for x in [q, k, v] {
            if tape.shape(x).len() != 2 || tape.shape(x)[1] != d {
                return Err(Error::shape("transformer_block", tape.shape(x), &[tape.shape(q)[0], d]));
            }
        }
        if tape.shape(k)[0] != tape.shape(v)[0] {
            return Err(Error::shape("transformer_block", tape.shape(k), tape.shape(v)));
        }

        let qp = self.query.forward(tape, q)?;
        let kp = self.key.forward(tape, k)?;
        let vp = self.value.forward(tape, v)?;
        let head_dim = d / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut weights = Vec::with_capacity(self.heads);
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (tape.slice_cols(qp, lo, hi)?, tape.slice_cols(kp, lo, hi)?, tape.slice_cols(vp, lo, hi)?)
            };
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let w = tape.softmax_rows(scores)?;
            head_outputs.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let attended = if self.heads == 1 {
            head_outputs[0]
        } else {
            tape.concat_cols(&head_outputs)?
        };
        let attended = self.output.forward(tape, attended)?;

        let x = tape.add(q, attended)?;
        let x = norm(tape, x, self.norm1_gain, self.norm1_offset)?;
        let hidden = self.ff_in.forward(tape, x)?;
        let hidden = tape.gelu(hidden);
        let ff = self.ff_out.forward(tape, hidden)?;
        let y = tape.add(x, ff)?;
        let y = norm(tape, y, self.norm2_gain, self.norm2_offset)?;
        Ok((y, weights))
    }
}

fn norm(tape: &mut Tape, x: Var, gain: ParamId, offset: ParamId) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let g = tape.param(gain);
    let b = tape.param(offset);
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

/// `TransformerBlock(q, k, v)`; self-attention when all three are the same node.
pub fn transformer_block(tape: &mut Tape, params: &TransformerBlockParams, q: Var, k: Var, v: Var) -> Result<Var> {
    params.forward(tape, q, k, v)
}
