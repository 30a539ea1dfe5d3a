//! Toy word-piece encoder with the knowledge attention and
//! recontextualization component (KARC) inserted between two of its layers.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kb::CandidateSet;
use crate::params::{LinearMap, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::TokenSequence;
use crate::transformer::TransformerBlockParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    /// KARC runs after this many layers.
    pub insertion_layer: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            insertion_layer: 3,
            heads: 1,
            vocab_size: 0,
            max_seq_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.insertion_layer < 1 || self.insertion_layer > self.num_layers {
            return Err(Error::Config(format!(
                "insertion_layer {} outside 1..={}",
                self.insertion_layer, self.num_layers
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("encoder needs vocab_size and max_seq_len > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KarcConfig {
    /// Candidates scoring below this are discarded before the softmax. Zero disables filtering.
    pub tau: f64,
    /// Weight of the span/entity dot-product term added to the prior score.
    pub beta: f64,
    /// Candidates kept per mention (C).
    pub candidates: usize,
    /// Entity embedding dimension (E).
    pub entity_dim: usize,
}

impl Default for KarcConfig {
    fn default() -> Self {
        KarcConfig {
            tau: 0.03,
            beta: 0.0,
            candidates: 8,
            entity_dim: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KarcParams {
    pub token_proj: LinearMap,
    pub span_block: TransformerBlockParams,
    pub entity_proj: LinearMap,
    pub recontext_block: TransformerBlockParams,
    pub fusion: LinearMap,
    pub tau: f64,
    pub beta: f64,
}

impl KarcParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        cfg: &KarcConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(KarcParams {
            token_proj: LinearMap::new(store, &format!("{prefix}.token_proj"), dim, dim, rng)?,
            span_block: TransformerBlockParams::new(store, &format!("{prefix}.span_block"), dim, heads, rng)?,
            entity_proj: LinearMap::new(store, &format!("{prefix}.entity_proj"), cfg.entity_dim, dim, rng)?,
            recontext_block: TransformerBlockParams::new(store, &format!("{prefix}.recontext_block"), dim, heads, rng)?,
            fusion: LinearMap::new(store, &format!("{prefix}.fusion"), dim, dim, rng)?,
            tau: cfg.tau,
            beta: cfg.beta,
        })
    }
}

/// Intermediate values of one KARC pass, for inspection and tests.
#[derive(Clone, Debug)]
pub struct KarcTrace {
    pub output: Var,
    /// Per candidate set: indices of the candidates that survived the threshold
    /// and their softmax weights (empty when none survived).
    pub weights: Vec<(Vec<usize>, Option<Var>)>,
}

/// Injects weighted entity embeddings into token features `h` (`N × D`).
///
/// With no candidate sets the input node is returned unchanged.
pub fn karc_forward(tape: &mut Tape, params: &KarcParams, h: Var, sets: &[CandidateSet]) -> Result<Var> {
    karc_forward_traced(tape, params, h, sets).map(|t| t.output)
}

pub fn karc_forward_traced(tape: &mut Tape, params: &KarcParams, h: Var, sets: &[CandidateSet]) -> Result<KarcTrace> {
    if sets.is_empty() {
        return Ok(KarcTrace {
            output: h,
            weights: Vec::new(),
        });
    }
    let n = tape.shape(h)[0];
    let dim = params.fusion.out_dim;
    if tape.shape(h)[1] != dim {
        return Err(Error::shape("karc_forward", tape.shape(h), &[n, dim]));
    }
    for s in sets {
        if s.span.is_empty() || s.span.end > n {
            return Err(Error::Usage(format!(
                "span {}..{} out of range for {n} tokens",
                s.span.start, s.span.end
            )));
        }
    }

    let hp = params.token_proj.forward(tape, h)?;

    let mut span_rows = Vec::with_capacity(sets.len());
    for s in sets {
        let rows = tape.slice_rows(hp, s.span.start, s.span.end)?;
        span_rows.push(if s.span.len() == 1 { rows } else { tape.mean_rows(rows)? });
    }
    let spans = tape.concat_rows(&span_rows)?;
    let se = params.span_block.forward(tape, spans, spans, spans)?;

    let mut f_rows = Vec::with_capacity(sets.len());
    let mut weights = Vec::with_capacity(sets.len());
    for (i, s) in sets.iter().enumerate() {
        let (row, survivors, w) = weighted_entity(tape, params, se, i, s, dim)?;
        f_rows.push(row);
        weights.push((survivors, w));
    }
    let f = tape.concat_rows(&f_rows)?;
    let se_prime = tape.add(se, f)?;

    let hp_prime = params.recontext_block.forward(tape, hp, se_prime, se_prime)?;
    let fused = params.fusion.forward(tape, hp_prime)?;
    let output = tape.add(fused, h)?;
    Ok(KarcTrace { output, weights })
}

/// Threshold, softmax and weighted sum of one span's candidate embeddings.
fn weighted_entity(
    tape: &mut Tape,
    params: &KarcParams,
    se: Var,
    index: usize,
    set: &CandidateSet,
    dim: usize,
) -> Result<(Var, Vec<usize>, Option<Var>)> {
    let e_dim = params.entity_proj.in_dim;
    let mut emb = Vec::with_capacity(set.candidates.len() * e_dim);
    for c in &set.candidates {
        if c.embedding.numel() != e_dim {
            return Err(Error::shape("karc entity embedding", c.embedding.shape(), &[1, e_dim]));
        }
        emb.extend_from_slice(c.embedding.data());
    }
    let priors: Vec<f64> = set.candidates.iter().map(|c| c.prior).collect();

    if params.beta == 0.0 {
        let survivors: Vec<usize> = (0..priors.len()).filter(|&j| priors[j] >= params.tau).collect();
        if survivors.is_empty() {
            return Ok((tape.constant(Tensor::zeros(&[1, dim])), survivors, None));
        }
        let scores = Tensor::row(survivors.iter().map(|&j| priors[j]).collect());
        let w = tape.constant(crate::tensor::softmax_rows(&scores)?);
        let picked: Vec<f64> = survivors
            .iter()
            .flat_map(|&j| emb[j * e_dim..(j + 1) * e_dim].iter().copied())
            .collect();
        let picked = tape.constant(Tensor::new(vec![survivors.len(), e_dim], picked)?);
        let projected = params.entity_proj.forward(tape, picked)?;
        let row = tape.matmul(w, projected)?;
        return Ok((row, survivors, Some(w)));
    }

    if priors.is_empty() {
        return Ok((tape.constant(Tensor::zeros(&[1, dim])), Vec::new(), None));
    }
    let all = tape.constant(Tensor::new(vec![priors.len(), e_dim], emb)?);
    let projected = params.entity_proj.forward(tape, all)?;
    let span = tape.slice_rows(se, index, index + 1)?;
    let affinity = tape.matmul_bt(span, projected)?;
    let affinity = tape.scale(affinity, params.beta);
    let prior_row = tape.constant(Tensor::row(priors.clone()));
    let scores = tape.add(prior_row, affinity)?;
    // the threshold looks at priors only, so the affinity term never removes a candidate
    let survivors: Vec<usize> = (0..priors.len()).filter(|&j| priors[j] >= params.tau).collect();
    if survivors.is_empty() {
        return Ok((tape.constant(Tensor::zeros(&[1, dim])), survivors, None));
    }
    let col = tape.transpose(scores)?;
    let col = tape.gather_rows(col, &survivors)?;
    let kept = tape.transpose(col)?;
    let w = tape.softmax_rows(kept)?;
    let rows = tape.gather_rows(projected, &survivors)?;
    let row = tape.matmul(w, rows)?;
    Ok((row, survivors, Some(w)))
}

/// Token/position embeddings, the layer stack, and an optional KARC.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<TransformerBlockParams>,
    pub karc: Option<KarcParams>,
    pub insertion_layer: usize,
    pub max_seq_len: usize,
    pub dim: usize,
}

impl EncoderParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        cfg: &EncoderConfig,
        karc: Option<&KarcConfig>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let token_embedding =
            store.add_uniform(format!("{prefix}.token_embedding"), &[cfg.vocab_size, dim], dim, rng)?;
        let position_embedding =
            store.add_uniform(format!("{prefix}.position_embedding"), &[cfg.max_seq_len, dim], dim, rng)?;
        let layers = (0..cfg.num_layers)
            .map(|i| TransformerBlockParams::new(store, &format!("{prefix}.layer{i}"), dim, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let karc = karc
            .map(|k| KarcParams::new(store, &format!("{prefix}.karc"), dim, cfg.heads, k, rng))
            .transpose()?;
        Ok(EncoderParams {
            token_embedding,
            position_embedding,
            layers,
            karc,
            insertion_layer: cfg.insertion_layer,
            max_seq_len: cfg.max_seq_len,
            dim,
        })
    }

    /// Knowledge-enhanced per-token features `N × D`.
    pub fn encode(&self, tape: &mut Tape, seq: &TokenSequence, sets: &[CandidateSet]) -> Result<Var> {
        let n = seq.len();
        if n > self.max_seq_len {
            return Err(Error::Usage(format!(
                "sequence of {n} tokens exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        if n == 0 {
            return Ok(tape.constant(Tensor::zeros(&[0, self.dim])));
        }
        let table = tape.param(self.token_embedding);
        let tokens = tape.gather_rows(table, &seq.token_ids)?;
        let positions = tape.param(self.position_embedding);
        let positions = tape.gather_rows(positions, &(0..n).collect::<Vec<_>>())?;
        let mut x = tape.add(tokens, positions)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == self.insertion_layer {
                x = self.apply_karc(tape, x, sets)?;
            }
            x = layer.forward(tape, x, x, x)?;
        }
        if self.insertion_layer == self.layers.len() {
            x = self.apply_karc(tape, x, sets)?;
        }
        Ok(x)
    }

    fn apply_karc(&self, tape: &mut Tape, x: Var, sets: &[CandidateSet]) -> Result<Var> {
        match &self.karc {
            Some(k) => karc_forward(tape, k, x, sets),
            None => Ok(x),
        }
    }
}

/// Static token-embedding table: the literal-text arm, no knowledge base.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticEmbedding {
    pub table: ParamId,
    pub dim: usize,
}

impl StaticEmbedding {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab_size: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(StaticEmbedding {
            table: store.add_uniform(format!("{prefix}.token_embedding"), &[vocab_size, dim], dim, rng)?,
            dim,
        })
    }

    pub fn encode(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        if seq.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[0, self.dim])));
        }
        let table = tape.param(self.table);
        tape.gather_rows(table, &seq.token_ids)
    }
}
