//! Straight-loop evaluations of the model pieces and metrics.
//!
//! Nothing here touches the tape or the matrix kernels; every sum is written
//! out. The fused implementations are checked against these in unit tests and
//! in the acceptance suite.

use std::collections::BTreeMap;

use crate::kb::{CandidateSet, CountTable, MentionPriorTable};
use crate::params::{LinearMap, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::TransformerBlockParams;
use crate::vkac::VkacParams;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| (0..t.cols()).map(|c| t.at(r, c)).collect()).collect()
}

pub fn linear(x: &Mat, store: &ParamStore, l: &LinearMap) -> Mat {
    let w = mat(store.value(l.weight));
    let b = mat(store.value(l.bias));
    x.iter()
        .map(|row| (0..l.out_dim).map(|j| b[0][j] + (0..l.in_dim).map(|i| row[i] * w[i][j]).sum::<f64>()).collect())
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn norm_row(row: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    row.iter().enumerate().map(|(i, x)| g[i] * (x - mu) / (var + 1e-5).sqrt() + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

/// Post-norm attention + feed-forward block.
pub fn block(p: &TransformerBlockParams, store: &ParamStore, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let (qp, kp, vp) = (linear(q, store, &p.query), linear(k, store, &p.key), linear(v, store, &p.value));
    let hd = p.dim / p.heads;
    let mut att = vec![vec![0.0; p.dim]; q.len()];
    for h in 0..p.heads {
        for (i, out) in att.iter_mut().enumerate() {
            let s: Vec<f64> = (0..k.len())
                .map(|j| (0..hd).map(|c| qp[i][h * hd + c] * kp[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let w = softmax(&s);
            for c in 0..hd {
                out[h * hd + c] = (0..k.len()).map(|j| w[j] * vp[j][h * hd + c]).sum();
            }
        }
    }
    let att = linear(&att, store, &p.output);
    let row = |id| mat(store.value(id))[0].clone();
    let x: Mat = add(q, &att)
        .iter()
        .map(|s| norm_row(s, &row(p.norm1_gain), &row(p.norm1_offset)))
        .collect();
    let hid: Mat = linear(&x, store, &p.ff_in).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    let ff = linear(&hid, store, &p.ff_out);
    add(&x, &ff)
        .iter()
        .map(|s| norm_row(s, &row(p.norm2_gain), &row(p.norm2_offset)))
        .collect()
}

/// Knowledge-aware re-contextualization of token states `h` given the linked
/// spans. Returns `h` unchanged when there are no spans.
pub fn karc(p: &crate::encoder::KarcParams, store: &ParamStore, h: &Mat, sets: &[CandidateSet]) -> Mat {
    if sets.is_empty() {
        return h.clone();
    }
    let d = p.fusion.out_dim;
    let hp = linear(h, store, &p.token_proj);
    let spans: Mat = sets
        .iter()
        .map(|s| {
            let len = (s.span.end - s.span.start) as f64;
            (0..d).map(|c| (s.span.start..s.span.end).map(|i| hp[i][c]).sum::<f64>() / len).collect()
        })
        .collect();
    let se = block(&p.span_block, store, &spans, &spans, &spans);
    let mut se_prime = se.clone();
    for (i, s) in sets.iter().enumerate() {
        let kept: Vec<_> = s.candidates.iter().filter(|c| c.prior >= p.tau).collect();
        if kept.is_empty() {
            continue;
        }
        let proj: Mat = kept.iter().map(|c| linear(&mat(&c.embedding), store, &p.entity_proj).remove(0)).collect();
        let scores: Vec<f64> = kept
            .iter()
            .zip(&proj)
            .map(|(c, pe)| c.prior + p.beta * pe.iter().zip(&se[i]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        for (pe, w) in proj.iter().zip(softmax(&scores)) {
            for c in 0..d {
                se_prime[i][c] += w * pe[c];
            }
        }
    }
    let hp_prime = block(&p.recontext_block, store, &hp, &se_prime, &se_prime);
    add(&linear(&hp_prime, store, &p.fusion), h)
}

/// Visual-context attention pooling: the attention weights over the rows of
/// `h` and the pooled row. An empty `h` pools to zeros with no weights.
pub fn vkac(p: &VkacParams, store: &ParamStore, f_v: &[f64], h: &Mat) -> (Vec<f64>, Vec<f64>) {
    let d = f_v.len();
    if h.is_empty() {
        return (Vec::new(), vec![0.0; d]);
    }
    let q = linear(&vec![f_v.to_vec()], store, &p.theta).remove(0);
    let k = linear(h, store, &p.phi);
    let v = linear(h, store, &p.psi);
    let scores: Vec<f64> = k.iter().map(|ki| (0..d).map(|j| q[j] * ki[j]).sum::<f64>() / (d as f64).sqrt()).collect();
    let w = softmax(&scores);
    let att: Vec<f64> = (0..d).map(|j| (0..h.len()).map(|i| w[i] * v[i][j]).sum()).collect();
    let mapped = linear(&vec![att.clone()], store, &p.kappa).remove(0);
    let out = mapped.iter().zip(&att).map(|(a, b)| a + b).collect();
    (w, out)
}

fn normalize(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn sort_entries(list: &mut [(String, f64)]) {
    // selection sort by (prior desc, id asc)
    for i in 0..list.len() {
        for j in i + 1..list.len() {
            let (a, b) = (&list[i], &list[j]);
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                list.swap(i, j);
            }
        }
    }
}

/// Priors from raw co-occurrence counts: each source with a positive total for
/// a mention contributes its normalized counts; the contributions are
/// averaged. Zero-prior entities are dropped and mentions without any entity
/// are absent.
pub fn prior_table(sources: &[CountTable]) -> BTreeMap<String, Vec<(String, f64)>> {
    let mut merged: BTreeMap<String, Vec<BTreeMap<String, f64>>> = BTreeMap::new();
    for src in sources {
        let mut local: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (m, counts) in src {
            for (e, c) in counts {
                *local.entry(normalize(m)).or_default().entry(e.clone()).or_default() += c;
            }
        }
        for (m, counts) in local {
            merged.entry(m).or_default().push(counts);
        }
    }
    let mut out = BTreeMap::new();
    for (m, lists) in merged {
        let live: Vec<&BTreeMap<String, f64>> = lists.iter().filter(|c| c.values().sum::<f64>() > 0.0).collect();
        let mut ids: Vec<&String> = live.iter().flat_map(|c| c.keys()).collect();
        ids.sort();
        ids.dedup();
        let mut entries: Vec<(String, f64)> = ids
            .into_iter()
            .map(|id| {
                let p: f64 = live.iter().map(|c| c.get(id).copied().unwrap_or(0.0) / c.values().sum::<f64>()).sum();
                (id.clone(), p / live.len() as f64)
            })
            .filter(|e| e.1 > 0.0)
            .collect();
        sort_entries(&mut entries);
        if !entries.is_empty() {
            out.insert(m, entries);
        }
    }
    out
}

/// The `c` highest-prior entities of `mention`, found by repeatedly pulling
/// the best remaining entry (ties to the smaller id).
pub fn top_candidates(table: &MentionPriorTable, mention: &str, c: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = table
        .get(&normalize(mention))
        .map(|l| l.iter().map(|e| (e.entity_id.clone(), e.prior)).collect())
        .unwrap_or_default();
    let mut want = Vec::new();
    while want.len() < c && !all.is_empty() {
        let mut best = 0;
        for (i, e) in all.iter().enumerate() {
            let b = &all[best];
            if e.1 > b.1 || (e.1 == b.1 && e.0 < b.0) {
                best = i;
            }
        }
        want.push(all.remove(best));
    }
    want
}

/// AP with each item's rank counted pairwise (ties to the lower index).
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count() + 1;
    let pos: Vec<usize> = (0..n).filter(|&i| relevant[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let above = pos.iter().filter(|&&j| rank(j) <= rank(i)).count();
            above as f64 / rank(i) as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

/// Per-class AP and their mean over classes that have a positive.
pub fn mean_average_precision(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let rel: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            average_precision(&scores, &rel)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per, map)
}
