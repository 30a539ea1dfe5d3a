//! Synthetic benchmark where the class is carried by entity knowledge, not by
//! the literal tokens.
//!
//! Mention strings are a prefix word plus a suffix word-piece, e.g. `kalo` +
//! `##mitu` → `kalomitu`. Prefix `i` and suffix `j = m + M·t` form a mention
//! of class `(o_t(i) + m) mod M`, where the offset `o_t` is a random
//! permutation of `i mod M` chosen per `(t, i mod T)`. Every prefix and every
//! suffix occurs with every class equally often. Each mention links to `K`
//! entities; the top-prior one lies in its class's embedding cluster.
//! Mentions with `t ≡ i (mod T)` are held out for evaluation: their token
//! pairs never occur in training, though every piece does.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_dataset, Sample, Visual};
use crate::error::{Error, Result};
use crate::kb::{save_kb, select_candidates, EntityRecord, EntityStore, MentionPriorTable, PriorEntry};
use crate::model::{Model, ModelConfig, Resources, TextBranch};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::text::{tokenize, TextInstance, Vocab, UNK_TOKEN};
use crate::train::{evaluate, train, Evaluation, Example, OptimConfig, TrainOptions};
use crate::vision::{write_ppm, ImageTensor};

pub const TRAIN_FILE: &str = "train.tsv";
pub const EVAL_FILE: &str = "eval.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const KB_DIR: &str = "kb";

pub const TOP_PRIOR: f64 = 0.6;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const OFFSET_STREAM: u64 = 0x0ff5;
const ORDER_STREAM: u64 = 0x04d3;
const IMAGE_STREAM: u64 = 0x1a6e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// M.
    pub num_classes: usize,
    /// Upper bound on distinct mention strings; rounded down to a multiple of the balanced block size.
    pub mention_vocab: usize,
    /// K entities per mention.
    pub homonyms: usize,
    /// E.
    pub entity_dim: usize,
    /// Visual feature dimension.
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Weight of the class center in the visual feature.
    pub alpha: f64,
    /// Spread of entity embeddings around their cluster center.
    pub sigma: f64,
    /// Class mentions per sample.
    pub texts_per_sample: usize,
    /// Class-independent mentions per sample whose entities lie off the clusters.
    pub noise_texts: usize,
    /// Mentions per sample taken from one other class, drawn per sample.
    pub decoy_texts: usize,
    pub noise_mentions: usize,
    /// Norm of the noise mentions' entity embeddings, in units of the center norm.
    pub noise_norm: f64,
    /// Factor applied to every entity embedding; centers are unit vectors before it.
    pub entity_norm: f64,
    /// Weight of the direction shared by all entity cluster centers.
    pub shared_direction: f64,
    /// Give every candidate of a mention the same prior.
    pub equalize_priors: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            mention_vocab: 144,
            homonyms: 2,
            entity_dim: 16,
            feature_dim: 16,
            train_per_class: 50,
            eval_per_class: 25,
            alpha: 0.0,
            sigma: 0.0,
            texts_per_sample: 5,
            noise_texts: 0,
            decoy_texts: 0,
            noise_mentions: 8,
            noise_norm: 2.0,
            entity_norm: 8.0,
            shared_direction: 0.0,
            equalize_priors: false,
            seed: 0,
        }
    }
}

/// Smallest `T ≥ 2` coprime with `m`.
pub fn period_for(m: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    (2..).find(|t| gcd(*t, m) == 1).expect("some integer is coprime")
}

/// Fewest mention strings a balanced vocabulary for `m` classes can have.
pub fn min_mention_vocab(m: usize) -> usize {
    let t = period_for(m);
    m * m * t * t
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Infeasible(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.homonyms < 2 {
            return bad(format!("homonym count K must be at least 2, got {}", self.homonyms));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.sigma >= 0.0) || !(self.noise_norm >= 0.0) || !(self.entity_norm > 0.0) {
            return bad("alpha must lie in [0, 1]; sigma and noise_norm must be ≥ 0; entity_norm > 0".into());
        }
        if !(0.0..=1.0).contains(&self.shared_direction) {
            return bad("shared_direction must lie in [0, 1]".into());
        }
        if self.entity_dim == 0 || self.feature_dim == 0 || self.texts_per_sample == 0 {
            return bad("entity_dim, feature_dim and texts_per_sample must be positive".into());
        }
        if self.noise_texts > 0 && self.noise_mentions == 0 {
            return bad("noise_texts needs noise_mentions > 0".into());
        }
        let min = min_mention_vocab(self.num_classes);
        if self.mention_vocab < min {
            return bad(format!(
                "mention_vocab {} too small for {} balanced classes; minimum is {min}",
                self.mention_vocab, self.num_classes
            ));
        }
        let words = self.prefix_count() + self.suffix_count() + self.noise_mentions;
        let available = (CONSONANTS.len() * VOWELS.len()).pow(2);
        if words > available {
            return bad(format!("{words} pseudo-words requested, only {available} available"));
        }
        Ok(())
    }

    fn blocks(&self) -> usize {
        self.mention_vocab / min_mention_vocab(self.num_classes)
    }

    fn prefix_count(&self) -> usize {
        self.num_classes * period_for(self.num_classes) * self.blocks()
    }

    fn suffix_count(&self) -> usize {
        self.num_classes * period_for(self.num_classes)
    }
}

fn syllable(n: usize) -> [u8; 2] {
    [CONSONANTS[(n / VOWELS.len()) % CONSONANTS.len()], VOWELS[n % VOWELS.len()]]
}

/// Distinct four-letter consonant-vowel word for each `n < 4900`.
fn pseudo_word(n: usize) -> String {
    let per = CONSONANTS.len() * VOWELS.len();
    let [a, b] = syllable(n / per);
    let [c, d] = syllable(n % per);
    String::from_utf8(vec![a, b, c, d]).expect("ascii")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mention {
    pub text: String,
    pub class: usize,
    /// Held out from training.
    pub eval: bool,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub entities: EntityStore,
    pub priors: MentionPriorTable,
    pub vocab: Vocab,
    pub mentions: Vec<Mention>,
    /// Unit-norm entity cluster centers, one per class.
    pub entity_centers: Vec<Vec<f64>>,
    /// Unit-norm visual class centers.
    pub visual_centers: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn axpy(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(p, q)| a * p + b * q).collect()
}

/// Builds the dataset, knowledge base, priors and vocabulary for `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let m = spec.num_classes;
    let t_len = period_for(m);
    let p_len = spec.prefix_count();
    let q_len = spec.suffix_count();
    let e = spec.entity_dim;
    let mut rng = rng::seeded(spec.seed);

    let prefixes: Vec<String> = (0..p_len).map(pseudo_word).collect();
    let suffixes: Vec<String> = (p_len..p_len + q_len).map(pseudo_word).collect();
    let noise_words: Vec<String> = (p_len + q_len..p_len + q_len + spec.noise_mentions).map(pseudo_word).collect();

    let mut tokens = vec![UNK_TOKEN.to_string()];
    tokens.extend(prefixes.iter().cloned());
    tokens.extend(suffixes.iter().map(|s| format!("##{s}")));
    tokens.extend(noise_words.iter().cloned());
    let vocab = Vocab::new(tokens)?;

    let shared = unit(gaussian(&mut rng, e, 1.0));
    let entity_centers: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let own = unit(gaussian(&mut rng, e, 1.0));
            unit(axpy(spec.shared_direction, &shared, 1.0 - spec.shared_direction, &own))
        })
        .collect();
    let visual_centers: Vec<Vec<f64>> = (0..m).map(|_| unit(gaussian(&mut rng, spec.feature_dim, 1.0))).collect();

    // class-ordered mention lists; round r visits every prefix once
    let mut train_lists: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut eval_lists: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut mentions = Vec::new();
    let mut index = BTreeMap::new();
    let mut mention_id = |i: usize, j: usize, class: usize, eval: bool, mentions: &mut Vec<Mention>| {
        *index.entry((i, j)).or_insert_with(|| {
            mentions.push(Mention { text: format!("{}{}", prefixes[i], suffixes[j]), class, eval });
            mentions.len() - 1
        })
    };
    // class offset of prefix i next to suffix group t: an independent permutation
    // of Z_m per (t, i mod T), so pairs held out for eval (t = i mod T) use
    // offsets that no training pair reveals
    let offsets: Vec<Vec<Vec<usize>>> = (0..t_len)
        .map(|t| {
            (0..t_len)
                .map(|a| {
                    let mut p: Vec<usize> = (0..m).collect();
                    p.shuffle(&mut rng::derive(spec.seed, &[OFFSET_STREAM, t as u64, a as u64]));
                    p
                })
                .collect()
        })
        .collect();
    let offset = |i: usize, t: usize| offsets[t][i % t_len][i % m];
    for c in 0..m {
        for r in 0..t_len - 1 {
            for i in 0..p_len {
                let a = i % t_len;
                let t = (a + r + 1) % t_len;
                let mm = (c + m - offset(i, t)) % m;
                train_lists[c].push(mention_id(i, mm + m * t, c, false, &mut mentions));
            }
            // random order inside a round so co-occurring prefixes carry no pattern
            let start = train_lists[c].len() - p_len;
            train_lists[c][start..].shuffle(&mut rng::derive(spec.seed, &[ORDER_STREAM, c as u64, r as u64]));
        }
        for i in 0..p_len {
            let a = i % t_len;
            let mm = (c + m - offset(i, a)) % m;
            eval_lists[c].push(mention_id(i, mm + m * a, c, true, &mut mentions));
        }
        eval_lists[c].shuffle(&mut rng::derive(spec.seed, &[ORDER_STREAM, c as u64, t_len as u64]));
    }

    let mut entities = EntityStore::new();
    let mut priors = MentionPriorTable::new();
    let k = spec.homonyms;
    let (top, rest) = if spec.equalize_priors {
        (1.0 / k as f64, 1.0 / k as f64)
    } else {
        (TOP_PRIOR, (1.0 - TOP_PRIOR) / (k - 1) as f64)
    };
    for (n, mention) in mentions.iter().enumerate() {
        let mut list = Vec::with_capacity(k);
        for h in 0..k {
            let class = if h == 0 {
                mention.class
            } else {
                (mention.class + rng.random_range(1..m)) % m
            };
            let emb = axpy(1.0, &entity_centers[class], 1.0, &gaussian(&mut rng, e, spec.sigma / (e as f64).sqrt()));
            let emb = emb.into_iter().map(|x| x * spec.entity_norm).collect();
            let id = format!("m{n}_e{h}");
            entities.insert(EntityRecord::new(id.clone(), format!("{} #{h}", mention.text), emb))?;
            list.push(PriorEntry { entity_id: id, prior: if h == 0 { top } else { rest } });
        }
        priors.insert(&mention.text, list)?;
    }
    for (n, word) in noise_words.iter().enumerate() {
        let mut list = Vec::with_capacity(k);
        for h in 0..k {
            let emb: Vec<f64> = unit(gaussian(&mut rng, e, 1.0)).into_iter().map(|x| x * spec.noise_norm * spec.entity_norm).collect();
            let id = format!("noise{n}_e{h}");
            entities.insert(EntityRecord::new(id.clone(), format!("{word} #{h}"), emb))?;
            list.push(PriorEntry { entity_id: id, prior: if h == 0 { top } else { rest } });
        }
        priors.insert(word, list)?;
    }

    let make_split = |lists: &[Vec<usize>], per_class: usize, rng: &mut Rng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * m);
        for s in 0..per_class {
            for (c, list) in lists.iter().enumerate() {
                let mut texts: Vec<String> = (0..spec.texts_per_sample)
                    .map(|q| mentions[list[(s * spec.texts_per_sample + q) % list.len()]].text.clone())
                    .collect();
                if spec.decoy_texts > 0 {
                    let other = &lists[(c + rng.random_range(1..m)) % m];
                    let start = rng.random_range(0..other.len());
                    texts.extend((0..spec.decoy_texts).map(|q| mentions[other[(start + q) % other.len()]].text.clone()));
                }
                texts.extend(
                    (0..spec.noise_texts).map(|q| noise_words[(s * spec.noise_texts + q) % noise_words.len()].clone()),
                );
                let mut order: Vec<u32> = (0..texts.len() as u32).collect();
                order.shuffle(rng);
                let texts = texts
                    .into_iter()
                    .zip(order)
                    .map(|(t, o)| TextInstance::new(t, o).expect("pseudo-words are non-empty"))
                    .collect();
                let noise = gaussian(rng, spec.feature_dim, 1.0 / (spec.feature_dim as f64).sqrt());
                let feat = axpy(spec.alpha, &visual_centers[c], 1.0 - spec.alpha, &noise);
                out.push(Sample { visual: Visual::Feature(Tensor::row(feat)), texts, label: c });
            }
        }
        out
    };
    let train = make_split(&train_lists, spec.train_per_class, &mut rng);
    let eval = make_split(&eval_lists, spec.eval_per_class, &mut rng);

    Ok(SynthData {
        spec: spec.clone(),
        train,
        eval,
        entities,
        priors,
        vocab,
        mentions,
        entity_centers,
        visual_centers,
    })
}

impl SynthData {
    pub fn resources(&self) -> Resources {
        Resources { vocab: self.vocab.clone(), entities: self.entities.clone(), priors: self.priors.clone() }
    }

    /// `base` with the data-dependent sizes filled in.
    pub fn model_config(&self, base: ModelConfig) -> ModelConfig {
        let mut cfg = base;
        cfg.dim = self.spec.feature_dim;
        cfg.num_classes = self.spec.num_classes;
        cfg.encoder.vocab_size = self.vocab.len();
        cfg.karc.entity_dim = self.spec.entity_dim;
        cfg.vision.use_precomputed = true;
        cfg
    }

    /// Writes `train.tsv`, `eval.tsv`, `vocab.txt` and `kb/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_dataset(&self.train, &dir.join(TRAIN_FILE))?;
        save_dataset(&self.eval, &dir.join(EVAL_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        save_kb(&self.entities, &self.priors, &dir.join(KB_DIR))
    }

    /// Replaces every visual feature by an image that encodes it through a fixed
    /// random pixel basis, written as `images/<split>-<n>.ppm` under `dir`.
    pub fn render_images(&mut self, dir: &Path, size: usize) -> Result<()> {
        let d = self.spec.feature_dim;
        let mut rng = rng::derive(self.spec.seed, &[IMAGE_STREAM]);
        let basis: Vec<Vec<f64>> = (0..size * size * 3).map(|_| gaussian(&mut rng, d, 1.0)).collect();
        fs::create_dir_all(dir.join("images"))?;
        for (split, samples) in [("train", &mut self.train), ("eval", &mut self.eval)] {
            for (n, s) in samples.iter_mut().enumerate() {
                let Visual::Feature(f) = &s.visual else { continue };
                let f = f.data().to_vec();
                let img = ImageTensor::from_fn(size, size, |y, x, c| {
                    let b = &basis[(y * size + x) * 3 + c];
                    let z: f64 = b.iter().zip(&f).map(|(p, q)| p * q).sum();
                    1.0 / (1.0 + (-2.0 * z).exp())
                });
                let rel = format!("images/{split}-{n}.ppm");
                write_ppm(&img, &dir.join(&rel))?;
                s.visual = Visual::Image(rel.into());
            }
        }
        Ok(())
    }
}

/// Per mention, how many times it occurs in each class of `samples`.
pub fn mention_class_counts(samples: &[Sample], num_classes: usize) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for s in samples {
        for t in &s.texts {
            out.entry(t.text.clone()).or_insert_with(|| vec![0; num_classes])[s.label] += 1;
        }
    }
    out
}

/// Empirical mutual information (nats) between word-piece token identity and
/// the label, over all token occurrences.
pub fn token_label_mutual_information(samples: &[Sample], vocab: &Vocab, num_classes: usize) -> f64 {
    let mut joint: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut total = 0.0;
    for s in samples {
        for tok in tokenize(vocab, &s.texts).token_ids {
            joint.entry(tok).or_insert_with(|| vec![0.0; num_classes])[s.label] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    let mut label = vec![0.0; num_classes];
    for row in joint.values() {
        for (c, n) in row.iter().enumerate() {
            label[c] += n;
        }
    }
    let mut mi = 0.0;
    for row in joint.values() {
        let tok: f64 = row.iter().sum();
        for (c, &n) in row.iter().enumerate() {
            if n > 0.0 {
                mi += n / total * (n * total / (tok * label[c])).ln();
            }
        }
    }
    mi
}

/// Predicts by scoring each class center against the top-prior entity of every text.
pub fn nearest_center_predict(data: &SynthData, sample: &Sample) -> Result<usize> {
    let mut scores = vec![0.0; data.spec.num_classes];
    for t in &sample.texts {
        let set = select_candidates(&data.priors, &data.entities, &t.text, 1)?;
        if let Some(top) = set.candidates.first() {
            for (c, center) in data.entity_centers.iter().enumerate() {
                scores[c] += top.embedding.data().iter().zip(center).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok(crate::metrics::argmax(&scores))
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub model: Model,
    pub evaluation: Evaluation,
}

/// The literal-text arm: `base` with KARC removed and per-token features
/// taken from a learned static embedding table, trained with the same harness.
pub fn literal_baseline(
    train_set: &[Example],
    eval_set: &[Example],
    res: &Resources,
    base: &ModelConfig,
    optim: &OptimConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<BaselineResult> {
    let mut cfg = base.clone();
    cfg.text_branch = TextBranch::Static;
    cfg.encoder.vocab_size = res.vocab.len();
    let mut model = Model::new(cfg, seed)?;
    train(&mut model, res, train_set, None, optim, opts, seed, None)?;
    let evaluation = evaluate(&model, res, eval_set)?;
    Ok(BaselineResult { model, evaluation })
}
