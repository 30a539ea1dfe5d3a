//! The full classifier: text branch, visual branch, fusion and head, plus
//! checkpoint IO.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::{EncoderConfig, EncoderParams, KarcConfig, StaticEmbedding};
use crate::error::{Error, Result};
use crate::kb::{CandidateSet, EntityStore, MentionPriorTable};
use crate::params::{LinearMap, ParamStore};
use crate::rng;
use crate::tensor::{format_f64, parse_f64, Tensor};
use crate::text::{assemble_sentence, link_spans, tokenize, TextInstance, TokenSequence, Vocab};
use crate::vision::{encode_image, VisionConfig, VisionParams, VisualInput};
use crate::vkac::{classify_logits, loss, mean_pool, vkac_traced, ClassifierParams, LossForm, VkacParams};

const CHECKPOINT_MAGIC: &str = "knowmine-checkpoint v1";

/// How scene text becomes per-token features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextBranch {
    /// Ignore text; the classifier sees zeros for the text half.
    None,
    /// Learned static token embeddings, no positions or encoder layers.
    Static,
    /// Encoder layers without knowledge injection.
    Encoder,
    /// Encoder with KARC inserted.
    #[default]
    Knowledge,
}

/// How per-token features are pooled to one row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Vkac,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_classes: usize,
    pub text_branch: TextBranch,
    pub fusion: Fusion,
    pub encoder: EncoderConfig,
    pub karc: KarcConfig,
    pub vision: VisionConfig,
    pub loss: LossForm,
    /// Auxiliary per-branch heads used by two-stage training.
    pub aux_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            num_classes: 2,
            text_branch: TextBranch::default(),
            fusion: Fusion::default(),
            encoder: EncoderConfig::default(),
            karc: KarcConfig::default(),
            vision: VisionConfig::default(),
            loss: LossForm::default(),
            aux_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !self.dim.is_multiple_of(self.encoder.heads) {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.encoder.heads)));
        }
        if matches!(self.text_branch, TextBranch::Encoder | TextBranch::Knowledge | TextBranch::Static) {
            if self.text_branch != TextBranch::Static {
                self.encoder.validate()?;
            } else if self.encoder.vocab_size == 0 {
                return Err(Error::Config("static text branch needs vocab_size > 0".into()));
            }
        }
        if self.text_branch == TextBranch::Knowledge && (self.karc.candidates == 0 || self.karc.entity_dim == 0) {
            return Err(Error::Config("KARC needs candidates ≥ 1 and entity_dim ≥ 1".into()));
        }
        if !self.vision.use_precomputed {
            self.vision.validate()?;
        }
        Ok(())
    }

    pub fn uses_kb(&self) -> bool {
        self.text_branch == TextBranch::Knowledge
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextParams {
    None,
    Static(StaticEmbedding),
    Encoder(EncoderParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxHeads {
    pub text: Option<LinearMap>,
    pub vision: Option<LinearMap>,
}

/// Parameters and structure of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextParams,
    pub vision: Option<VisionParams>,
    pub vkac: Option<VkacParams>,
    pub classifier: ClassifierParams,
    pub aux: Option<AuxHeads>,
}

/// Per-sample inputs after sentence assembly, tokenization and linking.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub visual: VisualInput,
    pub seq: TokenSequence,
    pub sets: Vec<CandidateSet>,
}

/// Vocabulary and knowledge base needed to prepare inputs.
#[derive(Clone, Debug)]
pub struct Resources {
    pub vocab: Vocab,
    pub entities: EntityStore,
    pub priors: MentionPriorTable,
}

/// Handles into one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub f_v: Var,
    /// Per-token features `N × D`.
    pub h: Var,
    pub h_out: Var,
    pub logits: Var,
    pub probs: Var,
    pub attention: Option<Var>,
}

impl Model {
    /// Builds a freshly initialized model; parameter order and values depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed);
        let d = config.dim;
        let text = match config.text_branch {
            TextBranch::None => TextParams::None,
            TextBranch::Static => {
                TextParams::Static(StaticEmbedding::new(&mut store, "text.static", config.encoder.vocab_size, d, &mut r)?)
            }
            TextBranch::Encoder | TextBranch::Knowledge => {
                let karc = config.uses_kb().then_some(&config.karc);
                TextParams::Encoder(EncoderParams::new(&mut store, "text.encoder", d, &config.encoder, karc, &mut r)?)
            }
        };
        let vision = (!config.vision.use_precomputed)
            .then(|| VisionParams::new(&mut store, "vision", d, &config.vision, &mut r))
            .transpose()?;
        let vkac = (config.fusion == Fusion::Vkac)
            .then(|| VkacParams::new(&mut store, "vkac", d, &mut r))
            .transpose()?;
        let classifier = ClassifierParams::new(&mut store, "classifier", d, config.num_classes, &mut r)?;
        let aux = if config.aux_heads {
            let m = config.num_classes;
            Some(AuxHeads {
                text: (!matches!(text, TextParams::None))
                    .then(|| LinearMap::new(&mut store, "aux.text_head", d, m, &mut r))
                    .transpose()?,
                vision: vision
                    .is_some()
                    .then(|| LinearMap::new(&mut store, "aux.vision_head", d, m, &mut r))
                    .transpose()?,
            })
        } else {
            None
        };
        Ok(Model {
            config,
            store,
            text,
            vision,
            vkac,
            classifier,
            aux,
        })
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.store)
    }

    /// Orders, tokenizes and links one sample's texts.
    pub fn prepare(
        &self,
        res: &Resources,
        texts: &[TextInstance],
        visual: VisualInput,
        shuffle: bool,
        seed: u64,
    ) -> Result<ModelInput> {
        let ordered = assemble_sentence(texts, shuffle, seed);
        let seq = tokenize(&res.vocab, &ordered);
        let out_of_range = seq.token_ids.iter().find(|&&t| t >= self.config.encoder.vocab_size);
        if let (Some(&bad), false) = (out_of_range, matches!(self.text, TextParams::None)) {
            return Err(Error::Usage(format!(
                "token id {bad} outside model vocabulary of {}",
                self.config.encoder.vocab_size
            )));
        }
        let sets = if self.config.uses_kb() {
            let sets = link_spans(&seq, &res.priors, &res.entities, self.config.karc.candidates)?;
            if let Some(c) = sets.iter().flat_map(|s| &s.candidates).find(|c| c.embedding.cols() != self.config.karc.entity_dim) {
                return Err(Error::Usage(format!(
                    "entity `{}` has dimension {}, model expects {}",
                    c.entity_id,
                    c.embedding.cols(),
                    self.config.karc.entity_dim
                )));
            }
            sets
        } else {
            Vec::new()
        };
        Ok(ModelInput { visual, seq, sets })
    }

    /// Per-token text features `N × D` (0 rows without text).
    pub fn text_features(&self, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
        match &self.text {
            TextParams::None => Ok(tape.constant(Tensor::zeros(&[0, self.config.dim]))),
            TextParams::Static(s) => s.encode(tape, &input.seq),
            TextParams::Encoder(e) => e.encode(tape, &input.seq, &input.sets),
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: &ModelInput) -> Result<ForwardOutput> {
        let d = self.config.dim;
        let f_v = encode_image(tape, self.vision.as_ref(), d, &input.visual)?;
        let h = self.text_features(tape, input)?;
        let (h_out, attention) = match &self.vkac {
            Some(p) => vkac_traced(tape, p, f_v, h)?,
            None => (mean_pool(tape, h, d)?, None),
        };
        let logits = classify_logits(tape, &self.classifier, f_v, h_out)?;
        let probs = tape.softmax_rows(logits)?;
        Ok(ForwardOutput {
            f_v,
            h,
            h_out,
            logits,
            probs,
            attention,
        })
    }

    /// Per-sample training loss of the main head.
    pub fn loss(&self, tape: &mut Tape, input: &ModelInput, label: usize) -> Result<Var> {
        let out = self.forward(tape, input)?;
        loss(tape, out.probs, label, self.config.loss)
    }

    /// Sum of the auxiliary branch-head losses.
    pub fn aux_loss(&self, tape: &mut Tape, input: &ModelInput, label: usize) -> Result<Var> {
        let aux = self
            .aux
            .as_ref()
            .ok_or_else(|| Error::Usage("model was built without auxiliary heads".into()))?;
        let d = self.config.dim;
        let mut terms = Vec::new();
        if let Some(head) = &aux.text {
            let h = self.text_features(tape, input)?;
            let pooled = mean_pool(tape, h, d)?;
            let logits = head.forward(tape, pooled)?;
            let p = tape.softmax_rows(logits)?;
            terms.push(loss(tape, p, label, self.config.loss)?);
        }
        if let Some(head) = &aux.vision {
            let f_v = encode_image(tape, self.vision.as_ref(), d, &input.visual)?;
            let logits = head.forward(tape, f_v)?;
            let p = tape.softmax_rows(logits)?;
            terms.push(loss(tape, p, label, self.config.loss)?);
        }
        let mut total = *terms
            .first()
            .ok_or_else(|| Error::Usage("no auxiliary head applies to this model".into()))?;
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        Ok(total)
    }

    /// Class probabilities for one prepared input.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut tape = self.tape();
        let out = self.forward(&mut tape, input)?;
        Ok(tape.value(out.probs).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = format!("{CHECKPOINT_MAGIC}\nconfig\t{config}\n");
        for (_, p) in self.store.iter() {
            let shape: Vec<String> = p.value.shape().iter().map(|s| s.to_string()).collect();
            let values: Vec<String> = p.value.data().iter().map(|v| format_f64(*v)).collect();
            out.push_str(&format!("param\t{}\t{}\t{}\n", p.name, shape.join(","), values.join(" ")));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            _ => return Err(Error::parse(path, 1, "not a checkpoint file")),
        }
        let config = match lines.next() {
            Some((i, l)) => {
                let json = l
                    .strip_prefix("config\t")
                    .ok_or_else(|| Error::parse(path, i + 1, "expected config line"))?;
                serde_json::from_str::<ModelConfig>(json).map_err(|e| Error::parse(path, i + 1, e.to_string()))?
            }
            None => return Err(Error::parse(path, 2, "missing config line")),
        };
        let mut model = Model::new(config, 0).map_err(|e| Error::parse(path, 2, e.to_string()))?;
        let mut seen = vec![false; model.store.len()];
        for (i, line) in lines {
            let ln = i + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 || fields[0] != "param" {
                return Err(Error::parse(path, ln, "expected param\\tname\\tshape\\tvalues"));
            }
            let id = model
                .store
                .find(fields[1])
                .ok_or_else(|| Error::parse(path, ln, format!("unknown parameter `{}`", fields[1])))?;
            let shape = fields[2]
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(path, ln, e.to_string()))?;
            let values = fields[3]
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| parse_f64(s).ok_or_else(|| Error::parse(path, ln, format!("bad number `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, values).map_err(|e| Error::parse(path, ln, e.to_string()))?;
            let param = model.store.get_mut(id);
            if value.shape() != param.value.shape() {
                return Err(Error::parse(
                    path,
                    ln,
                    format!("`{}` has shape {:?}, expected {:?}", param.name, value.shape(), param.value.shape()),
                ));
            }
            param.value = value;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = &model.store.iter().nth(i).expect("index in range").1.name;
            return Err(Error::parse(path, 0, format!("parameter `{name}` missing from checkpoint")));
        }
        Ok(model)
    }
}
