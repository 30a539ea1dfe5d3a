//! Scene-text instances → word-piece tokens → linkable spans.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{normalize_mention, select_candidates, CandidateSet, EntityStore, MentionPriorTable, TokenSpan};
use crate::rng;

pub const UNK_TOKEN: &str = "[UNK]";
const MAX_WORD_CHARS: usize = 100;

/// One spotted text string and its position in the spotter's reading order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInstance {
    pub text: String,
    pub spot_order: u32,
}

impl TextInstance {
    pub fn new(text: impl Into<String>, spot_order: u32) -> Result<Self> {
        let text = text.into();
        if normalize_mention(&text).is_empty() {
            return Err(Error::Usage("text instance is empty after normalization".into()));
        }
        Ok(TextInstance { text, spot_order })
    }
}

/// Orders instances for one forward pass.
///
/// With `shuffle` off the spotting order is kept (stable on ties); with it on,
/// the instances are permuted by a generator seeded from `seed`.
pub fn assemble_sentence(instances: &[TextInstance], shuffle: bool, seed: u64) -> Vec<TextInstance> {
    let mut out = instances.to_vec();
    if shuffle {
        out.shuffle(&mut rng::seeded(seed));
    } else {
        out.sort_by_key(|t| t.spot_order);
    }
    out
}

/// Word-piece vocabulary; line number in the vocabulary file is the id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Usage(format!("vocabulary entry {i} `{t}` is empty or has whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let unk = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::Usage(format!("vocabulary lacks {UNK_TOKEN}")))?;
        Ok(Vocab { tokens, index, unk })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Vocab::new(tokens).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Greedy longest-match word pieces for one whitespace-free word.
    /// A word that cannot be fully covered becomes a single unknown token.
    pub fn word_pieces(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return vec![self.unk];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                let piece: String = chars[start..end].iter().collect();
                let key = if start > 0 { format!("##{piece}") } else { piece };
                if let Some(id) = self.id(&key) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![self.unk],
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceSpan {
    pub instance: usize,
    pub tokens: TokenSpan,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    /// One span per instance, in sentence order, non-overlapping.
    pub spans: Vec<InstanceSpan>,
    /// Normalized text of each instance, used as the lookup mention.
    pub mentions: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tokenizes each instance separately and records its token range.
pub fn tokenize(vocab: &Vocab, instances: &[TextInstance]) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for (i, inst) in instances.iter().enumerate() {
        let mention = normalize_mention(&inst.text);
        let start = seq.token_ids.len();
        for word in mention.split(' ').filter(|w| !w.is_empty()) {
            seq.token_ids.extend(vocab.word_pieces(word));
        }
        seq.spans.push(InstanceSpan {
            instance: i,
            tokens: TokenSpan::new(start, seq.token_ids.len()),
        });
        seq.mentions.push(mention);
    }
    seq
}

/// One candidate set per instance whose whole text is a known mention.
///
/// Mentions never extend across instances: two adjacent instances that only
/// form a known mention together produce nothing.
pub fn link_spans(
    seq: &TokenSequence,
    table: &MentionPriorTable,
    store: &EntityStore,
    c: usize,
) -> Result<Vec<CandidateSet>> {
    let mut out = Vec::new();
    for span in &seq.spans {
        let mention = &seq.mentions[span.instance];
        if table.get(mention).is_none() || span.tokens.is_empty() {
            continue;
        }
        out.push(select_candidates(table, store, mention, c)?.with_span(span.tokens));
    }
    Ok(out)
}
