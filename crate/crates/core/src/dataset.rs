//! Line-delimited sample files.
//!
//! One sample per line, tab-separated:
//!
//! ```text
//! <label> \t feat \t <v1 v2 ... vD> [\t <order>:<text>]...
//! <label> \t image \t <path.ppm>    [\t <order>:<text>]...
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Relative image paths
//! are resolved against the dataset file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{format_f64, parse_f64, Tensor};
use crate::text::TextInstance;

#[derive(Clone, Debug, PartialEq)]
pub enum Visual {
    /// `1 × D` precomputed feature.
    Feature(Tensor),
    Image(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub visual: Visual,
    /// Possibly empty.
    pub texts: Vec<TextInstance>,
    pub label: usize,
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, s) in samples.iter().enumerate() {
        out.push_str(&s.label.to_string());
        match &s.visual {
            Visual::Feature(t) => {
                let vals: Vec<String> = t.data().iter().map(|v| format_f64(*v)).collect();
                out.push_str("\tfeat\t");
                out.push_str(&vals.join(" "));
            }
            Visual::Image(p) => {
                let p = p.to_str().filter(|p| !p.contains(['\t', '\n'])).ok_or_else(|| Error::Sample {
                    index: i,
                    msg: "image path is not tab-free UTF-8".into(),
                })?;
                out.push_str("\timage\t");
                out.push_str(p);
            }
        }
        for t in &s.texts {
            if t.text.contains(['\t', '\n', '\r']) {
                return Err(Error::Sample { index: i, msg: format!("text `{}` contains a tab or newline", t.text) });
            }
            out.push_str(&format!("\t{}:{}", t.spot_order, t.text));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let body = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let ln = i + 1;
        let err = |msg: String| Error::parse(path, ln, msg);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(err("expected label, visual tag and payload".into()));
        }
        let label = fields[0].parse::<usize>().map_err(|_| err(format!("bad label `{}`", fields[0])))?;
        let visual = match fields[1] {
            "feat" => {
                let vals = fields[2]
                    .split(' ')
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_f64(s).ok_or_else(|| err(format!("bad number `{s}`"))))
                    .collect::<Result<Vec<_>>>()?;
                if vals.is_empty() {
                    return Err(err("empty feature vector".into()));
                }
                Visual::Feature(Tensor::row(vals))
            }
            "image" => {
                if fields[2].is_empty() {
                    return Err(err("empty image path".into()));
                }
                Visual::Image(PathBuf::from(fields[2]))
            }
            other => return Err(err(format!("unknown visual tag `{other}`"))),
        };
        let texts = fields[3..]
            .iter()
            .map(|f| {
                let (order, text) = f.split_once(':').ok_or_else(|| err(format!("text field `{f}` lacks `order:`")))?;
                let order = order.parse::<u32>().map_err(|_| err(format!("bad spot order `{order}`")))?;
                TextInstance::new(text, order).map_err(|e| err(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample { visual, texts, label });
    }
    Ok(samples)
}

/// Absolute location of an image referenced from `dataset_path`.
pub fn resolve_image(dataset_path: &Path, image: &Path) -> PathBuf {
    if image.is_absolute() {
        image.to_path_buf()
    } else {
        dataset_path.parent().unwrap_or(Path::new("")).join(image)
    }
}
