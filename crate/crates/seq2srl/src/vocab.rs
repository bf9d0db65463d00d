//! The shared token inventory: word vocabulary V, bracket-label set L,
//! and the extended per-instance output space V ∪ L ∪ X.
//!
//! V holds the frequent, embedding-covered training words plus the four
//! specials (UNK, the predicate marker, BOS, EOS). L holds the single
//! common opening bracket `(#` and one closing bracket per role seen in
//! training targets, e.g. `p0:a1)`. Extended ids number words first, then
//! labels; per-instance source positions extend the event space at the
//! model level.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linearize::Instance;

pub const UNK: &str = "<unk>";
pub const PRED_MARKER: &str = "<pred>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const OPEN_BRACKET: &str = "(#";

/// Rendered closing bracket for a role, e.g. `A1` → `p0:a1)`.
pub fn close_bracket(role: &str) -> String {
    format!("p0:{})", role.to_lowercase())
}

/// Inverse of [`close_bracket`]; roles are normalized to upper case.
pub fn role_of_close_bracket(token: &str) -> Option<String> {
    token
        .strip_prefix("p0:")
        .and_then(|rest| rest.strip_suffix(')'))
        .filter(|role| !role.is_empty())
        .map(str::to_uppercase)
}

pub fn is_bracket_token(token: &str) -> bool {
    token == OPEN_BRACKET || role_of_close_bracket(token).is_some()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Vocabulary {
    /// V: specials followed by kept words, each with its training frequency.
    pub words: Vec<(String, usize)>,
    /// L: `(#` followed by the closing brackets, in first-seen order.
    pub labels: Vec<String>,
    /// UNK threshold the vocabulary was built with.
    pub threshold: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build V and L from linearized training instances. A word is kept
    /// when its frequency over instance sources reaches `threshold` and,
    /// if an embedding coverage set is given, the embedding file covers
    /// it; everything else maps to UNK.
    pub fn build(
        instances: &[Instance],
        threshold: usize,
        coverage: Option<&std::collections::HashSet<String>>,
    ) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for inst in instances {
            for tok in &inst.source {
                if tok != PRED_MARKER {
                    *freq.entry(tok.clone()).or_insert(0) += 1;
                }
            }
        }

        let mut kept: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(w, c)| {
                *c >= threshold && coverage.map_or(true, |cov| cov.contains(w.as_str()))
            })
            .collect();
        kept.sort();

        let mut words = vec![
            (UNK.to_string(), 0),
            (PRED_MARKER.to_string(), 0),
            (BOS.to_string(), 0),
            (EOS.to_string(), 0),
        ];
        words.extend(kept);

        let mut labels = vec![OPEN_BRACKET.to_string()];
        for inst in instances {
            for tok in &inst.target {
                if role_of_close_bracket(tok).is_some() && !labels.iter().any(|l| l == tok) {
                    labels.push(tok.clone());
                }
            }
        }

        let mut v = Vocabulary {
            words,
            labels,
            threshold,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .map(|(w, _)| w.clone())
            .chain(self.labels.iter().cloned())
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
    }

    pub fn v_size(&self) -> usize {
        self.words.len()
    }

    pub fn l_size(&self) -> usize {
        self.labels.len()
    }

    /// |V| + |L|, the generate-mode event count.
    pub fn total(&self) -> usize {
        self.v_size() + self.l_size()
    }

    /// Extended id of a token, falling back to UNK for unknown words.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        if id < self.v_size() {
            &self.words[id].0
        } else {
            &self.labels[id - self.v_size()]
        }
    }

    pub fn is_label(&self, id: usize) -> bool {
        id >= self.v_size()
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn pred_id(&self) -> usize {
        1
    }

    pub fn bos_id(&self) -> usize {
        2
    }

    pub fn eos_id(&self) -> usize {
        3
    }

    pub fn contains_word(&self, token: &str) -> bool {
        self.index
            .get(token)
            .map(|&i| i < self.v_size())
            .unwrap_or(false)
    }

    /// SHA-256 over the word and label inventories; stored in checkpoints
    /// so decode can refuse a mismatched vocabulary.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (w, _) in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for l in &self.labels {
            h.update(l.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocabulary = serde_json::from_str(text)?;
        v.rebuild_index();
        Ok(v)
    }
}

/// A GloVe-format text embedding file: one `word f1 … fd` line per word.
pub struct GloveFile {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl GloveFile {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        let mut dim = 0usize;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let word = it
                .next()
                .ok_or_else(|| Error::parse(i + 1, "empty embedding line"))?
                .to_string();
            let values: Vec<f64> = it
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(i + 1, format!("bad float {t:?}")))
                })
                .collect::<Result<_>>()?;
            if dim == 0 {
                dim = values.len();
            } else if values.len() != dim {
                return Err(Error::parse(
                    i + 1,
                    format!("embedding width {} differs from {}", values.len(), dim),
                ));
            }
            vectors.insert(word, values);
        }
        Ok(GloveFile { dim, vectors })
    }

    pub fn coverage_set(&self) -> std::collections::HashSet<String> {
        self.vectors.keys().cloned().collect()
    }
}

/// Initialize the shared V ∪ L embedding table. Words covered by the
/// embedding file take the file values verbatim; everything else (labels,
/// specials, uncovered words) draws from U(−0.1, 0.1). Returns the table
/// and the number of covered words.
pub fn init_embeddings(
    vocab: &Vocabulary,
    embed_dim: usize,
    glove: Option<&GloveFile>,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, usize)> {
    if let Some(g) = glove {
        if g.dim != 0 && g.dim != embed_dim {
            return Err(Error::Config(format!(
                "embedding file width {} does not match embed_dim {}",
                g.dim, embed_dim
            )));
        }
    }
    let rows = vocab.total();
    let mut table = Vec::with_capacity(rows * embed_dim);
    let mut covered = 0usize;
    for id in 0..rows {
        let tok = vocab.token(id);
        match glove.and_then(|g| g.vectors.get(tok)) {
            Some(vec) if id < vocab.v_size() => {
                table.extend_from_slice(vec);
                covered += 1;
            }
            _ => {
                for _ in 0..embed_dim {
                    table.push(rng.gen_range(-0.1..0.1));
                }
            }
        }
    }
    Ok((table, covered))
}
