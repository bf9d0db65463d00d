//! Conversion between annotated sentences and (source, target) token
//! sequences, and back.
//!
//! The source side is the lowercased sentence with `<pred>` inserted
//! immediately before the first token of the chosen predicate's V span.
//! The target side is the lowercased sentence with every labeled span
//! (V included) wrapped as `(# … p0:role)`. A sentence with n predicates
//! becomes n separate instances. Delinearization strips the bracket
//! tokens back out, recovers the spans over word positions, and reports
//! whether the word sequence reproduces the source exactly — system
//! outputs may be arbitrarily malformed, so bracket repair never fails,
//! it only counts what it dropped.

use crate::conll::{AnnotatedSentence, LabeledSpan};
use crate::error::{Error, Result};
use crate::vocab::{
    close_bracket, role_of_close_bracket, Vocabulary, OPEN_BRACKET, PRED_MARKER, UNK,
};

/// Where an instance came from: sentence and predicate position in the
/// original corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Origin {
    pub sentence: usize,
    pub predicate: usize,
}

/// One linearized training/evaluation unit.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Instance {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// (source position, original word) for words replaced by UNK.
    pub unk_map: Vec<(usize, String)>,
    pub origin: Origin,
}

impl Instance {
    /// Source tokens with UNK replacements undone.
    pub fn original_source(&self) -> Vec<String> {
        let mut out = self.source.clone();
        for (pos, word) in &self.unk_map {
            out[*pos] = word.clone();
        }
        out
    }

    /// Source words without the predicate marker, UNKs restored. This is
    /// the sequence a comparable decode must reproduce.
    pub fn reference_words(&self) -> Vec<String> {
        self.original_source()
            .into_iter()
            .filter(|t| t != PRED_MARKER)
            .collect()
    }
}

/// One copy of the sentence per predicate, paired with the predicate id.
/// Sentences without predicates yield nothing.
pub fn expand_predicates(s: &AnnotatedSentence) -> Vec<(AnnotatedSentence, usize)> {
    (0..s.predicates.len()).map(|p| (s.clone(), p)).collect()
}

/// Linearize one predicate of a sentence into an [`Instance`].
pub fn linearize(s: &AnnotatedSentence, predicate: usize) -> Result<Instance> {
    let p = s
        .predicates
        .get(predicate)
        .ok_or_else(|| Error::Contract(format!("predicate id {predicate} out of range")))?;
    s.validate()?;
    let verb = p.verb_span().ok_or_else(|| {
        Error::Contract(format!("predicate {} has no V span to mark", p.lemma))
    })?;

    let lower: Vec<String> = s.tokens.iter().map(|t| t.to_lowercase()).collect();

    let mut source = Vec::with_capacity(lower.len() + 1);
    for (i, tok) in lower.iter().enumerate() {
        if i == verb.start {
            source.push(PRED_MARKER.to_string());
        }
        source.push(tok.clone());
    }

    let mut spans = p.spans.clone();
    spans.sort_by_key(|sp| (sp.start, sp.end));
    let mut target = Vec::with_capacity(lower.len() + 2 * spans.len());
    let mut next = 0usize;
    for (i, tok) in lower.iter().enumerate() {
        if next < spans.len() && spans[next].start == i {
            target.push(OPEN_BRACKET.to_string());
        }
        target.push(tok.clone());
        if next < spans.len() && spans[next].end == i {
            target.push(close_bracket(&spans[next].role));
            next += 1;
        }
    }

    Ok(Instance {
        source,
        target,
        unk_map: Vec::new(),
        origin: Origin {
            sentence: 0,
            predicate,
        },
    })
}

/// Bracket repairs applied while delinearizing a malformed sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RepairCounts {
    pub dropped_opens: usize,
    pub dropped_closes: usize,
}

impl RepairCounts {
    pub fn total(&self) -> usize {
        self.dropped_opens + self.dropped_closes
    }
}

/// Result of stripping bracket tokens out of a target sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delinearized {
    pub words: Vec<String>,
    pub spans: Vec<LabeledSpan>,
    /// True iff `words` equals the source minus its `<pred>` marker.
    pub comparable: bool,
    pub repairs: RepairCounts,
}

/// Recover words and spans from a (possibly malformed) target sequence.
/// Unmatched brackets are dropped and counted: a close with no pending
/// open is dropped, and an open still pending when another `(#` arrives
/// or when the sequence ends is dropped.
pub fn delinearize(target: &[String], source: &[String]) -> Delinearized {
    let mut words: Vec<String> = Vec::with_capacity(target.len());
    let mut spans = Vec::new();
    let mut repairs = RepairCounts::default();
    let mut open: Option<usize> = None;

    for tok in target {
        if tok == OPEN_BRACKET {
            if open.is_some() {
                repairs.dropped_opens += 1;
            }
            open = Some(words.len());
        } else if let Some(role) = role_of_close_bracket(tok) {
            match open.take() {
                Some(start) if words.len() > start => {
                    spans.push(LabeledSpan::new(start, words.len() - 1, role));
                }
                Some(_) => {
                    // Open immediately followed by a close wraps nothing.
                    repairs.dropped_opens += 1;
                    repairs.dropped_closes += 1;
                }
                None => repairs.dropped_closes += 1,
            }
        } else {
            words.push(tok.clone());
        }
    }
    if open.is_some() {
        repairs.dropped_opens += 1;
    }

    let reference: Vec<&String> = source.iter().filter(|t| *t != PRED_MARKER).collect();
    let comparable =
        words.len() == reference.len() && words.iter().zip(&reference).all(|(a, b)| a == *b);

    Delinearized {
        words,
        spans,
        comparable,
        repairs,
    }
}

/// Replace out-of-vocabulary words with UNK in both source and target,
/// recording (source position, original word) so decode can restore the
/// rare tokens it copied. The vocabulary already encodes the frequency
/// threshold and embedding coverage it was built with.
pub fn apply_unk(instance: &Instance, vocab: &Vocabulary) -> Instance {
    let mut out = instance.clone();
    out.unk_map.clear();
    for (i, tok) in instance.source.iter().enumerate() {
        if tok != PRED_MARKER && !vocab.contains_word(tok) {
            out.unk_map.push((i, tok.clone()));
            out.source[i] = UNK.to_string();
        }
    }
    for tok in out.target.iter_mut() {
        if !crate::vocab::is_bracket_token(tok) && !vocab.contains_word(tok) {
            *tok = UNK.to_string();
        }
    }
    out
}

/// Expand and linearize a whole corpus, stamping origins.
pub fn instances_from_corpus(sentences: &[AnnotatedSentence]) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (si, s) in sentences.iter().enumerate() {
        for (copy, p) in expand_predicates(s) {
            let mut inst = linearize(&copy, p)?;
            inst.origin = Origin {
                sentence: si,
                predicate: p,
            };
            out.push(inst);
        }
    }
    Ok(out)
}
