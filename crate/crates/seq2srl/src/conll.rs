//! Reader and writer for the props column format.
//!
//! One row per token, sentences separated by blank lines. Column 1 is the
//! token, column 2 the predicate lemma (or `-`), and columns 3+ carry one
//! argument-span column per predicate of the sentence, in the order the
//! predicates appear. Span cells use open/continue/close notation:
//! `(A0*` opens a span, `*` continues, `*)` closes, `(V*)` opens and
//! closes on a single token.
//!
//! The canonical form written by [`write_props`] joins fields with a
//! single space, ends every row with LF, and follows every sentence with
//! one blank line (see `docs/formats.md` for the full grammar). Reading
//! accepts any whitespace between fields.

use crate::error::{Error, Result};

/// One argument span over original token indices, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub role: String,
}

impl LabeledSpan {
    pub fn new(start: usize, end: usize, role: impl Into<String>) -> Self {
        LabeledSpan {
            start,
            end,
            role: role.into(),
        }
    }

    pub fn overlaps(&self, other: &LabeledSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// The argument structure of one predicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateStructure {
    /// Token position of the row carrying the lemma.
    pub predicate_index: usize,
    pub lemma: String,
    pub spans: Vec<LabeledSpan>,
}

impl PredicateStructure {
    /// The V span, when present.
    pub fn verb_span(&self) -> Option<&LabeledSpan> {
        self.spans.iter().find(|s| s.role == "V")
    }

    /// Argument spans, i.e. everything except V.
    pub fn argument_spans(&self) -> impl Iterator<Item = &LabeledSpan> {
        self.spans.iter().filter(|s| s.role != "V")
    }
}

/// A sentence with per-predicate argument-span annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub predicates: Vec<PredicateStructure>,
}

impl AnnotatedSentence {
    /// Structural validity: span bounds, role wellformedness, and
    /// non-overlap within each predicate. Does not require a V span, so
    /// system outputs with a missing or misplaced verb bracket remain
    /// writable.
    pub fn validate(&self) -> Result<()> {
        for p in &self.predicates {
            if p.predicate_index >= self.tokens.len() {
                return Err(Error::Contract(format!(
                    "predicate index {} out of range for {} tokens",
                    p.predicate_index,
                    self.tokens.len()
                )));
            }
            let mut sorted: Vec<&LabeledSpan> = p.spans.iter().collect();
            sorted.sort_by_key(|s| (s.start, s.end));
            for s in &sorted {
                if s.start > s.end || s.end >= self.tokens.len() {
                    return Err(Error::Contract(format!(
                        "span {}..{} ({}) out of range for {} tokens",
                        s.start,
                        s.end,
                        s.role,
                        self.tokens.len()
                    )));
                }
                if s.role.is_empty()
                    || s.role
                        .chars()
                        .any(|c| c.is_whitespace() || "()*".contains(c))
                {
                    return Err(Error::Contract(format!("malformed role label {:?}", s.role)));
                }
            }
            for w in sorted.windows(2) {
                if w[0].overlaps(w[1]) {
                    return Err(Error::Contract(format!(
                        "overlapping spans {}..{} ({}) and {}..{} ({})",
                        w[0].start, w[0].end, w[0].role, w[1].start, w[1].end, w[1].role
                    )));
                }
            }
        }
        Ok(())
    }

    /// Gold-corpus validity: [`AnnotatedSentence::validate`] plus the
    /// requirement that every predicate carries exactly one V span and
    /// that it contains the predicate position.
    pub fn validate_gold(&self) -> Result<()> {
        self.validate()?;
        for p in &self.predicates {
            let verbs: Vec<&LabeledSpan> = p.spans.iter().filter(|s| s.role == "V").collect();
            if verbs.len() != 1 {
                return Err(Error::Contract(format!(
                    "predicate {} has {} V spans, want exactly 1",
                    p.lemma,
                    verbs.len()
                )));
            }
            let v = verbs[0];
            if p.predicate_index < v.start || p.predicate_index > v.end {
                return Err(Error::Contract(format!(
                    "V span {}..{} does not contain predicate index {}",
                    v.start, v.end, p.predicate_index
                )));
            }
        }
        Ok(())
    }
}

/// Parse a props-format document.
pub fn read_props(text: &str) -> Result<Vec<AnnotatedSentence>> {
    let mut sentences = Vec::new();
    let mut rows: Vec<(usize, Vec<String>)> = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            if !rows.is_empty() {
                sentences.push(parse_sentence(&rows)?);
                rows.clear();
            }
            continue;
        }
        let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if fields.len() < 2 {
            return Err(Error::parse(
                lineno,
                format!("expected at least token and lemma columns, got {:?}", line),
            ));
        }
        rows.push((lineno, fields));
    }
    if !rows.is_empty() {
        sentences.push(parse_sentence(&rows)?);
    }
    Ok(sentences)
}

fn parse_sentence(rows: &[(usize, Vec<String>)]) -> Result<AnnotatedSentence> {
    let first_line = rows[0].0;
    let ncols = rows[0].1.len();
    for (lineno, fields) in rows {
        if fields.len() != ncols {
            return Err(Error::parse(
                *lineno,
                format!(
                    "row has {} columns but sentence started with {}",
                    fields.len(),
                    ncols
                ),
            ));
        }
    }

    let tokens: Vec<String> = rows.iter().map(|(_, f)| f[0].clone()).collect();
    let lemma_rows: Vec<(usize, String)> = rows
        .iter()
        .enumerate()
        .filter(|(_, (_, f))| f[1] != "-")
        .map(|(i, (_, f))| (i, f[1].clone()))
        .collect();

    let span_cols = ncols - 2;
    if lemma_rows.len() != span_cols {
        return Err(Error::parse(
            first_line,
            format!(
                "sentence has {} span columns but {} predicate lemmas",
                span_cols,
                lemma_rows.len()
            ),
        ));
    }

    let mut predicates = Vec::with_capacity(span_cols);
    for (col, (pred_idx, lemma)) in lemma_rows.into_iter().enumerate() {
        let mut spans = Vec::new();
        let mut open: Option<(String, usize)> = None;
        for (row_idx, (lineno, fields)) in rows.iter().enumerate() {
            let cell = fields[col + 2].as_str();
            let (opened, closes) = parse_cell(cell, *lineno)?;
            if let Some(role) = opened {
                if open.is_some() {
                    return Err(Error::parse(
                        *lineno,
                        format!(
                            "span ({role}* opened while a previous span in the same column is still open"
                        ),
                    ));
                }
                open = Some((role, row_idx));
            }
            if closes {
                match open.take() {
                    Some((role, start)) => spans.push(LabeledSpan::new(start, row_idx, role)),
                    None => {
                        return Err(Error::parse(
                            *lineno,
                            "closing *) without a matching opening bracket".to_string(),
                        ))
                    }
                }
            }
        }
        if let Some((role, _)) = open {
            return Err(Error::parse(
                rows.last().expect("non-empty rows").0,
                format!("span ({role}* never closed before end of sentence"),
            ));
        }
        predicates.push(PredicateStructure {
            predicate_index: pred_idx,
            lemma,
            spans,
        });
    }

    let sentence = AnnotatedSentence { tokens, predicates };
    sentence
        .validate()
        .map_err(|e| Error::parse(first_line, e.to_string()))?;
    Ok(sentence)
}

/// Returns (opened role, whether the cell closes a span).
fn parse_cell(cell: &str, lineno: usize) -> Result<(Option<String>, bool)> {
    match cell {
        "*" => return Ok((None, false)),
        "*)" => return Ok((None, true)),
        _ => {}
    }
    if let Some(rest) = cell.strip_prefix('(') {
        let (role, closes) = if let Some(role) = rest.strip_suffix("*)") {
            (role, true)
        } else if let Some(role) = rest.strip_suffix('*') {
            (role, false)
        } else {
            return Err(Error::parse(lineno, format!("malformed span cell {cell:?}")));
        };
        if role.is_empty() || role.chars().any(|c| "()*".contains(c)) {
            return Err(Error::parse(lineno, format!("malformed role in cell {cell:?}")));
        }
        return Ok((Some(role.to_string()), closes));
    }
    Err(Error::parse(lineno, format!("malformed span cell {cell:?}")))
}

/// Render sentences in canonical props form. The output re-parses to an
/// equal value; on canonically formatted input, `write ∘ read` is the
/// identity byte for byte.
pub fn write_props(sentences: &[AnnotatedSentence]) -> Result<String> {
    let mut out = String::new();
    for s in sentences {
        s.validate()?;
        let mut cells: Vec<Vec<String>> = vec![Vec::with_capacity(s.tokens.len()); s.predicates.len()];
        for (k, p) in s.predicates.iter().enumerate() {
            let mut ordered = p.spans.clone();
            ordered.sort_by_key(|sp| (sp.start, sp.end));
            let mut next = 0usize;
            for t in 0..s.tokens.len() {
                let mut cell = String::new();
                if next < ordered.len() && ordered[next].start == t {
                    cell.push('(');
                    cell.push_str(&ordered[next].role);
                }
                cell.push('*');
                if next < ordered.len() && ordered[next].end == t && ordered[next].start <= t {
                    cell.push(')');
                    next += 1;
                }
                cells[k].push(cell);
            }
        }
        let lemma_at: std::collections::HashMap<usize, &str> = s
            .predicates
            .iter()
            .map(|p| (p.predicate_index, p.lemma.as_str()))
            .collect();
        for t in 0..s.tokens.len() {
            out.push_str(&s.tokens[t]);
            out.push(' ');
            out.push_str(lemma_at.get(&t).copied().unwrap_or("-"));
            for col in &cells {
                out.push(' ');
                out.push_str(&col[t]);
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}
