//! Span-based precision/recall/F1 in the official-script style, plus
//! reproduction statistics and the oracle-min/max bounds for sequences
//! that fail to reproduce their source.
//!
//! An argument is correct iff its (start, end, role) triple exactly
//! matches a gold span. V spans are excluded from the argument totals
//! (predicates are given as input) and reported on their own row. Counts
//! are micro-averaged across all predicate structures. When
//! comparability flags are supplied, the headline score covers the
//! comparable instances only; oracle-min additionally counts every
//! non-comparable instance's gold spans as missed (and its predictions
//! as spurious), oracle-max counts them as perfectly labeled.

use std::collections::BTreeMap;

use crate::conll::{AnnotatedSentence, LabeledSpan};
use crate::error::{Error, Result};
use crate::linearize::RepairCounts;

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabelCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl LabelCounts {
    pub fn precision(&self) -> f64 {
        percent(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        percent(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1_of(self.precision(), self.recall())
    }
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    /// Percent of instances whose decoded words reproduce the source.
    pub same_length_rate: f64,
    /// Percent of instances decoded with zero bracket repairs.
    pub balanced_bracket_rate: f64,
    pub oracle_min_f1: f64,
    pub oracle_max_f1: f64,
    /// Per-role argument rows, V excluded.
    pub per_label: BTreeMap<String, LabelCounts>,
    /// The V row, reported separately from the argument totals.
    pub verb: LabelCounts,
}

impl ScoreReport {
    /// Render the human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}\n",
            "label", "correct", "predicted", "gold", "P", "R", "F1"
        ));
        for (label, c) in &self.per_label {
            out.push_str(&format!(
                "{:<12} {:>9} {:>9} {:>9} {:>8.2} {:>8.2} {:>8.2}\n",
                label,
                c.correct,
                c.predicted,
                c.gold,
                c.precision(),
                c.recall(),
                c.f1()
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>8.2} {:>8.2} {:>8.2}\n",
            "(V)",
            self.verb.correct,
            self.verb.predicted,
            self.verb.gold,
            self.verb.precision(),
            self.verb.recall(),
            self.verb.f1()
        ));
        out.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>8.2} {:>8.2} {:>8.2}\n",
            "overall", self.correct, self.predicted, self.gold, self.precision, self.recall, self.f1
        ));
        out.push_str(&format!(
            "same length {:.2}%  balanced brackets {:.2}%  oracle {:.2}..{:.2}\n",
            self.same_length_rate, self.balanced_bracket_rate, self.oracle_min_f1, self.oracle_max_f1
        ));
        out
    }
}

/// Correct/predicted/gold counts for one predicate structure, V excluded.
fn count_structure(predicted: &[LabeledSpan], gold: &[LabeledSpan]) -> LabelCounts {
    let gold_set: std::collections::HashSet<&LabeledSpan> =
        gold.iter().filter(|s| s.role != "V").collect();
    let predicted_args: Vec<&LabeledSpan> = predicted.iter().filter(|s| s.role != "V").collect();
    LabelCounts {
        correct: predicted_args
            .iter()
            .filter(|s| gold_set.contains(*s))
            .count(),
        predicted: predicted_args.len(),
        gold: gold_set.len(),
    }
}

fn check_alignment(predicted: &[AnnotatedSentence], gold: &[AnnotatedSentence]) -> Result<()> {
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!(
            "sentence count mismatch: {} predicted vs {} gold",
            predicted.len(),
            gold.len()
        )));
    }
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.predicates.len() != g.predicates.len() {
            return Err(Error::Contract(format!(
                "sentence {i}: {} predicted predicates vs {} gold",
                p.predicates.len(),
                g.predicates.len()
            )));
        }
    }
    Ok(())
}

/// Score aligned corpora with every instance treated as comparable.
pub fn score(predicted: &[AnnotatedSentence], gold: &[AnnotatedSentence]) -> Result<ScoreReport> {
    score_with_flags(predicted, gold, None, None)
}

/// Score aligned corpora. `comparable`, when given, has one flag per
/// predicate structure in corpus order; the headline covers comparable
/// instances and the oracle bounds account for the rest. `repairs`
/// feeds the balanced-bracket rate.
pub fn score_with_flags(
    predicted: &[AnnotatedSentence],
    gold: &[AnnotatedSentence],
    comparable: Option<&[bool]>,
    repairs: Option<&[RepairCounts]>,
) -> Result<ScoreReport> {
    check_alignment(predicted, gold)?;
    let n_structures: usize = gold.iter().map(|s| s.predicates.len()).sum();
    if let Some(flags) = comparable {
        if flags.len() != n_structures {
            return Err(Error::Contract(format!(
                "{} comparability flags for {} predicate structures",
                flags.len(),
                n_structures
            )));
        }
    }

    let mut headline = LabelCounts::default();
    let mut per_label: BTreeMap<String, LabelCounts> = BTreeMap::new();
    let mut verb = LabelCounts::default();
    let mut min_counts = LabelCounts::default();
    let mut max_counts = LabelCounts::default();

    let mut idx = 0usize;
    for (p_sent, g_sent) in predicted.iter().zip(gold) {
        for (p, g) in p_sent.predicates.iter().zip(&g_sent.predicates) {
            let flag = comparable.map_or(true, |f| f[idx]);
            idx += 1;
            let c = count_structure(&p.spans, &g.spans);
            if flag {
                headline.correct += c.correct;
                headline.predicted += c.predicted;
                headline.gold += c.gold;
                min_counts.correct += c.correct;
                min_counts.predicted += c.predicted;
                min_counts.gold += c.gold;
                max_counts.correct += c.correct;
                max_counts.predicted += c.predicted;
                max_counts.gold += c.gold;

                let gold_args: std::collections::HashSet<&LabeledSpan> =
                    g.spans.iter().filter(|s| s.role != "V").collect();
                for s in g.spans.iter().filter(|s| s.role != "V") {
                    per_label.entry(s.role.clone()).or_default().gold += 1;
                }
                for s in p.spans.iter().filter(|s| s.role != "V") {
                    let e = per_label.entry(s.role.clone()).or_default();
                    e.predicted += 1;
                    if gold_args.contains(s) {
                        e.correct += 1;
                    }
                }

                let gold_v: Vec<&LabeledSpan> = g.spans.iter().filter(|s| s.role == "V").collect();
                verb.gold += gold_v.len();
                for s in p.spans.iter().filter(|s| s.role == "V") {
                    verb.predicted += 1;
                    if gold_v.iter().any(|gv| *gv == s) {
                        verb.correct += 1;
                    }
                }
            } else {
                // oracle-min: gold spans all missed, predictions spurious.
                min_counts.predicted += c.predicted;
                min_counts.gold += c.gold;
                // oracle-max: perfect labels instead.
                max_counts.correct += c.gold;
                max_counts.predicted += c.gold;
                max_counts.gold += c.gold;
            }
        }
    }

    let (same_length_rate, balanced_bracket_rate) = match (comparable, repairs) {
        (Some(flags), Some(reps)) => reproduction_stats_parts(flags, reps),
        (Some(flags), None) => (
            percent(flags.iter().filter(|f| **f).count(), flags.len()),
            100.0,
        ),
        _ => (100.0, 100.0),
    };

    Ok(ScoreReport {
        precision: headline.precision(),
        recall: headline.recall(),
        f1: headline.f1(),
        correct: headline.correct,
        predicted: headline.predicted,
        gold: headline.gold,
        same_length_rate,
        balanced_bracket_rate,
        oracle_min_f1: min_counts.f1(),
        oracle_max_f1: max_counts.f1(),
        per_label,
        verb,
    })
}

/// Oracle bounds alone, from aligned corpora plus comparability flags.
pub fn oracle_bounds(
    predicted: &[AnnotatedSentence],
    gold: &[AnnotatedSentence],
    comparable: &[bool],
) -> Result<(f64, f64)> {
    let report = score_with_flags(predicted, gold, Some(comparable), None)?;
    Ok((report.oracle_min_f1, report.oracle_max_f1))
}

fn reproduction_stats_parts(flags: &[bool], repairs: &[RepairCounts]) -> (f64, f64) {
    let same = flags.iter().filter(|f| **f).count();
    let balanced = repairs.iter().filter(|r| r.total() == 0).count();
    (percent(same, flags.len()), percent(balanced, repairs.len()))
}

/// same-length and balanced-bracket percentages over decode results.
pub fn reproduction_stats(results: &[crate::decode::DecodeResult]) -> (f64, f64) {
    let flags: Vec<bool> = results.iter().map(|r| r.comparable).collect();
    let reps: Vec<RepairCounts> = results.iter().map(|r| r.repairs).collect();
    reproduction_stats_parts(&flags, &reps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conll::PredicateStructure;

    fn sentence(tokens: &[&str], preds: Vec<(usize, Vec<(usize, usize, &str)>)>) -> AnnotatedSentence {
        AnnotatedSentence {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            predicates: preds
                .into_iter()
                .map(|(idx, spans)| PredicateStructure {
                    predicate_index: idx,
                    lemma: tokens[idx].to_string(),
                    spans: spans
                        .into_iter()
                        .map(|(s, e, r)| LabeledSpan::new(s, e, r))
                        .collect(),
                })
                .collect(),
        }
    }

    fn six_tokens() -> Vec<&'static str> {
        vec!["a", "b", "c", "d", "e", "f"]
    }

    #[test]
    fn gold_against_gold_is_perfect() {
        let g = vec![sentence(
            &six_tokens(),
            vec![(2, vec![(0, 1, "A0"), (2, 2, "V"), (3, 5, "A1")])],
        )];
        let r = score(&g, &g).unwrap();
        assert_eq!(r.precision, 100.0);
        assert_eq!(r.recall, 100.0);
        assert_eq!(r.f1, 100.0);
        for (_, c) in &r.per_label {
            assert_eq!(c.f1(), 100.0);
        }
        assert_eq!(r.verb.f1(), 100.0);
        assert_eq!(r.same_length_rate, 100.0);
        assert_eq!(r.oracle_min_f1, r.oracle_max_f1);
    }

    #[test]
    fn hand_counted_half_case() {
        // gold {A0=[0,2], A1=[5,5]}, predicted {A0=[0,2], A1=[4,5]}.
        let gold = vec![sentence(
            &six_tokens(),
            vec![(3, vec![(0, 2, "A0"), (3, 3, "V"), (5, 5, "A1")])],
        )];
        let predicted = vec![sentence(
            &six_tokens(),
            vec![(3, vec![(0, 2, "A0"), (3, 3, "V"), (4, 5, "A1")])],
        )];
        let r = score(&predicted, &gold).unwrap();
        assert_eq!((r.correct, r.predicted, r.gold), (1, 2, 2));
        assert_eq!(r.precision, 50.0);
        assert_eq!(r.recall, 50.0);
        assert_eq!(r.f1, 50.0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gold = vec![sentence(
            &six_tokens(),
            vec![(3, vec![(0, 2, "A0"), (3, 3, "V")])],
        )];
        let predicted = vec![sentence(&six_tokens(), vec![(3, vec![(3, 3, "V")])])];
        let r = score(&predicted, &gold).unwrap();
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn verb_spans_do_not_count_toward_arguments() {
        let gold = vec![sentence(
            &six_tokens(),
            vec![(2, vec![(2, 2, "V"), (0, 1, "A0")])],
        )];
        // V wrong, argument right: argument score stays perfect.
        let predicted = vec![sentence(
            &six_tokens(),
            vec![(2, vec![(3, 3, "V"), (0, 1, "A0")])],
        )];
        let r = score(&predicted, &gold).unwrap();
        assert_eq!(r.f1, 100.0);
        assert_eq!(r.verb.correct, 0);
        assert_eq!(r.verb.predicted, 1);
    }

    #[test]
    fn span_order_within_a_structure_is_irrelevant() {
        let gold = vec![sentence(
            &six_tokens(),
            vec![(2, vec![(0, 1, "A0"), (2, 2, "V"), (3, 4, "A1")])],
        )];
        let mut shuffled = gold.clone();
        shuffled[0].predicates[0].spans.reverse();
        let r = score(&shuffled, &gold).unwrap();
        assert_eq!(r.f1, 100.0);
    }

    #[test]
    fn all_comparable_oracle_bounds_collapse_to_f1() {
        let gold = vec![sentence(
            &six_tokens(),
            vec![(3, vec![(0, 2, "A0"), (3, 3, "V"), (5, 5, "A1")])],
        )];
        let predicted = vec![sentence(
            &six_tokens(),
            vec![(3, vec![(0, 2, "A0"), (3, 3, "V"), (4, 5, "A1")])],
        )];
        let (lo, hi) = oracle_bounds(&predicted, &gold, &[true]).unwrap();
        assert_eq!(lo, 50.0);
        assert_eq!(hi, 50.0);
    }

    #[test]
    fn zero_comparable_gives_zero_to_hundred() {
        let gold = vec![sentence(
            &six_tokens(),
            vec![(3, vec![(0, 2, "A0"), (3, 3, "V")])],
        )];
        let predicted = vec![sentence(&six_tokens(), vec![(3, vec![])])];
        let (lo, hi) = oracle_bounds(&predicted, &gold, &[false]).unwrap();
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 100.0);
    }

    #[test]
    fn mixed_comparability_matches_hand_micro_count() {
        // Comparable instance: perfect with 2 gold argument spans.
        // Non-comparable instance: 3 gold argument spans, empty column.
        let gold = vec![
            sentence(
                &six_tokens(),
                vec![(2, vec![(0, 1, "A0"), (2, 2, "V"), (3, 4, "A1")])],
            ),
            sentence(
                &six_tokens(),
                vec![(1, vec![(0, 0, "A0"), (1, 1, "V"), (2, 3, "A1"), (4, 5, "A2")])],
            ),
        ];
        let predicted = vec![gold[0].clone(), sentence(&six_tokens(), vec![(1, vec![])])];
        let (lo, hi) = oracle_bounds(&predicted, &gold, &[true, false]).unwrap();
        // min: 2 correct of 2 predicted, 5 gold → P=100, R=40, F1≈57.14.
        assert!((lo - 57.142857).abs() < 0.01, "{lo}");
        assert_eq!(hi, 100.0);
        // oracle_min ≤ headline ≤ oracle_max.
        let r = score_with_flags(&predicted, &gold, Some(&[true, false]), None).unwrap();
        assert!(r.oracle_min_f1 <= r.f1 + 1e-12);
        assert!(r.f1 <= r.oracle_max_f1 + 1e-12);
        assert_eq!(r.same_length_rate, 50.0);
    }

    #[test]
    fn reproduction_stats_from_parts() {
        let flags = [true, true, false, true, true, true, true, true, true, true];
        let reps = vec![RepairCounts::default(); 9]
            .into_iter()
            .chain([RepairCounts {
                dropped_opens: 1,
                dropped_closes: 0,
            }])
            .collect::<Vec<_>>();
        let (same, balanced) = reproduction_stats_parts(&flags, &reps);
        assert_eq!(same, 90.0);
        assert_eq!(balanced, 90.0);
    }

    #[test]
    fn misaligned_corpora_are_rejected() {
        let a = vec![sentence(&six_tokens(), vec![(1, vec![(1, 1, "V")])])];
        assert!(score(&a, &[]).is_err());
        let b = vec![sentence(&six_tokens(), vec![])];
        assert!(score(&a, &b).is_err());
    }

    /// Brute-force counterpart used by the acceptance suite as well:
    /// greedy one-to-one matching by identity over (start, end, role).
    pub(crate) fn brute_force_counts(
        predicted: &[LabeledSpan],
        gold: &[LabeledSpan],
    ) -> LabelCounts {
        let p: Vec<&LabeledSpan> = predicted.iter().filter(|s| s.role != "V").collect();
        let g: Vec<&LabeledSpan> = gold.iter().filter(|s| s.role != "V").collect();
        let mut used = vec![false; g.len()];
        let mut correct = 0;
        for ps in &p {
            for (i, gs) in g.iter().enumerate() {
                if !used[i] && ps.start == gs.start && ps.end == gs.end && ps.role == gs.role {
                    used[i] = true;
                    correct += 1;
                    break;
                }
            }
        }
        LabelCounts {
            correct,
            predicted: p.len(),
            gold: g.len(),
        }
    }

    #[test]
    fn brute_force_matcher_agrees_on_toy_corpus_structures() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/data/toy.props"
        ))
        .unwrap();
        let corpus = crate::conll::read_props(&text).unwrap();
        // Gold vs perturbed-gold on every structure with ≤ 4 spans.
        for s in &corpus {
            for p in &s.predicates {
                if p.spans.len() > 4 {
                    continue;
                }
                let mut perturbed = p.spans.clone();
                if let Some(first) = perturbed.first_mut() {
                    first.role = "A9".into();
                }
                let fast = count_structure(&perturbed, &p.spans);
                let brute = brute_force_counts(&perturbed, &p.spans);
                assert_eq!(fast, brute);
            }
        }
    }
}
