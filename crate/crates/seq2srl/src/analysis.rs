//! The error-analysis suite: span overlap classes, a label confusion
//! matrix over exact-boundary spans, missing/excess argument histograms,
//! and F1/error curves over sequence length, predicate distance, and
//! sentence position. Everything operates on comparable instances only
//! and excludes V spans.
//!
//! Emitted files (one CSV and one SVG per figure): `confusion`,
//! `missing_excess`, `f1_by_length`, `f1_by_distance`,
//! `error_by_position`; plus `analysis.json` with the whole report.

use std::collections::BTreeMap;

use crate::conll::{AnnotatedSentence, LabeledSpan};
use crate::error::{Error, Result};
use crate::score::LabelCounts;

/// Metadata the curves need about each predicate instance, in corpus
/// order (sentence-major, predicate-minor).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InstanceInfo {
    /// Gold linearized target length in tokens.
    pub linearized_len: usize,
    /// Original sentence length in tokens.
    pub sentence_len: usize,
    pub predicate_index: usize,
    pub comparable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum OverlapClass {
    Exact,
    Partial,
    None,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct OverlapCounts {
    pub exact: usize,
    pub partial: usize,
    pub none: usize,
}

impl OverlapCounts {
    pub fn total(&self) -> usize {
        self.exact + self.partial + self.none
    }
}

pub const NONE_LABEL: &str = "NONE";

#[derive(Debug, Clone, serde::Serialize)]
pub struct ConfusionMatrix {
    /// Row/column labels; the last entry is the explicit NONE class for
    /// spans with no exact-boundary counterpart.
    pub labels: Vec<String>,
    /// Raw counts, row = gold label, column = predicted label.
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized percents; rows with no mass stay all-zero.
    pub percents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BinStat {
    pub bin: String,
    /// Population feeding the bin (instances or spans).
    pub count: usize,
    /// Absent when the bin is empty.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AnalysisReport {
    pub overlap: OverlapCounts,
    pub confusion: ConfusionMatrix,
    pub duplicate_rate: f64,
    /// Instances by number of missing arguments: bins 0, 1, 2+.
    pub missing_histogram: [usize; 3],
    pub excess_histogram: [usize; 3],
    pub f1_by_length: Vec<BinStat>,
    pub f1_by_distance: Vec<BinStat>,
    pub error_by_position: Vec<BinStat>,
    pub comparable_instances: usize,
}

fn args(spans: &[LabeledSpan]) -> Vec<&LabeledSpan> {
    spans.iter().filter(|s| s.role != "V").collect()
}

/// Overlap class per predicted argument span: exact on a boundary match,
/// partial on any token intersection, none otherwise.
pub fn span_overlap(predicted: &[LabeledSpan], gold: &[LabeledSpan]) -> Vec<OverlapClass> {
    let gold_args = args(gold);
    args(predicted)
        .iter()
        .map(|p| {
            if gold_args.iter().any(|g| g.start == p.start && g.end == p.end) {
                OverlapClass::Exact
            } else if gold_args.iter().any(|g| g.overlaps(p)) {
                OverlapClass::Partial
            } else {
                OverlapClass::None
            }
        })
        .collect()
}

struct Aligned<'a> {
    predicted: &'a [LabeledSpan],
    gold: &'a [LabeledSpan],
}

/// Iterate aligned comparable structures.
fn aligned_structures<'a>(
    predicted: &'a [AnnotatedSentence],
    gold: &'a [AnnotatedSentence],
    info: &'a [InstanceInfo],
) -> Vec<(Aligned<'a>, &'a InstanceInfo)> {
    let mut out = Vec::new();
    let mut idx = 0;
    for (p_sent, g_sent) in predicted.iter().zip(gold) {
        for (p, g) in p_sent.predicates.iter().zip(&g_sent.predicates) {
            let inf = &info[idx];
            idx += 1;
            if inf.comparable {
                out.push((
                    Aligned {
                        predicted: &p.spans,
                        gold: &g.spans,
                    },
                    inf,
                ));
            }
        }
    }
    out
}

fn check_alignment(
    predicted: &[AnnotatedSentence],
    gold: &[AnnotatedSentence],
    info: &[InstanceInfo],
) -> Result<()> {
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!(
            "sentence count mismatch: {} predicted vs {} gold",
            predicted.len(),
            gold.len()
        )));
    }
    let structures: usize = gold.iter().map(|s| s.predicates.len()).sum();
    if info.len() != structures {
        return Err(Error::Contract(format!(
            "{} instance records for {} predicate structures",
            info.len(),
            structures
        )));
    }
    Ok(())
}

/// Confusion over exact-boundary spans, with explicit NONE row (spurious
/// exact-boundary predictions) and NONE column (gold spans never matched
/// on boundaries).
pub fn confusion_matrix(
    predicted: &[AnnotatedSentence],
    gold: &[AnnotatedSentence],
    info: &[InstanceInfo],
) -> Result<ConfusionMatrix> {
    check_alignment(predicted, gold, info)?;
    let mut label_set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    let mut pairs: Vec<(String, String)> = Vec::new();

    for (s, _) in aligned_structures(predicted, gold, info) {
        let gold_args = args(s.gold);
        let pred_args = args(s.predicted);
        for g in &gold_args {
            label_set.insert(g.role.clone());
            match pred_args
                .iter()
                .find(|p| p.start == g.start && p.end == g.end)
            {
                Some(p) => {
                    label_set.insert(p.role.clone());
                    pairs.push((g.role.clone(), p.role.clone()));
                }
                None => pairs.push((g.role.clone(), NONE_LABEL.to_string())),
            }
        }
        for p in &pred_args {
            if !gold_args
                .iter()
                .any(|g| g.start == p.start && g.end == p.end)
            {
                label_set.insert(p.role.clone());
                pairs.push((NONE_LABEL.to_string(), p.role.clone()));
            }
        }
    }

    let mut labels: Vec<String> = label_set.into_iter().collect();
    labels.push(NONE_LABEL.to_string());
    let index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let n = labels.len();
    let mut counts = vec![vec![0usize; n]; n];
    for (g, p) in &pairs {
        counts[index[g.as_str()]][index[p.as_str()]] += 1;
    }
    let percents = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total == 0 {
                        0.0
                    } else {
                        100.0 * c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        labels,
        counts,
        percents,
    })
}

fn hist_bin(n: usize) -> usize {
    match n {
        0 => 0,
        1 => 1,
        _ => 2,
    }
}

/// Missing/excess argument histograms (bins 0, 1, 2+ per instance) and
/// the share of instances with a duplicated core role (A0–A5) among the
/// predictions.
pub fn arg_count_diffs(
    predicted: &[AnnotatedSentence],
    gold: &[AnnotatedSentence],
    info: &[InstanceInfo],
) -> Result<([usize; 3], [usize; 3], f64)> {
    check_alignment(predicted, gold, info)?;
    let mut missing = [0usize; 3];
    let mut excess = [0usize; 3];
    let mut duplicated = 0usize;
    let mut total = 0usize;
    for (s, _) in aligned_structures(predicted, gold, info) {
        total += 1;
        let gold_args: std::collections::HashSet<&LabeledSpan> =
            args(s.gold).into_iter().collect();
        let pred_args = args(s.predicted);
        let matched = pred_args.iter().filter(|p| gold_args.contains(*p)).count();
        missing[hist_bin(gold_args.len() - matched)] += 1;
        excess[hist_bin(pred_args.len() - matched)] += 1;

        let mut core_seen: std::collections::HashMap<&str, usize> =
            std::collections::HashMap::new();
        for p in &pred_args {
            if matches!(p.role.as_str(), "A0" | "A1" | "A2" | "A3" | "A4" | "A5") {
                *core_seen.entry(p.role.as_str()).or_insert(0) += 1;
            }
        }
        if core_seen.values().any(|&c| c > 1) {
            duplicated += 1;
        }
    }
    let rate = if total == 0 {
        0.0
    } else {
        duplicated as f64 / total as f64
    };
    Ok((missing, excess, rate))
}

pub const LENGTH_BINS: [(usize, usize, &str); 6] = [
    (0, 20, "<=20"),
    (21, 30, "21-30"),
    (31, 40, "31-40"),
    (41, 50, "41-50"),
    (51, 60, "51-60"),
    (61, usize::MAX, ">60"),
];

const FIFTHS: [&str; 5] = ["0-0.2", "0.2-0.4", "0.4-0.6", "0.6-0.8", "0.8-1.0"];

fn fifth(x: f64) -> usize {
    ((x * 5.0) as usize).min(4)
}

/// The three binned curves: micro F1 by linearized sequence length,
/// micro F1 by normalized span-to-predicate distance, and error ratio by
/// normalized span start position. Empty bins report `value: None`.
pub fn binned_curves(
    predicted: &[AnnotatedSentence],
    gold: &[AnnotatedSentence],
    info: &[InstanceInfo],
) -> Result<(Vec<BinStat>, Vec<BinStat>, Vec<BinStat>)> {
    check_alignment(predicted, gold, info)?;

    let mut by_length: Vec<LabelCounts> = vec![LabelCounts::default(); LENGTH_BINS.len()];
    let mut length_pop = vec![0usize; LENGTH_BINS.len()];
    let mut by_distance: Vec<LabelCounts> = vec![LabelCounts::default(); 5];
    let mut position_wrong = vec![0usize; 5];
    let mut position_total = vec![0usize; 5];

    for (s, inf) in aligned_structures(predicted, gold, info) {
        let gold_args = args(s.gold);
        let pred_args = args(s.predicted);
        let gold_set: std::collections::HashSet<&&LabeledSpan> = gold_args.iter().collect();

        let lb = LENGTH_BINS
            .iter()
            .position(|(lo, hi, _)| (*lo..=*hi).contains(&inf.linearized_len))
            .expect("length bins cover every length");
        length_pop[lb] += 1;
        by_length[lb].gold += gold_args.len();
        by_length[lb].predicted += pred_args.len();
        by_length[lb].correct += pred_args.iter().filter(|p| gold_set.contains(p)).count();

        let norm = inf.sentence_len.max(1) as f64;
        let dist_bucket = |sp: &LabeledSpan| {
            let mid = (sp.start + sp.end) as f64 / 2.0;
            fifth((mid - inf.predicate_index as f64).abs() / norm)
        };
        for g in &gold_args {
            by_distance[dist_bucket(g)].gold += 1;
        }
        for p in &pred_args {
            by_distance[dist_bucket(p)].predicted += 1;
            if gold_set.contains(&p) {
                // Exact match: same span, same bucket on both sides.
                by_distance[dist_bucket(p)].correct += 1;
            }
        }

        for p in &pred_args {
            let b = fifth(p.start as f64 / norm);
            position_total[b] += 1;
            if !gold_set.contains(&p) {
                position_wrong[b] += 1;
            }
        }
    }

    let f1_by_length = LENGTH_BINS
        .iter()
        .zip(&by_length)
        .zip(&length_pop)
        .map(|(((_, _, name), c), &pop)| BinStat {
            bin: name.to_string(),
            count: pop,
            value: if pop == 0 { None } else { Some(c.f1()) },
        })
        .collect();
    let f1_by_distance = FIFTHS
        .iter()
        .zip(&by_distance)
        .map(|(name, c)| BinStat {
            bin: name.to_string(),
            count: c.gold,
            value: if c.gold == 0 && c.predicted == 0 {
                None
            } else {
                Some(c.f1())
            },
        })
        .collect();
    let error_by_position = FIFTHS
        .iter()
        .zip(&position_wrong)
        .zip(&position_total)
        .map(|((name, &wrong), &total)| BinStat {
            bin: name.to_string(),
            count: total,
            value: if total == 0 {
                None
            } else {
                Some(wrong as f64 / total as f64)
            },
        })
        .collect();
    Ok((f1_by_length, f1_by_distance, error_by_position))
}

/// Run the whole suite.
pub fn analyze(
    predicted: &[AnnotatedSentence],
    gold: &[AnnotatedSentence],
    info: &[InstanceInfo],
) -> Result<AnalysisReport> {
    check_alignment(predicted, gold, info)?;
    let mut overlap = OverlapCounts::default();
    for (s, _) in aligned_structures(predicted, gold, info) {
        for class in span_overlap(s.predicted, s.gold) {
            match class {
                OverlapClass::Exact => overlap.exact += 1,
                OverlapClass::Partial => overlap.partial += 1,
                OverlapClass::None => overlap.none += 1,
            }
        }
    }
    let confusion = confusion_matrix(predicted, gold, info)?;
    let (missing_histogram, excess_histogram, duplicate_rate) =
        arg_count_diffs(predicted, gold, info)?;
    let (f1_by_length, f1_by_distance, error_by_position) =
        binned_curves(predicted, gold, info)?;
    Ok(AnalysisReport {
        overlap,
        confusion,
        duplicate_rate,
        missing_histogram,
        excess_histogram,
        f1_by_length,
        f1_by_distance,
        error_by_position,
        comparable_instances: info.iter().filter(|i| i.comparable).count(),
    })
}

fn fmt_opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => String::new(),
    }
}

/// Write the five CSVs and five SVGs into `dir`.
pub fn write_outputs(report: &AnalysisReport, dir: &std::path::Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(name.to_string());
        Ok(())
    };

    // Confusion matrix.
    let mut csv = String::from("gold\\predicted");
    for l in &report.confusion.labels {
        csv.push(',');
        csv.push_str(l);
    }
    csv.push('\n');
    for (ri, row) in report.confusion.percents.iter().enumerate() {
        csv.push_str(&report.confusion.labels[ri]);
        for v in row {
            csv.push_str(&format!(",{v:.2}"));
        }
        csv.push('\n');
    }
    emit("confusion.csv", csv)?;
    emit(
        "confusion.svg",
        crate::svg::heatmap(
            "Predicted vs gold labels on exact-boundary spans (%)",
            &report.confusion.labels,
            &report.confusion.labels,
            &report.confusion.percents,
        ),
    )?;

    // Missing / excess histograms.
    let total: usize = report.missing_histogram.iter().sum();
    let pct = |n: usize| {
        if total == 0 {
            0.0
        } else {
            100.0 * n as f64 / total as f64
        }
    };
    let mut csv = String::from("bin,missing_instances,excess_instances,missing_pct,excess_pct\n");
    let bins = ["0", "1", "2+"];
    for (i, b) in bins.iter().enumerate() {
        csv.push_str(&format!(
            "{b},{},{},{:.2},{:.2}\n",
            report.missing_histogram[i],
            report.excess_histogram[i],
            pct(report.missing_histogram[i]),
            pct(report.excess_histogram[i])
        ));
    }
    emit("missing_excess.csv", csv)?;
    emit(
        "missing_excess.svg",
        crate::svg::bar_chart(
            "Instances with missing or excess arguments",
            &bins.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            &[
                (
                    "missing",
                    "#4878cf",
                    report.missing_histogram.iter().map(|&n| Some(pct(n))).collect(),
                ),
                (
                    "excess",
                    "#ee854a",
                    report.excess_histogram.iter().map(|&n| Some(pct(n))).collect(),
                ),
            ],
            "% of instances",
            100.0,
        ),
    )?;

    // The three curves.
    let curve = |stats: &[BinStat], count_name: &str, value_name: &str| {
        let mut csv = format!("bin,{count_name},{value_name}\n");
        for s in stats {
            csv.push_str(&format!("{},{},{}\n", s.bin, s.count, fmt_opt(&s.value)));
        }
        csv
    };
    emit(
        "f1_by_length.csv",
        curve(&report.f1_by_length, "instances", "f1"),
    )?;
    emit(
        "f1_by_length.svg",
        crate::svg::bar_chart(
            "Argument F1 by linearized sequence length",
            &report.f1_by_length.iter().map(|s| s.bin.clone()).collect::<Vec<_>>(),
            &[(
                "F1",
                "#4878cf",
                report.f1_by_length.iter().map(|s| s.value).collect(),
            )],
            "F1",
            100.0,
        ),
    )?;
    emit(
        "f1_by_distance.csv",
        curve(&report.f1_by_distance, "gold_spans", "f1"),
    )?;
    emit(
        "f1_by_distance.svg",
        crate::svg::bar_chart(
            "Argument F1 by normalized distance to the predicate",
            &report.f1_by_distance.iter().map(|s| s.bin.clone()).collect::<Vec<_>>(),
            &[(
                "F1",
                "#6acc65",
                report.f1_by_distance.iter().map(|s| s.value).collect(),
            )],
            "F1",
            100.0,
        ),
    )?;
    emit(
        "error_by_position.csv",
        curve(&report.error_by_position, "predicted_spans", "error_ratio"),
    )?;
    emit(
        "error_by_position.svg",
        crate::svg::bar_chart(
            "Error ratio by normalized span start position",
            &report.error_by_position.iter().map(|s| s.bin.clone()).collect::<Vec<_>>(),
            &[(
                "error ratio",
                "#d65f5f",
                report.error_by_position.iter().map(|s| s.value).collect(),
            )],
            "error ratio",
            1.0,
        ),
    )?;

    let path = dir.join("analysis.json");
    std::fs::write(&path, serde_json::to_string_pretty(report)?)
        .map_err(|e| Error::io(&path, e))?;
    written.push("analysis.json".to_string());
    Ok(written)
}
