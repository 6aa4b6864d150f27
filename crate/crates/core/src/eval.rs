//! Classification metrics, demonstration usage and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::JudgmentLabel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn record(&mut self, gold: JudgmentLabel, predicted: JudgmentLabel) {
        match (gold, predicted) {
            (JudgmentLabel::Match, JudgmentLabel::Match) => self.tp += 1,
            (JudgmentLabel::NoMatch, JudgmentLabel::Match) => self.fp += 1,
            (JudgmentLabel::NoMatch, JudgmentLabel::NoMatch) => self.tn += 1,
            (JudgmentLabel::Match, JudgmentLabel::NoMatch) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// Zero denominators yield 0 and set the matching flag.
    pub fn metrics(&self) -> Metrics {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let accuracy = ratio(self.tp + self.tn, self.total());
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            accuracy,
            precision,
            recall,
            f1,
            precision_undefined: self.tp + self.fp == 0,
            recall_undefined: self.tp + self.fn_ == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default)]
    pub precision_undefined: bool,
    #[serde(default)]
    pub recall_undefined: bool,
}

/// Outcome of tagging one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub knowledge_id: String,
    pub question_id: String,
    pub gold: JudgmentLabel,
    /// `None` when the judge response was unparseable.
    pub predicted: Option<JudgmentLabel>,
    pub demos_used: usize,
}

impl PairOutcome {
    /// Unparseable predictions count as wrong.
    pub fn effective_prediction(&self) -> JudgmentLabel {
        self.predicted.unwrap_or(self.gold.flipped())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBreakdown {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub mean_demos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub pairs: u64,
    pub errored: u64,
    pub unparseable: u64,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_demos: f64,
    /// Unweighted means of the per-knowledge metrics.
    pub macro_metrics: Metrics,
    pub per_knowledge: BTreeMap<String, KnowledgeBreakdown>,
    pub flags: Vec<String>,
}

impl MetricReport {
    /// Aggregates outcomes; order of `outcomes` does not matter.
    pub fn from_outcomes(name: &str, outcomes: &[PairOutcome], errored: u64) -> Self {
        let mut counts = ConfusionCounts::default();
        let mut demos = 0usize;
        let mut unparseable = 0;
        let mut per: BTreeMap<String, (ConfusionCounts, usize, usize)> = BTreeMap::new();
        for o in outcomes {
            let pred = o.effective_prediction();
            counts.record(o.gold, pred);
            demos += o.demos_used;
            if o.predicted.is_none() {
                unparseable += 1;
            }
            let entry = per.entry(o.knowledge_id.clone()).or_default();
            entry.0.record(o.gold, pred);
            entry.1 += o.demos_used;
            entry.2 += 1;
        }
        let per_knowledge: BTreeMap<String, KnowledgeBreakdown> = per
            .into_iter()
            .map(|(k, (c, d, n))| {
                (
                    k,
                    KnowledgeBreakdown {
                        counts: c,
                        metrics: c.metrics(),
                        mean_demos: d as f64 / n as f64,
                    },
                )
            })
            .collect();
        let macro_metrics = macro_average(per_knowledge.values().map(|b| &b.metrics));
        let m = counts.metrics();
        let mut flags = Vec::new();
        if m.precision_undefined {
            flags.push("precision undefined (no positive predictions); reported as 0".into());
        }
        if m.recall_undefined {
            flags.push("recall undefined (no positive gold labels); reported as 0".into());
        }
        if errored > 0 {
            flags.push(format!("{errored} pair(s) errored and were excluded"));
        }
        MetricReport {
            name: name.to_string(),
            pairs: outcomes.len() as u64,
            errored,
            unparseable,
            counts,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            mean_demos: if outcomes.is_empty() { 0.0 } else { demos as f64 / outcomes.len() as f64 },
            macro_metrics,
            per_knowledge,
            flags,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "report: {}", self.name);
        let _ = writeln!(
            out,
            "pairs {}  errored {}  unparseable {}",
            self.pairs, self.errored, self.unparseable
        );
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>10}",
            "", "accuracy", "precision", "recall", "f1", "mean_demos"
        );
        let _ = writeln!(
            out,
            "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10.3}",
            "micro", self.accuracy, self.precision, self.recall, self.f1, self.mean_demos
        );
        let mm = &self.macro_metrics;
        let _ = writeln!(
            out,
            "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            "macro", mm.accuracy, mm.precision, mm.recall, mm.f1
        );
        for (k, b) in &self.per_knowledge {
            let _ = writeln!(
                out,
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10.3}",
                k, b.metrics.accuracy, b.metrics.precision, b.metrics.recall, b.metrics.f1, b.mean_demos
            );
        }
        for f in &self.flags {
            let _ = writeln!(out, "note: {f}");
        }
        out
    }
}

fn macro_average<'a>(items: impl Iterator<Item = &'a Metrics>) -> Metrics {
    let items: Vec<_> = items.collect();
    let n = items.len().max(1) as f64;
    let mean = |f: fn(&Metrics) -> f64| items.iter().map(|m| f(m)).sum::<f64>() / n;
    Metrics {
        accuracy: mean(|m| m.accuracy),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        precision_undefined: false,
        recall_undefined: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePoint {
    pub knowledge_id: String,
    pub zero_shot_accuracy: f64,
    pub mean_demos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyDemoAnalysis {
    pub points: Vec<KnowledgePoint>,
    /// Sample Pearson correlation; omitted below three knowledge ids.
    pub correlation: Option<f64>,
    /// Set when one side has zero variance (correlation reported as 0).
    pub degenerate_variance: bool,
}

/// Per-knowledge zero-shot accuracy against the retriever's mean demo count.
pub fn knowledge_accuracy_vs_demos(zero_shot: &MetricReport, retriever: &MetricReport) -> AccuracyDemoAnalysis {
    let points: Vec<KnowledgePoint> = zero_shot
        .per_knowledge
        .iter()
        .filter_map(|(k, z)| {
            retriever.per_knowledge.get(k).map(|r| KnowledgePoint {
                knowledge_id: k.clone(),
                zero_shot_accuracy: z.metrics.accuracy,
                mean_demos: r.mean_demos,
            })
        })
        .collect();
    if points.len() < 3 {
        return AccuracyDemoAnalysis { points, correlation: None, degenerate_variance: false };
    }
    let xs: Vec<f64> = points.iter().map(|p| p.zero_shot_accuracy).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_demos).collect();
    let (r, degenerate) = match pearson(&xs, &ys) {
        Some(r) => (r, false),
        None => (0.0, true),
    };
    AccuracyDemoAnalysis { points, correlation: Some(r), degenerate_variance: degenerate }
}

/// `None` when either sample has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Side-by-side comparison of several reports.
pub fn render_comparison(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>9} {:>9} {:>9} {:>9} {:>10} {:>7}",
        "pipeline", "accuracy", "precision", "recall", "f1", "mean_demos", "errored"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<28} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10.3} {:>7}",
            r.name, r.accuracy, r.precision, r.recall, r.f1, r.mean_demos, r.errored
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(k: &str, q: usize, gold: JudgmentLabel, pred: Option<JudgmentLabel>, demos: usize) -> PairOutcome {
        PairOutcome { knowledge_id: k.into(), question_id: format!("q{q}"), gold, predicted: pred, demos_used: demos }
    }

    #[test]
    fn all_correct() {
        let outs: Vec<_> = (0..6)
            .map(|i| {
                let g = if i % 2 == 0 { JudgmentLabel::Match } else { JudgmentLabel::NoMatch };
                outcome("k", i, g, Some(g), 0)
            })
            .collect();
        let r = MetricReport::from_outcomes("t", &outs, 0);
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
    }

    #[test]
    fn symmetric_counts() {
        let m = ConfusionCounts::new(25, 25, 25, 25).metrics();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn hand_case() {
        // precision 3/4, recall 3/5, f1 = 2*0.45/1.35 = 2/3
        let m = ConfusionCounts::new(3, 1, 4, 2).metrics();
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.7);
    }

    #[test]
    fn zero_division_conventions() {
        let m = ConfusionCounts::new(0, 0, 5, 0).metrics();
        assert!(m.precision_undefined && m.recall_undefined);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn unparseable_counts_as_wrong() {
        let outs = vec![
            outcome("k", 0, JudgmentLabel::Match, None, 1),
            outcome("k", 1, JudgmentLabel::NoMatch, None, 1),
        ];
        let r = MetricReport::from_outcomes("t", &outs, 0);
        assert_eq!(r.counts, ConfusionCounts::new(0, 1, 0, 1));
        assert_eq!(r.unparseable, 2);
    }

    #[test]
    fn correlation_guards() {
        let mk = |pts: &[(f64, f64)]| {
            let z = MetricReport::from_outcomes("z", &[], 0);
            let mut zr = z.clone();
            let mut rr = z;
            for (i, (acc, demos)) in pts.iter().enumerate() {
                let metrics = Metrics { accuracy: *acc, precision: 0.0, recall: 0.0, f1: 0.0, precision_undefined: false, recall_undefined: false };
                let b = |md| KnowledgeBreakdown { counts: ConfusionCounts::default(), metrics, mean_demos: md };
                zr.per_knowledge.insert(format!("k{i}"), b(0.0));
                rr.per_knowledge.insert(format!("k{i}"), b(*demos));
            }
            knowledge_accuracy_vs_demos(&zr, &rr)
        };
        assert_eq!(mk(&[(0.5, 1.0)]).correlation, None);
        let flat = mk(&[(0.2, 1.0), (0.5, 1.0), (0.9, 1.0)]);
        assert_eq!(flat.correlation, Some(0.0));
        assert!(flat.degenerate_variance);
        let neg = mk(&[(0.2, 2.0), (0.5, 1.0), (0.9, 0.0)]);
        assert!(neg.correlation.unwrap() < -0.9);
    }

    proptest! {
        #[test]
        fn f1_is_harmonic_mean(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let m = ConfusionCounts::new(tp, fp, tn, fn_).metrics();
            if m.precision + m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() <= 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }

        #[test]
        fn report_is_permutation_invariant(labels in proptest::collection::vec((0..3usize, any::<bool>(), any::<bool>(), 0..4usize), 1..40), rot in 0usize..40) {
            let outs: Vec<_> = labels.iter().enumerate().map(|(i, (k, g, p, d))| {
                let lab = |b: bool| if b { JudgmentLabel::Match } else { JudgmentLabel::NoMatch };
                outcome(&format!("k{k}"), i, lab(*g), Some(lab(*p)), *d)
            }).collect();
            let mut rotated = outs.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            rotated.reverse();
            prop_assert_eq!(
                MetricReport::from_outcomes("r", &outs, 0).to_json(),
                MetricReport::from_outcomes("r", &rotated, 0).to_json()
            );
        }
    }
}
