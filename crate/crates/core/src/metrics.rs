//! Analysis over traces and exit decisions: first correct exit, under- and
//! overthinking, calibration, inconsistency, correct-count histograms and
//! accuracy/compute curves.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategies::ExitDecision;
use crate::trace::TraceRecord;

pub const DEFAULT_CALIBRATION_BINS: usize = 15;

/// Smallest 1-based exit whose prediction equals the label.
pub fn first_correct_exit(trace: &TraceRecord) -> Option<usize> {
    trace.correct().iter().position(|c| *c).map(|i| i + 1)
}

/// All samples plus the subset correct at one or more exits.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalUniverse {
    pub ids: Vec<u64>,
    pub first_correct: Vec<Option<usize>>,
}

impl EvalUniverse {
    pub fn new(traces: &[TraceRecord]) -> Self {
        Self {
            ids: traces.iter().map(|t| t.id).collect(),
            first_correct: traces.iter().map(first_correct_exit).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `|O|`
    pub fn solvable(&self) -> usize {
        self.first_correct.iter().filter(|f| f.is_some()).count()
    }

    /// `|O| / |A|`
    pub fn oracle_fraction(&self) -> f64 {
        self.solvable() as f64 / self.len().max(1) as f64
    }
}

fn index_decisions(decisions: &[ExitDecision]) -> Result<HashMap<u64, &ExitDecision>> {
    let mut map = HashMap::with_capacity(decisions.len());
    for d in decisions {
        if map.insert(d.id, d).is_some() {
            return Err(Error::invalid(format!("duplicate decision for sample {}", d.id)));
        }
    }
    Ok(map)
}

fn classify(
    decisions: &[ExitDecision],
    traces: &[TraceRecord],
    mut keep: impl FnMut(&ExitDecision, &TraceRecord, usize) -> bool,
) -> Result<Vec<u64>> {
    let map = index_decisions(decisions)?;
    let mut out = Vec::new();
    for t in traces {
        let Some(star) = first_correct_exit(t) else {
            continue;
        };
        let d = map
            .get(&t.id)
            .ok_or_else(|| Error::invalid(format!("no decision for sample {}", t.id)))?;
        if keep(d, t, star) {
            out.push(t.id);
        }
    }
    Ok(out)
}

/// Samples in `O` that exited before their first correct exit.
pub fn underthinking_set(decisions: &[ExitDecision], traces: &[TraceRecord]) -> Result<Vec<u64>> {
    classify(decisions, traces, |d, _, star| d.exit < star)
}

/// Samples in `O` that exited after their first correct exit and were
/// misclassified there.
pub fn overthinking_set(decisions: &[ExitDecision], traces: &[TraceRecord]) -> Result<Vec<u64>> {
    classify(decisions, traces, |d, t, star| d.exit > star && d.prediction != t.label)
}

/// RMS calibration error over `bins` equal-mass bins by confidence.
pub fn rms_calibration_error(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::invalid("calibration error of an empty prediction set"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::shape("calibration inputs", confidences.len(), correct.len()));
    }
    if bins == 0 {
        return Err(Error::invalid("at least one calibration bin is required"));
    }
    let mut order: Vec<(f64, bool)> = confidences.iter().copied().zip(correct.iter().copied()).collect();
    // ties ordered by correctness so the result does not depend on sample order
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = order.len();
    let mut total = 0.0;
    for b in 0..bins {
        let (lo, hi) = (b * n / bins, (b + 1) * n / bins);
        if lo == hi {
            continue;
        }
        let slice = &order[lo..hi];
        let m = slice.len() as f64;
        let conf = slice.iter().map(|s| s.0).sum::<f64>() / m;
        let acc = slice.iter().filter(|s| s.1).count() as f64 / m;
        total += m * (conf - acc) * (conf - acc);
    }
    Ok((total / n as f64).sqrt())
}

/// RMS calibration error of every exit's max-softmax confidence.
pub fn per_exit_calibration(traces: &[TraceRecord], bins: usize) -> Result<Vec<f64>> {
    let exits = num_exits(traces)?;
    let conf: Vec<Vec<f64>> = traces.iter().map(TraceRecord::confidences).collect();
    let corr: Vec<Vec<bool>> = traces.iter().map(TraceRecord::correct).collect();
    (0..exits)
        .map(|e| {
            let c: Vec<f64> = conf.iter().map(|r| r[e]).collect();
            let k: Vec<bool> = corr.iter().map(|r| r[e]).collect();
            rms_calibration_error(&c, &k, bins)
        })
        .collect()
}

fn num_exits(traces: &[TraceRecord]) -> Result<usize> {
    let first = traces
        .first()
        .ok_or_else(|| Error::invalid("empty trace set"))?
        .num_exits();
    if traces.iter().any(|t| t.num_exits() != first) {
        return Err(Error::invalid("traces disagree on the number of exits"));
    }
    Ok(first)
}

/// Per-exit fraction of correctly classified samples that some later exit
/// misclassifies. `None` marks an exit with no correct samples; the last exit
/// is 0 by definition.
pub fn inconsistency(traces: &[TraceRecord]) -> Result<Vec<Option<f64>>> {
    let exits = num_exits(traces)?;
    if exits < 2 {
        return Err(Error::invalid("inconsistency needs at least two exits"));
    }
    let mut correct_at = vec![0usize; exits];
    let mut flipped = vec![0usize; exits];
    for t in traces {
        let c = t.correct();
        let mut wrong_after = false;
        for i in (0..exits).rev() {
            if c[i] {
                correct_at[i] += 1;
                if wrong_after {
                    flipped[i] += 1;
                }
            } else {
                wrong_after = true;
            }
        }
    }
    Ok((0..exits)
        .map(|i| {
            if i + 1 == exits {
                Some(0.0)
            } else if correct_at[i] == 0 {
                None
            } else {
                Some(flipped[i] as f64 / correct_at[i] as f64)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectCountHistogram {
    /// `counts[j]`: samples correct at exactly `j` exits.
    pub counts: Vec<usize>,
    /// Binomial pmf scaled to the sample count.
    pub baseline: Vec<f64>,
    /// Success probability of the baseline (mean per-exit accuracy).
    pub p: f64,
}

pub fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut coeff = 1.0f64;
    (0..=n)
        .map(|k| {
            if k > 0 {
                coeff = coeff * (n - k + 1) as f64 / k as f64;
            }
            coeff * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
        })
        .collect()
}

pub fn correct_count_histogram(traces: &[TraceRecord]) -> Result<CorrectCountHistogram> {
    let exits = num_exits(traces)?;
    let mut counts = vec![0usize; exits + 1];
    let mut correct_total = 0usize;
    for t in traces {
        let c = t.correct().iter().filter(|c| **c).count();
        counts[c] += 1;
        correct_total += c;
    }
    let n = traces.len() as f64;
    let p = correct_total as f64 / (n * exits as f64);
    let baseline = binomial_pmf(exits, p).into_iter().map(|v| v * n).collect();
    Ok(CorrectCountHistogram {
        counts,
        baseline,
        p,
    })
}

/// Per-exit accuracy.
pub fn exit_accuracies(traces: &[TraceRecord]) -> Result<Vec<f64>> {
    let exits = num_exits(traces)?;
    let mut hits = vec![0usize; exits];
    for t in traces {
        for (h, c) in hits.iter_mut().zip(t.correct()) {
            *h += c as usize;
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / traces.len() as f64)
        .collect())
}

/// One point of an accuracy-versus-compute curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub strategy: String,
    pub threshold: Option<f64>,
    pub accuracy: f64,
    pub compute_fraction: f64,
    /// Mean compute as a percentage of the last exit's cost.
    pub cr: f64,
    pub ut_pct: f64,
    pub ot_pct: f64,
}

pub const CURVE_CSV_HEADER: &str = "strategy,threshold,accuracy,compute_fraction,CR,UT_pct,OT_pct";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_CSV_HEADER);
    s.push('\n');
    for p in points {
        let t = p.threshold.map(|t| t.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{t},{},{},{},{},{}\n",
            p.strategy, p.accuracy, p.compute_fraction, p.cr, p.ut_pct, p.ot_pct
        ));
    }
    s
}

/// Accuracy, compute and UT/OT percentages of one set of decisions.
pub fn curve_point(
    strategy: &str,
    threshold: Option<f64>,
    decisions: &[ExitDecision],
    traces: &[TraceRecord],
) -> Result<CurvePoint> {
    if traces.is_empty() {
        return Err(Error::invalid("empty trace set"));
    }
    if decisions.len() != traces.len() {
        return Err(Error::shape("decisions", traces.len(), decisions.len()));
    }
    let map = index_decisions(decisions)?;
    let mut correct = 0usize;
    let mut compute = 0.0;
    for t in traces {
        let d = map
            .get(&t.id)
            .ok_or_else(|| Error::invalid(format!("no decision for sample {}", t.id)))?;
        correct += (d.prediction == t.label) as usize;
        compute += d.compute;
    }
    let n = traces.len() as f64;
    let solvable = EvalUniverse::new(traces).solvable().max(1) as f64;
    let ut = underthinking_set(decisions, traces)?.len() as f64;
    let ot = overthinking_set(decisions, traces)?.len() as f64;
    let compute_fraction = compute / n;
    Ok(CurvePoint {
        strategy: strategy.to_string(),
        threshold,
        accuracy: correct as f64 / n,
        compute_fraction,
        cr: compute_fraction * 100.0,
        ut_pct: 100.0 * ut / solvable,
        ot_pct: 100.0 * ot / solvable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub threshold: Option<f64>,
    pub num_samples: usize,
    pub accuracy: f64,
    pub compute_fraction: f64,
    /// Compute used, percent of the full network.
    pub cr: f64,
    /// Compute saved, percent of the full network.
    pub compute_saved_pct: f64,
    /// `|O| / |A|`
    pub oracle_fraction: f64,
    pub ut_pct: f64,
    pub ot_pct: f64,
    pub per_exit_accuracy: Vec<f64>,
    pub per_exit_rmsce: Vec<f64>,
    pub per_exit_inconsistency: Vec<Option<f64>>,
    pub histogram: CorrectCountHistogram,
}

pub fn metrics_report(
    strategy: &str,
    threshold: Option<f64>,
    decisions: &[ExitDecision],
    traces: &[TraceRecord],
    bins: usize,
) -> Result<MetricsReport> {
    let p = curve_point(strategy, threshold, decisions, traces)?;
    Ok(MetricsReport {
        strategy: p.strategy,
        threshold,
        num_samples: traces.len(),
        accuracy: p.accuracy,
        compute_fraction: p.compute_fraction,
        cr: p.cr,
        compute_saved_pct: 100.0 - p.cr,
        oracle_fraction: EvalUniverse::new(traces).oracle_fraction(),
        ut_pct: p.ut_pct,
        ot_pct: p.ot_pct,
        per_exit_accuracy: exit_accuracies(traces)?,
        per_exit_rmsce: per_exit_calibration(traces, bins)?,
        per_exit_inconsistency: inconsistency(traces)?,
        histogram: correct_count_histogram(traces)?,
    })
}

/// Per-split view used to compare clean and shifted data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub source: String,
    /// Number of splits averaged into this summary.
    pub splits: usize,
    pub num_samples: usize,
    pub per_exit_accuracy: Vec<f64>,
    pub per_exit_rmsce: Vec<f64>,
    pub per_exit_inconsistency: Vec<Option<f64>>,
    pub oracle_accuracy: f64,
    pub oracle_compute_fraction: f64,
    /// Highest accuracy of any non-oracle curve point.
    pub best_practical_accuracy: f64,
    /// `oracle_accuracy - best_practical_accuracy`
    pub gap: f64,
    pub curve: Vec<CurvePoint>,
}

/// Summarise one split from its traces and its sweep curve. The curve must
/// hold exactly one oracle point and at least one other point.
pub fn shift_summary(
    source: &str,
    traces: &[TraceRecord],
    curve: Vec<CurvePoint>,
    bins: usize,
) -> Result<ShiftSummary> {
    let oracle: Vec<&CurvePoint> = curve.iter().filter(|p| p.strategy == "oracle").collect();
    let [oracle] = oracle[..] else {
        return Err(Error::invalid("curve must contain exactly one oracle point"));
    };
    let best = curve
        .iter()
        .filter(|p| p.strategy != "oracle")
        .map(|p| p.accuracy)
        .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))))
        .ok_or_else(|| Error::invalid("curve has no practical strategy points"))?;
    Ok(ShiftSummary {
        source: source.to_string(),
        splits: 1,
        num_samples: traces.len(),
        per_exit_accuracy: exit_accuracies(traces)?,
        per_exit_rmsce: per_exit_calibration(traces, bins)?,
        per_exit_inconsistency: inconsistency(traces)?,
        oracle_accuracy: oracle.accuracy,
        oracle_compute_fraction: oracle.compute_fraction,
        best_practical_accuracy: best,
        gap: oracle.accuracy - best,
        curve,
    })
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

/// Uniform average over splits. Curves must list the same strategy and
/// threshold sequence. An inconsistency entry averages the splits where it
/// is defined.
pub fn mean_summary(source: &str, parts: &[ShiftSummary]) -> Result<ShiftSummary> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("no summaries to average"))?;
    let exits = first.per_exit_accuracy.len();
    for p in parts {
        if p.per_exit_accuracy.len() != exits {
            return Err(Error::shape("summary exits", exits, p.per_exit_accuracy.len()));
        }
        let same = p.curve.len() == first.curve.len()
            && p.curve.iter().zip(&first.curve).all(|(a, b)| {
                a.strategy == b.strategy && a.threshold == b.threshold
            });
        if !same {
            return Err(Error::invalid(format!(
                "curve of '{}' does not match curve of '{}'",
                p.source, first.source
            )));
        }
    }
    let per_exit = |f: &dyn Fn(&ShiftSummary) -> &Vec<f64>| -> Vec<f64> {
        (0..exits).map(|e| mean_of(parts.iter().map(|p| f(p)[e]))).collect()
    };
    let inconsistency = (0..exits)
        .map(|e| {
            let defined: Vec<f64> = parts.iter().filter_map(|p| p.per_exit_inconsistency[e]).collect();
            (!defined.is_empty()).then(|| mean_of(defined.into_iter()))
        })
        .collect();
    let curve = first
        .curve
        .iter()
        .enumerate()
        .map(|(i, head)| {
            let pts = || parts.iter().map(move |p| &p.curve[i]);
            let compute_fraction = mean_of(pts().map(|p| p.compute_fraction));
            CurvePoint {
                strategy: head.strategy.clone(),
                threshold: head.threshold,
                accuracy: mean_of(pts().map(|p| p.accuracy)),
                compute_fraction,
                cr: mean_of(pts().map(|p| p.cr)),
                ut_pct: mean_of(pts().map(|p| p.ut_pct)),
                ot_pct: mean_of(pts().map(|p| p.ot_pct)),
            }
        })
        .collect();
    Ok(ShiftSummary {
        source: source.to_string(),
        splits: parts.iter().map(|p| p.splits).sum(),
        num_samples: parts.iter().map(|p| p.num_samples).sum(),
        per_exit_accuracy: per_exit(&|p| &p.per_exit_accuracy),
        per_exit_rmsce: per_exit(&|p| &p.per_exit_rmsce),
        per_exit_inconsistency: inconsistency,
        oracle_accuracy: mean_of(parts.iter().map(|p| p.oracle_accuracy)),
        oracle_compute_fraction: mean_of(parts.iter().map(|p| p.oracle_compute_fraction)),
        best_practical_accuracy: mean_of(parts.iter().map(|p| p.best_practical_accuracy)),
        gap: mean_of(parts.iter().map(|p| p.gap)),
        curve,
    })
}

/// Clean against shifted results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub clean: ShiftSummary,
    pub corrupted: ShiftSummary,
    pub splits: Vec<ShiftSummary>,
    pub gap_widens: bool,
}

pub fn shift_report(clean: ShiftSummary, splits: Vec<ShiftSummary>) -> Result<ShiftReport> {
    let corrupted = mean_summary("corrupted", &splits)?;
    Ok(ShiftReport {
        gap_widens: corrupted.gap > clean.gap,
        clean,
        corrupted,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trace whose exit `i` predicts the label exactly when `pattern[i]`.
    pub(crate) fn trace(id: u64, pattern: &[bool]) -> TraceRecord {
        let n = pattern.len();
        TraceRecord {
            id,
            label: 0,
            logits: pattern
                .iter()
                .map(|c| if *c { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
                .collect(),
            repr: None,
            cost: (1..=n).map(|i| i as f64 / n as f64).collect(),
            source: "clean".into(),
        }
    }

    fn decision(t: &TraceRecord, exit: usize) -> ExitDecision {
        ExitDecision {
            id: t.id,
            exit,
            prediction: t.predictions()[exit - 1],
            score: 0.0,
            compute: t.cost[exit - 1],
        }
    }

    #[test]
    fn first_correct() {
        assert_eq!(first_correct_exit(&trace(0, &[false, true, false])), Some(2));
        assert_eq!(first_correct_exit(&trace(0, &[false, false])), None);
    }

    #[test]
    fn ut_and_ot_definitions() {
        let t = trace(1, &[false, false, true, false, false]);
        assert_eq!(underthinking_set(&[decision(&t, 2)], &[t.clone()]).unwrap(), vec![1]);
        let t = trace(2, &[false, true, false, false, false]);
        assert_eq!(overthinking_set(&[decision(&t, 5)], &[t.clone()]).unwrap(), vec![2]);
        let t = trace(3, &[false, true, false, false, true]);
        assert!(overthinking_set(&[decision(&t, 5)], &[t.clone()]).unwrap().is_empty());
        let t = trace(4, &[false, false]);
        assert!(underthinking_set(&[decision(&t, 1)], &[t.clone()]).unwrap().is_empty());
        let t = trace(5, &[true]);
        assert!(underthinking_set(&[], &[t]).is_err());
    }

    #[test]
    fn calibration_extremes() {
        let c = vec![1.0; 50];
        assert_eq!(rms_calibration_error(&c, &vec![true; 50], 15).unwrap(), 0.0);
        assert_eq!(rms_calibration_error(&c, &vec![false; 50], 15).unwrap(), 1.0);
        assert!(rms_calibration_error(&[], &[], 15).is_err());
    }

    #[test]
    fn inconsistency_cases() {
        let mono = [trace(0, &[false, true, true]), trace(1, &[true, true, true])];
        assert_eq!(inconsistency(&mono).unwrap(), vec![Some(0.0), Some(0.0), Some(0.0)]);
        let flip = [trace(0, &[true, true, false])];
        assert_eq!(inconsistency(&flip).unwrap()[0], Some(1.0));
        let none = [trace(0, &[false, true])];
        assert_eq!(inconsistency(&none).unwrap()[0], None);
    }

    #[test]
    fn histogram_and_binomial() {
        let pmf = binomial_pmf(7, 0.5);
        assert_eq!(pmf[0], 1.0 / 128.0);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let all = [trace(0, &[true; 7]), trace(1, &[true; 7])];
        let h = correct_count_histogram(&all).unwrap();
        assert_eq!(h.counts, vec![0, 0, 0, 0, 0, 0, 0, 2]);
        assert!((h.baseline[7] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn last_exit_everywhere_costs_one() {
        let ts: Vec<_> = (0..4).map(|i| trace(i, &[i % 2 == 0, false, true])).collect();
        let ds: Vec<_> = ts.iter().map(|t| decision(t, 3)).collect();
        let p = curve_point("last", None, &ds, &ts).unwrap();
        assert_eq!(p.compute_fraction, 1.0);
        assert_eq!(p.cr, 100.0);
        assert_eq!(p.accuracy, 1.0);
    }

    #[test]
    fn csv_layout() {
        let p = CurvePoint {
            strategy: "confidence".into(),
            threshold: Some(0.9),
            accuracy: 0.5,
            compute_fraction: 0.25,
            cr: 25.0,
            ut_pct: 1.0,
            ot_pct: 2.0,
        };
        let csv = curve_csv(&[p]);
        assert_eq!(csv, format!("{CURVE_CSV_HEADER}\nconfidence,0.9,0.5,0.25,25,1,2\n"));
    }

    #[test]
    fn summaries_average_uniformly() {
        let traces = vec![trace(0, &[false, true]), trace(1, &[true, true])];
        let curve = |acc: f64| {
            vec![
                CurvePoint {
                    strategy: "oracle".into(),
                    threshold: None,
                    accuracy: 1.0,
                    compute_fraction: 0.75,
                    cr: 75.0,
                    ut_pct: 0.0,
                    ot_pct: 0.0,
                },
                CurvePoint {
                    strategy: "confidence".into(),
                    threshold: Some(0.5),
                    accuracy: acc,
                    compute_fraction: 0.5,
                    cr: 50.0,
                    ut_pct: 10.0,
                    ot_pct: 0.0,
                },
            ]
        };
        let a = shift_summary("a", &traces, curve(0.5), 15).unwrap();
        let b = shift_summary("b", &traces, curve(0.9), 15).unwrap();
        assert_eq!(a.gap, 0.5);
        let m = mean_summary("mean", &[a.clone(), b]).unwrap();
        assert_eq!(m.splits, 2);
        assert!((m.gap - 0.3).abs() < 1e-12);
        assert!((m.curve[1].accuracy - 0.7).abs() < 1e-12);
        let report = shift_report(a.clone(), vec![a]).unwrap();
        assert!(!report.gap_widens);
        assert!(shift_summary("x", &traces, Vec::new(), 15).is_err());
    }
}
