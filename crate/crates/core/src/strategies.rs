//! Early-exit decision rules over traces, and threshold sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::FlatIndex;
use crate::metrics::{curve_point, CurvePoint};
use crate::trace::TraceRecord;

pub const CONFIDENCE_GRID: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];
pub const PATIENCE_GRID: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
pub const AGREEMENT_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 0.99];
pub const KNN_K_GRID: [usize; 2] = [50, 200];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    Oracle,
    /// Exit once the max softmax probability exceeds `threshold`.
    Confidence { threshold: f64 },
    /// Exit once `patience` consecutive exits agree.
    Patience { patience: usize },
    /// Exit once the fraction of `k` neighbours agreeing with the prediction
    /// exceeds `threshold`.
    Knn { k: usize, threshold: f64 },
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |t: f64| t > 0.0 && t <= 1.0;
        match *self {
            StrategyConfig::Oracle => Ok(()),
            StrategyConfig::Confidence { threshold } if unit(threshold) => Ok(()),
            StrategyConfig::Patience { patience } if patience >= 1 => Ok(()),
            StrategyConfig::Knn { k, threshold } if k >= 1 && unit(threshold) => Ok(()),
            other => Err(Error::invalid(format!("invalid strategy parameters {other:?}"))),
        }
    }

    /// Name used in reports, e.g. `confidence` or `knn_k50`.
    pub fn name(&self) -> String {
        match self {
            StrategyConfig::Oracle => "oracle".into(),
            StrategyConfig::Confidence { .. } => "confidence".into(),
            StrategyConfig::Patience { .. } => "patience".into(),
            StrategyConfig::Knn { k, .. } => format!("knn_k{k}"),
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match *self {
            StrategyConfig::Oracle => None,
            StrategyConfig::Confidence { threshold } | StrategyConfig::Knn { threshold, .. } => {
                Some(threshold)
            }
            StrategyConfig::Patience { patience } => Some(patience as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub id: u64,
    /// 1-based exit index.
    pub exit: usize,
    pub prediction: usize,
    /// Confidence, or neighbour agreement for the kNN rule.
    pub score: f64,
    pub compute: f64,
}

fn decision_at(trace: &TraceRecord, exit: usize, score: f64) -> ExitDecision {
    ExitDecision {
        id: trace.id,
        exit,
        prediction: crate::tensor::argmax(&trace.logits[exit - 1]),
        score,
        compute: trace.cost[exit - 1],
    }
}

/// Earliest correct exit, else the last.
pub fn decide_oracle(trace: &TraceRecord) -> ExitDecision {
    let conf = trace.confidences();
    let exit = crate::metrics::first_correct_exit(trace).unwrap_or(trace.num_exits());
    decision_at(trace, exit, conf[exit - 1])
}

/// First exit whose confidence is strictly above `threshold`; otherwise the
/// most confident exit (earliest on ties).
pub fn decide_confidence(trace: &TraceRecord, threshold: f64) -> ExitDecision {
    let conf = trace.confidences();
    let exit = match conf.iter().position(|c| *c > threshold) {
        Some(i) => i + 1,
        None => {
            let mut best = 0;
            for (i, c) in conf.iter().enumerate() {
                if *c > conf[best] {
                    best = i;
                }
            }
            best + 1
        }
    };
    decision_at(trace, exit, conf[exit - 1])
}

/// Earliest exit ending a run of `patience` identical predictions; otherwise
/// the last exit.
pub fn decide_patience(trace: &TraceRecord, patience: usize) -> ExitDecision {
    let preds = trace.predictions();
    let conf = trace.confidences();
    let mut run = 0;
    let mut exit = preds.len();
    for (i, p) in preds.iter().enumerate() {
        run = if i > 0 && preds[i - 1] == *p { run + 1 } else { 1 };
        if run >= patience.max(1) {
            exit = i + 1;
            break;
        }
    }
    decision_at(trace, exit, conf[exit - 1])
}

/// Per-exit nearest-neighbour indices built from training traces. Each
/// stored label is the exit's own prediction on that training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitIndices {
    pub indices: Vec<FlatIndex>,
}

impl ExitIndices {
    pub fn build(train: &[TraceRecord]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::invalid("no training traces for the neighbour index"))?;
        let exits = first.num_exits();
        let indices = (0..exits)
            .into_par_iter()
            .map(|e| {
                let mut vecs = Vec::with_capacity(train.len());
                let mut labels = Vec::with_capacity(train.len());
                for t in train {
                    let repr = t.repr.as_ref().ok_or_else(|| {
                        Error::invalid(format!("training trace {} has no representations", t.id))
                    })?;
                    if repr.len() != exits {
                        return Err(Error::shape(format!("trace {} exits", t.id), exits, repr.len()));
                    }
                    vecs.push(repr[e].clone());
                    labels.push(crate::tensor::argmax(&t.logits[e]) as u32);
                }
                FlatIndex::build(&vecs, &labels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { indices })
    }

    pub fn num_exits(&self) -> usize {
        self.indices.len()
    }
}

/// Neighbour agreement at every exit: the fraction of the `k` nearest
/// training samples whose exit prediction equals this sample's.
pub fn knn_agreements(trace: &TraceRecord, index: &ExitIndices, k: usize) -> Result<Vec<f64>> {
    if index.num_exits() != trace.num_exits() {
        return Err(Error::shape(
            "neighbour indices per exit",
            trace.num_exits(),
            index.num_exits(),
        ));
    }
    let repr = trace
        .repr
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("trace {} has no representations", trace.id)))?;
    let preds = trace.predictions();
    index
        .indices
        .iter()
        .zip(repr)
        .zip(preds)
        .map(|((idx, r), p)| idx.agreement(r, k, p as u32))
        .collect()
}

/// First internal exit whose agreement is strictly above `threshold`;
/// otherwise the last exit.
pub fn decide_knn_from_agreements(trace: &TraceRecord, agreements: &[f64], threshold: f64) -> ExitDecision {
    let n = trace.num_exits();
    let exit = agreements[..n - 1]
        .iter()
        .position(|a| *a > threshold)
        .map(|i| i + 1)
        .unwrap_or(n);
    decision_at(trace, exit, agreements[exit - 1])
}

pub fn decide_knn(trace: &TraceRecord, index: &ExitIndices, k: usize, threshold: f64) -> Result<ExitDecision> {
    let a = knn_agreements(trace, index, k)?;
    Ok(decide_knn_from_agreements(trace, &a, threshold))
}

pub fn decide(trace: &TraceRecord, config: &StrategyConfig, index: Option<&ExitIndices>) -> Result<ExitDecision> {
    config.validate()?;
    Ok(match *config {
        StrategyConfig::Oracle => decide_oracle(trace),
        StrategyConfig::Confidence { threshold } => decide_confidence(trace, threshold),
        StrategyConfig::Patience { patience } => decide_patience(trace, patience),
        StrategyConfig::Knn { k, threshold } => {
            let index = index.ok_or_else(|| Error::invalid("kNN strategy needs neighbour indices"))?;
            decide_knn(trace, index, k, threshold)?
        }
    })
}

pub fn decide_all(traces: &[TraceRecord], config: &StrategyConfig, index: Option<&ExitIndices>) -> Result<Vec<ExitDecision>> {
    traces.par_iter().map(|t| decide(t, config, index)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    Oracle,
    Confidence,
    Patience,
    Knn { k: usize },
}

impl StrategyKind {
    pub fn with_threshold(self, t: f64) -> Result<StrategyConfig> {
        let cfg = match self {
            StrategyKind::Oracle => StrategyConfig::Oracle,
            StrategyKind::Confidence => StrategyConfig::Confidence { threshold: t },
            StrategyKind::Patience => {
                if t.fract() != 0.0 || t < 1.0 {
                    return Err(Error::invalid(format!("patience {t} is not a positive integer")));
                }
                StrategyConfig::Patience { patience: t as usize }
            }
            StrategyKind::Knn { k } => StrategyConfig::Knn { k, threshold: t },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            StrategyKind::Oracle => Vec::new(),
            StrategyKind::Confidence => CONFIDENCE_GRID.to_vec(),
            StrategyKind::Patience => PATIENCE_GRID.to_vec(),
            StrategyKind::Knn { .. } => AGREEMENT_GRID.to_vec(),
        }
    }
}

/// One curve point per threshold, in grid order. The oracle ignores the
/// grid and yields a single point.
pub fn sweep(
    traces: &[TraceRecord],
    kind: StrategyKind,
    grid: &[f64],
    index: Option<&ExitIndices>,
) -> Result<Vec<CurvePoint>> {
    if traces.is_empty() {
        return Err(Error::invalid("cannot sweep an empty trace set"));
    }
    if kind == StrategyKind::Oracle {
        let d: Vec<_> = traces.iter().map(decide_oracle).collect();
        return Ok(vec![curve_point("oracle", None, &d, traces)?]);
    }
    let configs = grid
        .iter()
        .map(|t| kind.with_threshold(*t))
        .collect::<Result<Vec<_>>>()?;
    let agreements = match kind {
        StrategyKind::Knn { k } => {
            let index = index.ok_or_else(|| Error::invalid("kNN sweep needs neighbour indices"))?;
            Some(
                traces
                    .par_iter()
                    .map(|t| knn_agreements(t, index, k))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        _ => None,
    };
    configs
        .iter()
        .map(|cfg| {
            let decisions: Vec<ExitDecision> = match (cfg, &agreements) {
                (StrategyConfig::Knn { threshold, .. }, Some(a)) => traces
                    .iter()
                    .zip(a)
                    .map(|(t, a)| decide_knn_from_agreements(t, a, *threshold))
                    .collect(),
                _ => decide_all(traces, cfg, None)?,
            };
            curve_point(&cfg.name(), cfg.threshold(), &decisions, traces)
        })
        .collect()
}
