//! Per-sample exit traces and their JSON-lines file format.
//!
//! The first line is a header `{"schema_version", "num_exits",
//! "num_classes"}`; every following line is one [`TraceRecord`].

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::MultiExitModel;
use crate::tensor::{argmax, softmax, Tensor};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub num_exits: usize,
    pub num_classes: usize,
}

impl TraceHeader {
    pub fn new(num_exits: usize, num_classes: usize) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            num_exits,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: u64,
    pub label: usize,
    /// `num_exits × num_classes`
    pub logits: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repr: Option<Vec<Vec<f32>>>,
    /// Cumulative compute fraction of each exit.
    pub cost: Vec<f64>,
    /// `clean` or `name:severity`.
    pub source: String,
}

impl TraceRecord {
    pub fn num_exits(&self) -> usize {
        self.logits.len()
    }

    /// Argmax class of every exit (lowest index wins ties).
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.iter().map(|l| argmax(l)).collect()
    }

    pub fn correct(&self) -> Vec<bool> {
        self.logits.iter().map(|l| argmax(l) == self.label).collect()
    }

    /// Maximum softmax probability of every exit, computed in 64-bit.
    pub fn confidences(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|l| {
                let wide: Vec<f64> = l.iter().map(|v| *v as f64).collect();
                softmax(&wide).into_iter().fold(0.0, f64::max)
            })
            .collect()
    }

    /// Check the record against a header.
    pub fn validate(&self, header: &TraceHeader) -> std::result::Result<(), String> {
        if self.logits.len() != header.num_exits {
            return Err(format!(
                "record {} has {} exits, expected {}",
                self.id,
                self.logits.len(),
                header.num_exits
            ));
        }
        if let Some((i, row)) = self
            .logits
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != header.num_classes)
        {
            return Err(format!(
                "record {} exit {} has {} logits, expected {}",
                self.id,
                i + 1,
                row.len(),
                header.num_classes
            ));
        }
        if self.logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(format!("record {} has non-finite logits", self.id));
        }
        if self.label >= header.num_classes {
            return Err(format!(
                "record {} label {} outside [0, {})",
                self.id, self.label, header.num_classes
            ));
        }
        if self.cost.len() != header.num_exits {
            return Err(format!(
                "record {} has {} cost entries, expected {}",
                self.id,
                self.cost.len(),
                header.num_exits
            ));
        }
        if self.cost.windows(2).any(|w| !(w[0] < w[1]))
            || self.cost.last() != Some(&1.0)
            || !(self.cost[0] > 0.0)
        {
            return Err(format!(
                "record {} cost {:?} must increase strictly to 1.0",
                self.id, self.cost
            ));
        }
        if let Some(repr) = &self.repr {
            if repr.len() != header.num_exits {
                return Err(format!(
                    "record {} has {} representations, expected {}",
                    self.id,
                    repr.len(),
                    header.num_exits
                ));
            }
            if repr.iter().flatten().any(|v| !v.is_finite()) {
                return Err(format!("record {} has non-finite representations", self.id));
            }
        }
        Ok(())
    }
}

/// Serialise a header plus records to JSON lines.
pub fn encode_traces(header: &TraceHeader, records: &[TraceRecord], out: &mut impl Write) -> Result<()> {
    serde_json::to_writer(&mut *out, header)?;
    writeln!(out).map_err(|e| Error::io("<trace stream>", e))?;
    let mut repr_dims: Option<Vec<usize>> = None;
    for r in records {
        r.validate(header).map_err(Error::InvalidArgument)?;
        check_repr_dims(r, &mut repr_dims).map_err(Error::InvalidArgument)?;
        serde_json::to_writer(&mut *out, r)?;
        writeln!(out).map_err(|e| Error::io("<trace stream>", e))?;
    }
    Ok(())
}

fn check_repr_dims(r: &TraceRecord, dims: &mut Option<Vec<usize>>) -> std::result::Result<(), String> {
    let Some(repr) = &r.repr else {
        return Ok(());
    };
    let these: Vec<usize> = repr.iter().map(Vec::len).collect();
    match dims {
        Some(d) if *d != these => Err(format!(
            "record {} representation sizes {these:?} differ from earlier {d:?}",
            r.id
        )),
        Some(_) => Ok(()),
        None => {
            *dims = Some(these);
            Ok(())
        }
    }
}

/// Parse a JSON-lines trace stream. Errors name the offending line.
pub fn decode_traces(input: impl BufRead, origin: &str) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let mut lines = input.lines().enumerate();
    let at = |n: usize, msg: String| Error::format(origin, format!("line {}", n + 1), msg);
    let (n, first) = lines
        .next()
        .ok_or_else(|| at(0, "missing header line".into()))?;
    let first = first.map_err(|e| Error::io(origin, e))?;
    let header: TraceHeader =
        serde_json::from_str(&first).map_err(|e| at(n, format!("bad header: {e}")))?;
    if header.schema_version != TRACE_SCHEMA_VERSION {
        return Err(at(
            n,
            format!(
                "schema version {} (expected {TRACE_SCHEMA_VERSION})",
                header.schema_version
            ),
        ));
    }
    let mut records = Vec::new();
    let mut repr_dims = None;
    for (n, line) in lines {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRecord = serde_json::from_str(&line).map_err(|e| at(n, e.to_string()))?;
        r.validate(&header).map_err(|m| at(n, m))?;
        check_repr_dims(&r, &mut repr_dims).map_err(|m| at(n, m))?;
        records.push(r);
    }
    Ok((header, records))
}

pub fn write_traces(path: &Path, header: &TraceHeader, records: &[TraceRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_traces(header, records, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_traces(BufReader::new(file), &path.display().to_string())
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let n = t.batch().max(1);
    t.data().chunks(t.len() / n).map(<[f32]>::to_vec).collect()
}

/// Run every sample of `ds` through all exits. Record ids are sample
/// indices and the source tag comes from the dataset's corruptions.
pub fn collect_traces(
    model: &MultiExitModel<f32>,
    ds: &Dataset,
    batch_size: usize,
    with_repr: bool,
) -> Result<Vec<TraceRecord>> {
    let source = ds.source_tag();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<Vec<TraceRecord>> {
            let out = model.forward_all_exits(&ds.batch(chunk))?;
            let logits: Vec<Vec<Vec<f32>>> = out.logits.iter().map(rows).collect();
            let reprs: Vec<Vec<Vec<f32>>> = if with_repr {
                out.reprs.iter().map(rows).collect()
            } else {
                Vec::new()
            };
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| TraceRecord {
                    id: i as u64,
                    label: ds.labels[i] as usize,
                    logits: logits.iter().map(|l| l[j].clone()).collect(),
                    repr: with_repr.then(|| reprs.iter().map(|r| r[j].clone()).collect()),
                    cost: out.costs.clone(),
                    source: source.clone(),
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}
