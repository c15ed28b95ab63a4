//! Line-oriented trace files: a header record, one record per iteration
//! appended as the run progresses, and a closing summary record.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InitialDesign, TraceEntry, TuningTrace};
use crate::configspace::ConfigurationSpace;
use crate::error::{Error, Result};
use crate::sysid::ModelScore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Header {
        space: String,
        dataset_id: String,
        method: String,
        initial_design_kind: InitialDesign,
        budget_iterations: usize,
        seed: u64,
    },
    Iteration {
        iteration: usize,
        config: String,
        score: Option<f64>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        per_fold: Vec<f64>,
        n_points: usize,
        wallclock: f64,
        incumbent: Option<f64>,
    },
    Summary {
        incumbent_config: Option<String>,
        incumbent_score: Option<f64>,
        evaluations: usize,
        failed: usize,
    },
}

impl Record {
    pub fn from_entry(e: &TraceEntry, canonical: bool) -> Self {
        Record::Iteration {
            iteration: e.iteration,
            config: e.config.to_flat(),
            score: e.score.rmse,
            per_fold: e.score.per_fold.clone(),
            n_points: e.score.n_points,
            wallclock: if canonical { 0.0 } else { e.wallclock },
            incumbent: e.incumbent,
        }
    }

    pub fn summary(trace: &TuningTrace) -> Self {
        Record::Summary {
            incumbent_config: trace.incumbent().map(|e| e.config.to_flat()),
            incumbent_score: trace.final_incumbent(),
            evaluations: trace.entries.len(),
            failed: trace.entries.iter().filter(|e| e.score.is_failed()).count(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Appends records to a trace file, flushing after each one so interrupted
/// runs keep their partial trace.
pub struct TraceWriter {
    file: File,
    canonical: bool,
}

impl TraceWriter {
    pub fn create(path: &Path, canonical: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(Self { file, canonical })
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        writeln!(self.file, "{}", record.to_line())?;
        self.file.flush()?;
        Ok(())
    }

    pub fn header(&mut self, space: &ConfigurationSpace, trace_meta: &TuningTrace) -> Result<()> {
        self.write(&Record::Header {
            space: space.name().to_string(),
            dataset_id: trace_meta.dataset_id.clone(),
            method: trace_meta.method.clone(),
            initial_design_kind: trace_meta.initial_design_kind,
            budget_iterations: trace_meta.budget_iterations,
            seed: trace_meta.seed,
        })
    }

    pub fn entry(&mut self, e: &TraceEntry) -> Result<()> {
        self.write(&Record::from_entry(e, self.canonical))
    }

    pub fn summary(&mut self, trace: &TuningTrace) -> Result<()> {
        self.write(&Record::summary(trace))
    }
}

/// Reads a (possibly partial) trace file back.
pub fn read_trace(path: &Path, space: &ConfigurationSpace) -> Result<TuningTrace> {
    let reader = BufReader::new(File::open(path)?);
    let mut trace: Option<TuningTrace> = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line)? {
            Record::Header {
                dataset_id,
                method,
                initial_design_kind,
                budget_iterations,
                seed,
                ..
            } => {
                trace = Some(TuningTrace {
                    entries: Vec::new(),
                    seed,
                    initial_design_kind,
                    budget_iterations,
                    dataset_id,
                    method,
                })
            }
            Record::Iteration {
                iteration,
                config,
                score,
                per_fold,
                n_points,
                wallclock,
                incumbent,
            } => {
                let t = trace
                    .as_mut()
                    .ok_or_else(|| Error::Parse("iteration before header".into()))?;
                t.entries.push(TraceEntry {
                    iteration,
                    config: space.parse_flat(&config)?,
                    score: ModelScore {
                        rmse: score,
                        per_fold,
                        n_points,
                    },
                    wallclock,
                    incumbent,
                });
            }
            Record::Summary { .. } => {}
        }
    }
    trace.ok_or_else(|| Error::Parse(format!("{} has no header record", path.display())))
}
