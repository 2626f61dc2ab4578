//! Per-step scalar log (CSV) and per-stage JSON summary.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};

pub struct TrainLog {
    pub stage: String,
    pub seed: u64,
    rows: Vec<(u64, &'static str, f64)>,
    summary: BTreeMap<String, serde_json::Value>,
    started: Instant,
}

impl TrainLog {
    pub fn new(stage: &str, seed: u64) -> Self {
        TrainLog {
            stage: stage.to_string(),
            seed,
            rows: Vec::new(),
            summary: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    /// Record one scalar. Steps must be non-decreasing and values finite.
    pub fn log(&mut self, step: u64, term: &'static str, value: f64) {
        debug_assert!(
            self.rows.last().map_or(true, |(s, _, _)| *s <= step),
            "step indices must be monotone"
        );
        debug_assert!(value.is_finite(), "logged {term} at step {step} is not finite");
        self.rows.push((step, term, value));
    }

    pub fn set_summary(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    pub fn rows(&self) -> &[(u64, &'static str, f64)] {
        &self.rows
    }

    /// Values of one term in logged order.
    pub fn series(&self, term: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|(_, t, _)| *t == term)
            .map(|(_, _, v)| *v)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("step,term,value\n");
        for (step, term, value) in &self.rows {
            text.push_str(&format!("{step},{term},{value}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut map = self.summary.clone();
        map.insert("stage".into(), self.stage.clone().into());
        map.insert("seed".into(), self.seed.into());
        map.insert(
            "wall_seconds".into(),
            self.started.elapsed().as_secs_f64().into(),
        );
        map.insert("steps".into(), self.rows.len().into());
        let text = serde_json::to_string_pretty(&map).map_err(|e| Error::Config {
            message: format!("summary json: {e}"),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
