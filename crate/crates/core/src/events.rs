//! Clinical event records, per-patient trajectories, JSONL IO, and the
//! textual rendering used as embedder input.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Closed set of event category names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategorySet(Vec<String>);

impl Default for CategorySet {
    fn default() -> Self {
        Self::new(
            [
                "Lab Test",
                "Nursing Notes",
                "Vital Signs",
                "Medication",
                "Clinical Order",
                "Surgery",
                "Imaging",
                "Blood Gas",
                "Fluid Balance",
                "Ventilation",
                "Microbiology",
                "History",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
    }
}

impl CategorySet {
    pub fn new(names: Vec<String>) -> Self {
        Self(names)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|c| c == name)
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One timestamped clinical event. `t` is integer seconds since the cohort epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    pub t: i64,
    pub category: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<(String, String)>,
}

impl EventRecord {
    pub fn is_structured(&self) -> bool {
        !self.metrics.is_empty()
    }

    pub fn validate(&self, categories: &CategorySet) -> Result<()> {
        ensure!(self.t >= 0, Data, "negative timestamp {} for patient {}", self.t, self.patient_id);
        ensure!(!self.category.is_empty(), Data, "empty category for patient {}", self.patient_id);
        ensure!(
            categories.contains(&self.category),
            Data,
            "unknown category {:?}; allowed: {}",
            self.category,
            categories.names().join(", ")
        );
        ensure!(
            self.is_structured() || !self.text.is_empty(),
            Data,
            "event at t={} for patient {} has neither metrics nor text",
            self.t,
            self.patient_id
        );
        Ok(())
    }
}

/// Renders an event as embedder input with no separator between metric segments.
pub fn textualize(event: &EventRecord) -> Result<String> {
    textualize_with(event, "")
}

/// Structured events render each metric as `[category]key:value`, joined by
/// `separator`; unstructured events pass their text through unchanged.
pub fn textualize_with(event: &EventRecord, separator: &str) -> Result<String> {
    if event.metrics.is_empty() {
        ensure!(
            !event.text.is_empty(),
            Data,
            "structured event with empty metrics (patient {}, t={})",
            event.patient_id,
            event.t
        );
        return Ok(event.text.clone());
    }
    let parts: Vec<String> = event.metrics.iter().map(|(k, v)| format!("[{}]{}:{}", event.category, k, v)).collect();
    Ok(parts.join(separator))
}

/// One patient's time-ordered event sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub patient_id: String,
    pub events: Vec<EventRecord>,
    pub embeddings: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    /// Builds a trajectory, stably sorting events by timestamp.
    pub fn new(patient_id: impl Into<String>, mut events: Vec<EventRecord>) -> Result<Self> {
        let patient_id = patient_id.into();
        ensure!(!events.is_empty(), Data, "trajectory {patient_id} has no events");
        ensure!(
            events.iter().all(|e| e.patient_id == patient_id),
            Data,
            "trajectory {patient_id} contains events of another patient"
        );
        events.sort_by_key(|e| e.t);
        Ok(Self { patient_id, events, embeddings: None })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<i64> {
        self.events.iter().map(|e| e.t).collect()
    }

    /// Key under which event `index` is stored in an embedding file.
    pub fn event_key(&self, index: usize) -> String {
        event_key(&self.patient_id, index)
    }

    pub fn set_embeddings(&mut self, vectors: Vec<Vec<f64>>) -> Result<()> {
        ensure!(
            vectors.len() == self.events.len(),
            Data,
            "{} embeddings for {} events of patient {}",
            vectors.len(),
            self.events.len(),
            self.patient_id
        );
        for (i, v) in vectors.iter().enumerate() {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            ensure!((n - 1.0).abs() <= 1e-6, Data, "embedding {i} of patient {} has norm {n}", self.patient_id);
        }
        self.embeddings = Some(vectors);
        Ok(())
    }
}

pub fn event_key(patient_id: &str, index: usize) -> String {
    format!("{patient_id}#{index}")
}

/// Reads event JSONL and groups records into trajectories in order of first appearance.
pub fn load_trajectories(path: &Path, categories: &CategorySet) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<EventRecord>> = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: n + 1, message };
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate(categories).map_err(|e| parse_err(e.to_string()))?;
        if !groups.contains_key(&rec.patient_id) {
            order.push(rec.patient_id.clone());
        }
        groups.entry(rec.patient_id.clone()).or_default().push(rec);
    }
    order
        .into_iter()
        .map(|pid| {
            let events = groups.remove(&pid).unwrap_or_default();
            Trajectory::new(pid, events)
        })
        .collect()
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for traj in trajectories {
        for e in &traj.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
