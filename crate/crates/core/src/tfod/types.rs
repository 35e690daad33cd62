use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detector::ContextBin;

/// Seconds of human time per annotated box.
pub const SECONDS_PER_CLICK: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    Find,
    Servo,
    Depth,
    Grasp,
    PlaceFind,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Find,
        TaskId::Servo,
        TaskId::Depth,
        TaskId::Grasp,
        TaskId::PlaceFind,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::Find => "Find",
            TaskId::Servo => "Servo",
            TaskId::Depth => "Depth",
            TaskId::Grasp => "Grasp",
            TaskId::PlaceFind => "PlaceFind",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NoDetectionAllPoses,
    Discontinuity,
    MissingStreak,
    DetectionLost,
}

impl FailureReason {
    /// Tasks that may legitimately raise this reason.
    pub fn allowed_for(&self, task: TaskId) -> bool {
        match self {
            FailureReason::NoDetectionAllPoses => matches!(task, TaskId::Find | TaskId::PlaceFind),
            FailureReason::Discontinuity | FailureReason::MissingStreak => task == TaskId::Servo,
            FailureReason::DetectionLost => matches!(task, TaskId::Depth | TaskId::Grasp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub event_id: u64,
    pub task: TaskId,
    pub image_ids: Vec<u64>,
    pub reason: FailureReason,
    /// Simulated seconds at the time of failure.
    pub timestamp: f64,
    /// Classes the failing task was looking for.
    pub task_classes: Vec<String>,
}

impl FailureEvent {
    pub fn validate(&self) -> Result<(), String> {
        if self.image_ids.is_empty() {
            return Err(format!("event {} carries no images", self.event_id));
        }
        if !self.reason.allowed_for(self.task) {
            return Err(format!(
                "event {}: reason {:?} is not raised by {:?}",
                self.event_id, self.reason, self.task
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Oracle,
    Human,
}

/// One labeled box, in image pixels, with the view condition it was seen in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub class_label: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub context: ContextBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub image_id: u64,
    pub task: TaskId,
    /// Empty for a true negative.
    pub boxes: Vec<AnnotatedBox>,
    /// Bin of the image as a whole.
    pub view_bin: ContextBin,
    pub source: AnnotationSource,
    pub clicks: u32,
}

impl FewShotExample {
    pub fn is_positive(&self) -> bool {
        !self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskCounters {
    #[serde(rename = "Find")]
    pub find: u32,
    #[serde(rename = "Servo")]
    pub servo: u32,
    #[serde(rename = "Depth")]
    pub depth: u32,
    #[serde(rename = "Grasp")]
    pub grasp: u32,
    #[serde(rename = "PlaceFind")]
    pub place_find: u32,
}

impl TaskCounters {
    pub fn get(&self, task: TaskId) -> u32 {
        match task {
            TaskId::Find => self.find,
            TaskId::Servo => self.servo,
            TaskId::Depth => self.depth,
            TaskId::Grasp => self.grasp,
            TaskId::PlaceFind => self.place_find,
        }
    }

    pub fn bump(&mut self, task: TaskId) {
        match task {
            TaskId::Find => self.find += 1,
            TaskId::Servo => self.servo += 1,
            TaskId::Depth => self.depth += 1,
            TaskId::Grasp => self.grasp += 1,
            TaskId::PlaceFind => self.place_find += 1,
        }
    }

    pub fn total(&self) -> u32 {
        TaskId::ALL.iter().map(|t| self.get(*t)).sum()
    }

    pub fn add(&mut self, other: &TaskCounters) {
        self.find += other.find;
        self.servo += other.servo;
        self.depth += other.depth;
        self.grasp += other.grasp;
        self.place_find += other.place_find;
    }
}

/// Annotation and compute accounting for one set of examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub counters: TaskCounters,
    pub examples: u32,
    pub clicks: u32,
    pub annotation_s: f64,
    pub robot_s: f64,
    pub cpu_s: f64,
    pub updates: u32,
}

impl Ledger {
    pub fn add(&mut self, other: &Ledger) {
        self.counters.add(&other.counters);
        self.examples += other.examples;
        self.clicks += other.clicks;
        self.annotation_s += other.annotation_s;
        self.robot_s += other.robot_s;
        self.cpu_s += other.cpu_s;
        self.updates += other.updates;
    }
}

/// Append-only aggregate set of annotated examples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FewShotSet {
    examples: Vec<FewShotExample>,
    /// Failure event that produced each example (same order as `examples`).
    provenance: Vec<u64>,
    positive_events: BTreeSet<u64>,
    pub ledger: Ledger,
}

impl FewShotSet {
    pub fn examples(&self) -> &[FewShotExample] {
        &self.examples
    }

    pub fn provenance(&self) -> &[u64] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_positive_for(&self, event_id: u64) -> bool {
        self.positive_events.contains(&event_id)
    }

    /// Append without accounting. Used for preloading and tests.
    pub fn push_unchecked(&mut self, ex: FewShotExample) {
        self.examples.push(ex);
        self.provenance.push(u64::MAX);
    }

    pub(crate) fn record(&mut self, event_id: u64, ex: FewShotExample) {
        if ex.is_positive() {
            self.positive_events.insert(event_id);
        }
        self.ledger.counters.bump(ex.task);
        self.ledger.examples += 1;
        self.ledger.clicks += ex.clicks;
        self.ledger.annotation_s = SECONDS_PER_CLICK * self.ledger.clicks as f64;
        self.examples.push(ex);
        self.provenance.push(event_id);
    }

    /// Merge a prior set's examples in front of this one, keeping accounting
    /// separate: prior examples cost nothing in this run.
    pub fn with_prior(prior: &FewShotSet) -> Self {
        let mut s = FewShotSet::default();
        for ex in &prior.examples {
            s.push_unchecked(ex.clone());
        }
        s
    }

    /// Examples appended in this run (preloaded ones excluded).
    pub fn new_examples(&self) -> impl Iterator<Item = (&u64, &FewShotExample)> {
        self.provenance
            .iter()
            .zip(self.examples.iter())
            .filter(|(p, _)| **p != u64::MAX)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("few-shot set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Count of boxes per class over all examples.
    pub fn class_histogram(&self) -> BTreeMap<String, u32> {
        let mut h = BTreeMap::new();
        for ex in &self.examples {
            for b in &ex.boxes {
                *h.entry(b.class_label.clone()).or_insert(0) += 1;
            }
        }
        h
    }
}
