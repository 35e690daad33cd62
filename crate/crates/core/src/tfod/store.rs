use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::FailureEvent;
use crate::robot::{CapturedImage, SimRobot};
use crate::world::WorldError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StoreError {
    #[error("failure event {0} was already logged")]
    DuplicateEvent(u64),
    #[error("invalid failure event: {0}")]
    Invalid(String),
    #[error("image {0} is no longer available for capture")]
    MissingImage(u64),
    #[error("failure store i/o: {0}")]
    Io(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// A failure awaiting annotation, with everything an annotator needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingEntry {
    pub event: FailureEvent,
    pub vocabulary: Vec<String>,
}

/// Sidecar written next to each failure PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub image_id: u64,
    pub event_id: u64,
    pub task: super::types::TaskId,
    pub reason: super::types::FailureReason,
    pub width: u32,
    pub height: u32,
    pub captured_at: f64,
    pub camera: crate::world::CameraPose,
    pub view_bin: crate::detector::ContextBin,
}

/// Failure images and their events, optionally mirrored to disk.
#[derive(Debug, Default)]
pub struct FailureStore {
    dir: Option<PathBuf>,
    images: BTreeMap<u64, CapturedImage>,
    events: BTreeMap<u64, FailureEvent>,
    pending: VecDeque<u64>,
    resolved: BTreeSet<u64>,
}

impl FailureStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Mirror every logged image to `dir` as `<id>.png` plus `<id>.json`.
    pub fn on_disk(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(|e| StoreError::Io(e.to_string()))?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            ..Self::default()
        })
    }

    pub fn log_failure(&mut self, event: FailureEvent, robot: &SimRobot) -> Result<PendingEntry, StoreError> {
        if self.events.contains_key(&event.event_id) {
            return Err(StoreError::DuplicateEvent(event.event_id));
        }
        event.validate().map_err(StoreError::Invalid)?;
        let mut captured = Vec::with_capacity(event.image_ids.len());
        for id in &event.image_ids {
            let img = match self.images.get(id) {
                Some(img) => img.clone(),
                None => robot.capture(*id)?.ok_or(StoreError::MissingImage(*id))?,
            };
            captured.push(img);
        }
        let vocabulary = captured
            .first()
            .map(|c| c.vocabulary.clone())
            .unwrap_or_default();
        if let Some(dir) = &self.dir {
            for img in &captured {
                write_image(dir, img, &event)?;
            }
        }
        for img in captured {
            self.images.insert(img.record.image_id, img);
        }
        self.pending.push_back(event.event_id);
        self.events.insert(event.event_id, event.clone());
        Ok(PendingEntry { event, vocabulary })
    }

    pub fn image(&self, id: u64) -> Option<&CapturedImage> {
        self.images.get(&id)
    }

    pub fn event(&self, id: u64) -> Option<&FailureEvent> {
        self.events.get(&id)
    }

    pub fn events(&self) -> impl Iterator<Item = &FailureEvent> {
        self.events.values()
    }

    /// Oldest first.
    pub fn pending(&self) -> Vec<&FailureEvent> {
        self.pending.iter().filter_map(|id| self.events.get(id)).collect()
    }

    pub fn is_resolved(&self, event_id: u64) -> bool {
        self.resolved.contains(&event_id)
    }

    pub fn resolve(&mut self, event_id: u64) {
        self.pending.retain(|id| *id != event_id);
        self.resolved.insert(event_id);
    }
}

fn write_image(dir: &Path, img: &CapturedImage, event: &FailureEvent) -> Result<(), StoreError> {
    let id = img.record.image_id;
    img.record.write_png(&dir.join(format!("{id}.png")))?;
    let sidecar = ImageSidecar {
        image_id: id,
        event_id: event.event_id,
        task: event.task,
        reason: event.reason,
        width: img.record.width,
        height: img.record.height,
        captured_at: img.time,
        camera: img.record.camera,
        view_bin: img.view_bin,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| StoreError::Io(e.to_string()))?;
    std::fs::write(dir.join(format!("{id}.json")), json).map_err(|e| StoreError::Io(e.to_string()))
}
