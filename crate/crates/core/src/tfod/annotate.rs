use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::{FailureStore, PendingEntry};
use super::types::{
    AnnotatedBox, AnnotationSource, FailureReason, FewShotExample, TaskCounters, TaskId,
};
use crate::robot::CapturedImage;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnnotateError {
    #[error("no annotation for event {event_id} within {waited_s:.1} s")]
    Starvation { event_id: u64, waited_s: f64 },
    #[error("image {0} missing from the failure store")]
    MissingImage(u64),
    #[error("annotation queue closed")]
    Closed,
}

/// Produces the examples for one failure event. At most one may be positive.
pub trait Annotator {
    fn annotate(&mut self, entry: &PendingEntry, store: &FailureStore) -> Result<Vec<FewShotExample>, AnnotateError>;

    fn on_status(&mut self, _status: &TrialStatus) {}
}

/// Ground-truth boxes of `task_classes` with uniform corner jitter of at
/// most `jitter_px`. An image without such objects gives a true negative.
pub fn oracle_annotate<R: Rng + ?Sized>(
    image: &CapturedImage,
    task: TaskId,
    task_classes: &[String],
    jitter_px: f64,
    rng: &mut R,
) -> FewShotExample {
    let (w, h) = (image.record.width as f64, image.record.height as f64);
    let mut boxes = Vec::new();
    for gt in &image.record.boxes {
        if !task_classes.contains(&gt.class_label) {
            continue;
        }
        let mut j = || {
            if jitter_px > 0.0 {
                rng.random_range(-jitter_px..=jitter_px)
            } else {
                0.0
            }
        };
        let x0 = (gt.x_min + j()).clamp(0.0, w);
        let y0 = (gt.y_min + j()).clamp(0.0, h);
        let x1 = (gt.x_max + j()).clamp(0.0, w);
        let y1 = (gt.y_max + j()).clamp(0.0, h);
        let context = image
            .object_bins
            .iter()
            .find(|(id, _)| *id == gt.object_id)
            .map(|(_, b)| *b)
            .unwrap_or(image.view_bin);
        boxes.push(AnnotatedBox {
            class_label: gt.class_label.clone(),
            x: x0.min(x1),
            y: y0.min(y1),
            w: (x1 - x0).abs(),
            h: (y1 - y0).abs(),
            context,
        });
    }
    FewShotExample {
        image_id: image.record.image_id,
        task,
        clicks: boxes.len() as u32,
        boxes,
        view_bin: image.view_bin,
        source: AnnotationSource::Oracle,
    }
}

fn relevant(image: &CapturedImage, classes: &[String]) -> bool {
    image.record.boxes.iter().any(|b| classes.contains(&b.class_label))
}

/// Headless stand-in for a human. Labels the first failure image that
/// shows a task-relevant object, else the first image as a true negative.
pub struct OracleAnnotator<R> {
    pub jitter_px: f64,
    pub rng: R,
}

impl<R: Rng> Annotator for OracleAnnotator<R> {
    fn annotate(&mut self, entry: &PendingEntry, store: &FailureStore) -> Result<Vec<FewShotExample>, AnnotateError> {
        let ev = &entry.event;
        let mut images = Vec::with_capacity(ev.image_ids.len());
        for id in &ev.image_ids {
            images.push(store.image(*id).ok_or(AnnotateError::MissingImage(*id))?);
        }
        let pick = images
            .iter()
            .find(|img| relevant(img, &ev.task_classes))
            .unwrap_or(&images[0]);
        Ok(vec![oracle_annotate(
            pick,
            ev.task,
            &ev.task_classes,
            self.jitter_px,
            &mut self.rng,
        )])
    }
}

// ---- human queue wire forms ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingFailure {
    pub event_id: u64,
    pub task: TaskId,
    pub reason: FailureReason,
    pub image_ids: Vec<u64>,
    pub image_urls: Vec<String>,
    pub vocabulary: Vec<String>,
    pub created_at: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireBox {
    #[serde(rename = "class")]
    pub class_label: String,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSubmission {
    pub event_id: u64,
    pub image_id: u64,
    #[serde(default)]
    pub boxes: Vec<WireBox>,
    #[serde(default)]
    pub true_negative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub example_id: u64,
    pub clicks: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SubmitError {
    #[error("unknown failure event {0}")]
    UnknownEvent(u64),
    #[error("event {0} already has its positive example")]
    Conflict(u64),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialStatus {
    pub phase: String,
    pub trial: u32,
    pub examples: usize,
    pub counters: TaskCounters,
    pub pending: usize,
}

#[derive(Default)]
struct QueueState {
    order: VecDeque<u64>,
    entries: BTreeMap<u64, PendingEntry>,
    images: BTreeMap<u64, CapturedImage>,
    /// Resolved events and whether a positive was received.
    resolved: BTreeMap<u64, bool>,
    inbox: Vec<FewShotExample>,
    status: TrialStatus,
    next_example: u64,
    closed: bool,
}

/// Pending-annotation queue shared between the trial loop and the server.
#[derive(Clone, Default)]
pub struct HumanQueue {
    inner: Arc<(Mutex<QueueState>, Condvar)>,
}

impl std::fmt::Debug for HumanQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HumanQueue").finish_non_exhaustive()
    }
}

impl HumanQueue {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueState> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn post(&self, entry: PendingEntry, images: Vec<CapturedImage>) {
        let mut s = self.lock();
        for img in images {
            s.images.insert(img.record.image_id, img);
        }
        s.order.push_back(entry.event.event_id);
        s.entries.insert(entry.event.event_id, entry);
        s.status.pending = s.order.len();
    }

    pub fn list_pending(&self) -> Vec<PendingFailure> {
        let s = self.lock();
        s.order
            .iter()
            .filter_map(|id| s.entries.get(id))
            .map(|e| PendingFailure {
                event_id: e.event.event_id,
                task: e.event.task,
                reason: e.event.reason,
                image_ids: e.event.image_ids.clone(),
                image_urls: e
                    .event
                    .image_ids
                    .iter()
                    .map(|i| format!("/api/v1/images/{i}"))
                    .collect(),
                vocabulary: e.vocabulary.clone(),
                created_at: e.event.timestamp,
            })
            .collect()
    }

    pub fn image(&self, id: u64) -> Option<CapturedImage> {
        self.lock().images.get(&id).cloned()
    }

    pub fn submit(&self, sub: &AnnotationSubmission) -> Result<SubmissionAck, SubmitError> {
        let mut s = self.lock();
        let entry = s
            .entries
            .get(&sub.event_id)
            .ok_or(SubmitError::UnknownEvent(sub.event_id))?;
        if !entry.event.image_ids.contains(&sub.image_id) {
            return Err(SubmitError::Invalid(format!(
                "image {} does not belong to event {}",
                sub.image_id, sub.event_id
            )));
        }
        let positive = !sub.boxes.is_empty();
        if sub.true_negative && positive {
            return Err(SubmitError::Invalid("true negative submissions carry no boxes".into()));
        }
        if !sub.true_negative && !positive {
            return Err(SubmitError::Invalid("submission has no boxes and is not a true negative".into()));
        }
        if positive && s.resolved.contains_key(&sub.event_id) {
            return Err(SubmitError::Conflict(sub.event_id));
        }
        let img = s
            .images
            .get(&sub.image_id)
            .ok_or_else(|| SubmitError::Invalid(format!("image {} not stored", sub.image_id)))?;
        let (w, h) = (img.record.width as i64, img.record.height as i64);
        let mut boxes = Vec::with_capacity(sub.boxes.len());
        for b in &sub.boxes {
            if b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > w || b.y + b.h > h {
                return Err(SubmitError::Invalid(format!(
                    "box ({}, {}, {}, {}) is outside the {w}x{h} image",
                    b.x, b.y, b.w, b.h
                )));
            }
            if !entry.vocabulary.contains(&b.class_label) {
                return Err(SubmitError::Invalid(format!("class '{}' is not in the vocabulary", b.class_label)));
            }
            let cx = b.x as f64 + b.w as f64 / 2.0;
            let cy = b.y as f64 + b.h as f64 / 2.0;
            boxes.push(AnnotatedBox {
                class_label: b.class_label.clone(),
                x: b.x as f64,
                y: b.y as f64,
                w: b.w as f64,
                h: b.h as f64,
                context: img.bin_near(cx, cy),
            });
        }
        let ex = FewShotExample {
            image_id: sub.image_id,
            task: entry.event.task,
            clicks: boxes.len() as u32,
            boxes,
            view_bin: img.view_bin,
            source: AnnotationSource::Human,
        };
        let clicks = ex.clicks;
        let resolved = s.resolved.entry(sub.event_id).or_insert(false);
        *resolved |= positive;
        s.order.retain(|id| *id != sub.event_id);
        s.status.pending = s.order.len();
        s.inbox.push(ex);
        s.next_example += 1;
        let example_id = s.next_example;
        drop(s);
        self.inner.1.notify_all();
        Ok(SubmissionAck { example_id, clicks })
    }

    /// Block until `event_id` is resolved, then drain every submitted example.
    pub fn wait_for(&self, event_id: u64, timeout: Duration) -> Result<Vec<FewShotExample>, AnnotateError> {
        let start = Instant::now();
        let mut s = self.lock();
        loop {
            if s.resolved.contains_key(&event_id) {
                return Ok(std::mem::take(&mut s.inbox));
            }
            if s.closed {
                return Err(AnnotateError::Closed);
            }
            let waited = start.elapsed();
            if waited >= timeout {
                return Err(AnnotateError::Starvation {
                    event_id,
                    waited_s: waited.as_secs_f64(),
                });
            }
            s = self
                .inner
                .1
                .wait_timeout(s, timeout - waited)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    pub fn set_status(&self, status: TrialStatus) {
        let mut s = self.lock();
        let pending = s.order.len();
        s.status = TrialStatus { pending, ..status };
    }

    pub fn status(&self) -> TrialStatus {
        self.lock().status.clone()
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.inner.1.notify_all();
    }
}

/// Annotator that posts to a [`HumanQueue`] and blocks for the answer.
#[derive(Debug, Clone)]
pub struct HumanAnnotator {
    pub queue: HumanQueue,
    pub timeout: Duration,
}

impl Annotator for HumanAnnotator {
    fn annotate(&mut self, entry: &PendingEntry, store: &FailureStore) -> Result<Vec<FewShotExample>, AnnotateError> {
        let mut images = Vec::new();
        for id in &entry.event.image_ids {
            images.push(store.image(*id).cloned().ok_or(AnnotateError::MissingImage(*id))?);
        }
        self.queue.post(entry.clone(), images);
        self.queue.wait_for(entry.event.event_id, self.timeout)
    }

    fn on_status(&mut self, status: &TrialStatus) {
        self.queue.set_status(status.clone());
    }
}
