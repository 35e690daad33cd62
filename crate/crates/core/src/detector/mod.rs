//! Parametric stand-in for a fine-tuned object detector.
//!
//! Detection quality depends on whether the few-shot set covers the
//! `(class, context bin)` of each object in view. Annotating one failure
//! image covers the bins of the objects it contains, so failures cluster
//! where the model has not seen examples and disappear after one update.

mod context;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tfod::FewShotSet;
use crate::world::GroundTruthBox;

pub use context::{classify_context, ContextBin, ContextConfig, DistanceBand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: (f64, f64),
    pub width: f64,
    pub height: f64,
    pub class_label: String,
    pub confidence: f64,
}

impl BoundingBox {
    /// Geometric mean of width and height.
    pub fn size(&self) -> f64 {
        (self.width * self.height).sqrt()
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.center.0 - self.width / 2.0,
            self.center.1 - self.height / 2.0,
            self.center.0 + self.width / 2.0,
            self.center.1 + self.height / 2.0,
        )
    }

    /// Whether any edge lies within `margin` pixels of the image border.
    pub fn touches_border(&self, image_size: (u32, u32), margin: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x0 <= margin
            || y0 <= margin
            || x1 >= image_size.0 as f64 - margin
            || y1 >= image_size.1 as f64 - margin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: u64,
    pub boxes: Vec<BoundingBox>,
    pub threshold_applied: f64,
}

impl DetectionSet {
    pub fn with_label<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a BoundingBox> + 'a {
        self.boxes.iter().filter(move |b| b.class_label == label)
    }
}

/// Per-bin detector behavior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    /// Probability of a high-confidence (>= 0.9) detection.
    pub detect_prob: f64,
    /// Probability of a low-confidence detection instead.
    pub low_conf_prob: f64,
    /// Corner jitter standard deviation in pixels.
    pub jitter_px: f64,
    /// Per-frame probability of a false positive of this class.
    pub fp_rate: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassOverride {
    #[serde(default)]
    pub covered: Option<Reliability>,
    #[serde(default)]
    pub uncovered: Option<Reliability>,
}

/// Detector parameter file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub covered: Reliability,
    pub uncovered: Reliability,
    /// Classes with no annotated example at all.
    pub novel: Reliability,
    pub class_overrides: BTreeMap<String, ClassOverride>,
    /// Multiplier on false-positive rates in bins witnessed by a true negative.
    pub true_negative_fp_factor: f64,
    /// Per-frame probability that a cluttered object is reported under a
    /// different task label when that label is not covered in its bin.
    pub confusion_rate: f64,
    /// Share of false positives and confusions drawn from the high-confidence mode.
    pub fp_high_conf_share: f64,
    pub fp_vocabulary: Vec<String>,
    /// Simulated training time per detector update.
    pub update_cpu_s: f64,
    pub context: ContextConfig,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            covered: Reliability {
                detect_prob: 0.99,
                low_conf_prob: 0.0,
                jitter_px: 1.5,
                fp_rate: 0.002,
            },
            uncovered: Reliability {
                detect_prob: 0.25,
                low_conf_prob: 0.45,
                jitter_px: 6.0,
                fp_rate: 0.02,
            },
            novel: Reliability {
                detect_prob: 0.0,
                low_conf_prob: 0.2,
                jitter_px: 6.0,
                fp_rate: 0.02,
            },
            class_overrides: BTreeMap::new(),
            true_negative_fp_factor: 0.25,
            confusion_rate: 0.03,
            fp_high_conf_share: 0.2,
            fp_vocabulary: vec!["person".into(), "chair".into(), "bottle".into()],
            update_cpu_s: 227.0,
            context: ContextConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DetectorError {
    #[error("invalid detector parameters: {0}")]
    InvalidParams(String),
    #[error("detector parameter parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

impl DetectorParams {
    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        let p: DetectorParams = serde_json::from_str(text).map_err(|e| DetectorError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let check_cov = |name: &str, r: &Reliability| {
            if r.detect_prob < 0.97 || r.jitter_px > 2.0 {
                return Err(DetectorError::InvalidParams(format!(
                    "{name}: covered bins need detect_prob >= 0.97 and jitter <= 2 px"
                )));
            }
            Ok(())
        };
        let check_unc = |name: &str, r: &Reliability| {
            if r.detect_prob > 0.3 {
                return Err(DetectorError::InvalidParams(format!(
                    "{name}: uncovered bins need detect_prob <= 0.3"
                )));
            }
            Ok(())
        };
        for r in [&self.covered, &self.uncovered, &self.novel] {
            let total = r.detect_prob + r.low_conf_prob;
            if !(0.0..=1.0).contains(&r.detect_prob)
                || !(0.0..=1.0).contains(&r.low_conf_prob)
                || total > 1.0 + 1e-12
                || r.jitter_px < 0.0
                || !(0.0..=1.0).contains(&r.fp_rate)
            {
                return Err(DetectorError::InvalidParams(format!(
                    "probabilities out of range in {r:?}"
                )));
            }
        }
        check_cov("covered", &self.covered)?;
        check_unc("uncovered", &self.uncovered)?;
        check_unc("novel", &self.novel)?;
        for (class, o) in &self.class_overrides {
            if let Some(r) = &o.covered {
                check_cov(class, r)?;
            }
            if let Some(r) = &o.uncovered {
                check_unc(class, r)?;
            }
        }
        Ok(())
    }
}

/// One projected object as the detector sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectView {
    pub gt: GroundTruthBox,
    pub bin: ContextBin,
    pub clutter: bool,
}

/// Everything the detector needs about one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    pub image_id: u64,
    pub image_size: (u32, u32),
    pub objects: Vec<ObjectView>,
    /// Bin for the frame as a whole (ground depth), used for false positives.
    pub view_bin: ContextBin,
    /// Scene class vocabulary (sorted).
    pub vocabulary: Vec<String>,
    /// Classes the current task is looking for; confusions map onto these.
    pub task_classes: Vec<String>,
}

/// Immutable detector state. Coverage only grows.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    params: Arc<DetectorParams>,
    covered: BTreeSet<(String, ContextBin)>,
    true_negative_bins: BTreeSet<ContextBin>,
}

/// Result of a detector update: the new model and simulated training time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub model: DetectorModel,
    pub cpu_seconds: f64,
}

impl DetectorModel {
    pub fn new(params: DetectorParams) -> Self {
        Self {
            params: Arc::new(params),
            covered: BTreeSet::new(),
            true_negative_bins: BTreeSet::new(),
        }
    }

    /// A model that already covers every bin of `classes`.
    pub fn fully_trained(params: DetectorParams, classes: &[&str]) -> Self {
        let mut m = Self::new(params);
        for c in classes {
            for b in ContextBin::all() {
                m.covered.insert((c.to_string(), b));
            }
        }
        m
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn is_covered(&self, class: &str, bin: &ContextBin) -> bool {
        self.covered.contains(&(class.to_string(), *bin))
    }

    pub fn covered_bins(&self) -> impl Iterator<Item = &(String, ContextBin)> {
        self.covered.iter()
    }

    pub fn knows_class(&self, class: &str) -> bool {
        self.covered.iter().any(|(c, _)| c == class)
    }

    pub fn reliability(&self, class: &str, bin: &ContextBin) -> Reliability {
        let o = self.params.class_overrides.get(class);
        if self.is_covered(class, bin) {
            o.and_then(|o| o.covered).unwrap_or(self.params.covered)
        } else if self.knows_class(class) {
            o.and_then(|o| o.uncovered).unwrap_or(self.params.uncovered)
        } else {
            self.params.novel
        }
    }

    pub fn fp_rate(&self, class: &str, view_bin: &ContextBin) -> f64 {
        let base = self.reliability(class, view_bin).fp_rate;
        if self.true_negative_bins.contains(view_bin) {
            base * self.params.true_negative_fp_factor
        } else {
            base
        }
    }

    /// Fold a few-shot set into the model. Idempotent; never removes coverage.
    pub fn update_model(&self, set: &FewShotSet) -> ModelUpdate {
        let mut next = self.clone();
        for ex in set.examples() {
            if ex.boxes.is_empty() {
                next.true_negative_bins.insert(ex.view_bin);
            }
            for b in &ex.boxes {
                next.covered.insert((b.class_label.clone(), b.context));
            }
        }
        ModelUpdate {
            model: next,
            cpu_seconds: self.params.update_cpu_s,
        }
    }
}

fn high_conf<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let beta = Beta::new(5.0, 2.0).expect("valid beta");
    let x: f64 = beta.sample(rng);
    (0.9 + 0.1 * x).min(1.0)
}

fn low_conf<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let beta = Beta::new(2.0, 2.0).expect("valid beta");
    let x: f64 = beta.sample(rng);
    (0.1 + 0.8 * x).min(0.8999)
}

fn jittered<R: Rng + ?Sized>(gt: &GroundTruthBox, sigma: f64, size: (u32, u32), rng: &mut R) -> (f64, f64, f64, f64) {
    let mut n = [0.0f64; 4];
    for v in n.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * sigma;
    }
    let (w, h) = (size.0 as f64, size.1 as f64);
    let mut x0 = (gt.x_min + n[0]).clamp(0.0, w);
    let mut y0 = (gt.y_min + n[1]).clamp(0.0, h);
    let mut x1 = (gt.x_max + n[2]).clamp(0.0, w);
    let mut y1 = (gt.y_max + n[3]).clamp(0.0, h);
    if x1 - x0 < 1.0 {
        let c = (0.5 * (x0 + x1)).clamp(0.5, w - 0.5);
        x0 = c - 0.5;
        x1 = c + 0.5;
    }
    if y1 - y0 < 1.0 {
        let c = (0.5 * (y0 + y1)).clamp(0.5, h - 0.5);
        y0 = c - 0.5;
        y1 = c + 0.5;
    }
    (x0, y0, x1, y1)
}

fn make_box(c: (f64, f64, f64, f64), label: &str, confidence: f64) -> BoundingBox {
    BoundingBox {
        center: (0.5 * (c.0 + c.2), 0.5 * (c.1 + c.3)),
        width: c.2 - c.0,
        height: c.3 - c.1,
        class_label: label.to_string(),
        confidence,
    }
}

/// Candidate detections before thresholding. The number of random draws is
/// fixed by the view, so thresholds only filter and never reshuffle.
pub fn propose<R: Rng + ?Sized>(view: &SceneView, model: &DetectorModel, rng: &mut R) -> Vec<BoundingBox> {
    let p = model.params();
    let mut out = Vec::new();
    for ov in &view.objects {
        let rel = model.reliability(&ov.gt.class_label, &ov.bin);
        let u: f64 = rng.random();
        let hc = high_conf(rng);
        let lc = low_conf(rng);
        let corners = jittered(&ov.gt, rel.jitter_px, view.image_size, rng);
        if u < rel.detect_prob {
            out.push(make_box(corners, &ov.gt.class_label, hc));
        } else if u < rel.detect_prob + rel.low_conf_prob {
            out.push(make_box(corners, &ov.gt.class_label, lc));
        }

        // clutter confusion: the object is reported under another task label
        let uc: f64 = rng.random();
        let pick: f64 = rng.random();
        let mode: f64 = rng.random();
        let hc2 = high_conf(rng);
        let lc2 = low_conf(rng);
        if ov.clutter && !view.task_classes.is_empty() && uc < p.confusion_rate {
            let others: Vec<&String> = view
                .task_classes
                .iter()
                .filter(|c| **c != ov.gt.class_label)
                .collect();
            if !others.is_empty() {
                let idx = ((pick * others.len() as f64) as usize).min(others.len() - 1);
                let label = others[idx];
                if !model.is_covered(label, &ov.bin) {
                    let conf = if mode < p.fp_high_conf_share { hc2 } else { lc2 };
                    out.push(make_box(corners, label, conf));
                }
            }
        }
    }

    let mut vocab: Vec<&String> = view.vocabulary.iter().chain(p.fp_vocabulary.iter()).collect();
    vocab.sort();
    vocab.dedup();
    let (w, h) = (view.image_size.0 as f64, view.image_size.1 as f64);
    for class in vocab {
        let u: f64 = rng.random();
        let cx: f64 = rng.random::<f64>() * w;
        let cy: f64 = rng.random::<f64>() * h;
        let bw: f64 = 30.0 + 90.0 * rng.random::<f64>();
        let bh: f64 = 30.0 + 90.0 * rng.random::<f64>();
        let mode: f64 = rng.random();
        let hc = high_conf(rng);
        let lc = low_conf(rng);
        if u < model.fp_rate(class, &view.view_bin) {
            let x0 = (cx - bw / 2.0).max(0.0);
            let x1 = (cx + bw / 2.0).min(w);
            let y0 = (cy - bh / 2.0).max(0.0);
            let y1 = (cy + bh / 2.0).min(h);
            let conf = if mode < p.fp_high_conf_share { hc } else { lc };
            out.push(make_box((x0, y0, x1, y1), class, conf));
        }
    }
    out
}

/// Run the detector on one view and keep boxes at or above `threshold`.
pub fn detect<R: Rng + ?Sized>(
    view: &SceneView,
    model: &DetectorModel,
    threshold: f64,
    rng: &mut R,
) -> DetectionSet {
    let threshold = threshold.clamp(0.0, 1.0);
    let boxes = propose(view, model, rng)
        .into_iter()
        .filter(|b| b.confidence >= threshold)
        .collect();
    DetectionSet {
        image_id: view.image_id,
        boxes,
        threshold_applied: threshold,
    }
}
