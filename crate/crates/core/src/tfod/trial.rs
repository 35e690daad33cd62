use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotate::{AnnotateError, Annotator, TrialStatus};
use super::store::{FailureStore, StoreError};
use super::types::{FailureEvent, FailureReason, FewShotExample, FewShotSet, Ledger, TaskId};
use crate::depth::{run_depth_task, DepthConfig, DepthEstimateSeries, DepthFailure};
use crate::detector::{BoundingBox, DetectorModel, DetectorParams};
use crate::grasp::{execute_grasp, scan_rotation, select_grasp, GraspError, GraspOutcome, Gripper, ScanConfig};
use crate::jacobian::PseudoJacobian;
use crate::robot::SimRobot;
use crate::servo::{run_servo, ServoConfig, ServoError, ServoPhase};
use crate::world::{ActuationNoise, CameraIntrinsics, CameraPose, Scene, WorldError};

#[derive(Debug, thiserror::Error)]
pub enum TfodError {
    #[error("update carries {0} positive examples; at most one is allowed")]
    ViolatesOnePerUpdate(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid trial setup: {0}")]
    Setup(String),
}

/// Append one event's examples and retrain when a positive arrived.
/// Returns the CPU seconds spent (zero without a positive example).
pub fn apply_update(
    set: &mut FewShotSet,
    event_id: u64,
    examples: Vec<FewShotExample>,
    model: &mut DetectorModel,
) -> Result<f64, TfodError> {
    let positives = examples.iter().filter(|e| e.is_positive()).count();
    if positives > 1 {
        return Err(TfodError::ViolatesOnePerUpdate(positives));
    }
    for ex in examples {
        set.record(event_id, ex);
    }
    if positives == 0 {
        return Ok(0.0);
    }
    let up = model.update_model(set);
    *model = up.model;
    set.ledger.cpu_s += up.cpu_seconds;
    set.ledger.updates += 1;
    Ok(up.cpu_seconds)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FindOutcome {
    Found {
        pose_index: usize,
        detection: BoundingBox,
        image_ids: Vec<u64>,
    },
    Failure(FailureEvent),
    NotFound {
        image_ids: Vec<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Motion {
    pub speed_mps: f64,
    pub settle_s: f64,
}

impl Default for Motion {
    fn default() -> Self {
        Self {
            speed_mps: 0.1,
            settle_s: 0.3,
        }
    }
}

/// Visit `poses` in order, stopping at the first with a detection of any
/// of `classes`. Without a detection a failure is raised unless `sentry`.
#[allow(clippy::too_many_arguments)]
pub fn run_find(
    robot: &mut SimRobot,
    poses: &[CameraPose],
    classes: &[String],
    sentry: bool,
    task: TaskId,
    event_id: u64,
    motion: &Motion,
) -> Result<FindOutcome, WorldError> {
    let mut image_ids = Vec::with_capacity(poses.len());
    for (i, p) in poses.iter().enumerate() {
        robot.move_to(*p, motion.speed_mps, motion.settle_s);
        let d = robot.observe(classes)?;
        robot.clock.tick();
        image_ids.push(d.image_id);
        let best = d
            .boxes
            .iter()
            .filter(|b| classes.contains(&b.class_label))
            .max_by(|a, b| a.confidence.total_cmp(&b.confidence));
        if let Some(b) = best {
            return Ok(FindOutcome::Found {
                pose_index: i,
                detection: b.clone(),
                image_ids,
            });
        }
    }
    if sentry {
        return Ok(FindOutcome::NotFound { image_ids });
    }
    Ok(FindOutcome::Failure(FailureEvent {
        event_id,
        task,
        image_ids,
        reason: FailureReason::NoDetectionAllPoses,
        timestamp: robot.clock.now(),
        task_classes: classes.to_vec(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthSource {
    Estimate,
    /// Ground-truth position plus Gaussian noise, available only while
    /// the object is detected.
    MapOracle { sigma_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub object_id: u32,
    /// Bin class to place into; `None` clears the object from the scene.
    #[serde(default)]
    pub place_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSetup {
    pub scene: Scene,
    pub intrinsics: CameraIntrinsics,
    pub noise: ActuationNoise,
    pub detector: DetectorParams,
    pub prior: Option<FewShotSet>,
    pub lhat: PseudoJacobian,
    pub start: CameraPose,
    pub find_poses: Vec<CameraPose>,
    pub place_poses: Vec<CameraPose>,
    pub targets: Vec<Target>,
    pub grasp: bool,
    pub depth_source: DepthSource,
    pub servo: ServoConfig,
    pub depth: DepthConfig,
    pub scan: ScanConfig,
    pub gripper: Gripper,
    pub motion: Motion,
    pub threshold: f64,
    pub annotate: bool,
    pub sentry: bool,
    pub sentry_sweeps: u32,
    pub example_cap: u32,
    pub oracle_jitter_px: f64,
    pub depth_restarts: u32,
    /// Bin positions applied after the k-th placement.
    pub bin_moves: Vec<Vec<(u32, [f64; 2])>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectOutcome {
    pub object_id: u32,
    pub class_label: String,
    pub vs: bool,
    pub de: bool,
    pub grasp: bool,
    pub placed: bool,
    pub attempts: u32,
    pub depth_error_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspRow {
    pub object: String,
    pub yaw: f64,
    pub expected_width: f64,
    pub outcome: GraspOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub event_id: u64,
    pub task: TaskId,
    pub reason: FailureReason,
    pub images: usize,
    pub timestamp: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthTrace {
    pub object: String,
    pub series: DepthEstimateSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub objects: Vec<ObjectOutcome>,
    pub grasps: Vec<GraspRow>,
    pub events: Vec<EventRow>,
    pub depth_traces: Vec<DepthTrace>,
    /// Accounting for examples added in this trial.
    pub ledger: Ledger,
    pub placements: u32,
    pub sim_seconds: f64,
    pub capped: bool,
    pub sentry_sweeps: u32,
}

impl TrialReport {
    pub fn examples(&self) -> u32 {
        self.ledger.examples
    }

    pub fn positive_examples(&self) -> u32 {
        self.events.iter().filter(|e| e.positive).count() as u32
    }
}

enum Step {
    Next,
    Stop,
}

struct Runner<'a, A: Annotator> {
    setup: &'a TrialSetup,
    robot: SimRobot,
    set: FewShotSet,
    store: &'a mut FailureStore,
    annotator: &'a mut A,
    report: TrialReport,
    next_event: u64,
    attempt_start: f64,
    map_rng: ChaCha8Rng,
    active: Vec<(Target, ObjectOutcome)>,
}

impl<A: Annotator> Runner<'_, A> {
    fn status(&mut self, phase: &str) {
        let s = TrialStatus {
            phase: phase.to_string(),
            trial: 0,
            examples: self.set.len(),
            counters: self.set.ledger.counters,
            pending: 0,
        };
        self.annotator.on_status(&s);
    }

    fn event_id(&mut self) -> u64 {
        self.next_event += 1;
        self.next_event
    }

    fn cap_reached(&self) -> bool {
        self.set.ledger.examples >= self.setup.example_cap
    }

    /// Log, annotate and update. Returns whether the trial may continue.
    fn on_failure(&mut self, event: FailureEvent) -> Result<bool, TfodError> {
        log::debug!(
            "{:?} failure {:?} at {:?} speed {:.3}",
            event.task,
            event.reason,
            self.robot.pose(),
            self.robot.speed()
        );
        self.set.ledger.robot_s += self.robot.clock.now() - self.attempt_start;
        let mut row = EventRow {
            event_id: event.event_id,
            task: event.task,
            reason: event.reason,
            images: event.image_ids.len(),
            timestamp: event.timestamp,
            positive: false,
        };
        if !self.setup.annotate {
            self.report.events.push(row);
            return Ok(false);
        }
        self.status("annotating");
        let entry = self.store.log_failure(event, &self.robot)?;
        let examples = self.annotator.annotate(&entry, self.store)?;
        row.positive = examples.iter().any(|e| e.is_positive());
        apply_update(&mut self.set, entry.event.event_id, examples, &mut self.robot.model)?;
        self.store.resolve(entry.event.event_id);
        self.report.events.push(row);
        self.status("running");
        Ok(!self.cap_reached())
    }

    fn retire(&mut self, idx: usize) {
        let (t, o) = self.active.remove(idx);
        self.robot.scene.remove(t.object_id);
        self.report.objects.push(o);
    }

    fn active_classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.active.iter().map(|(_, o)| o.class_label.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Active target of `label` closest to the camera axis.
    fn pick_target(&self, label: &str) -> Option<usize> {
        let cam = self.robot.pose();
        self.active
            .iter()
            .enumerate()
            .filter(|(_, (_, o))| o.class_label == label)
            .min_by(|(_, (a, _)), (_, (b, _))| {
                let da = self.planar_distance(a.object_id, &cam);
                let db = self.planar_distance(b.object_id, &cam);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
    }

    fn planar_distance(&self, id: u32, cam: &CameraPose) -> f64 {
        self.robot
            .scene
            .get(id)
            .map(|o| (o.position[0] - cam.x()).hypot(o.position[1] - cam.y()))
            .unwrap_or(f64::INFINITY)
    }

    fn servo_failure(&mut self, e: ServoError, label: &str) -> Result<Option<FailureEvent>, TfodError> {
        match e {
            ServoError::Failure(f) => {
                let reason = match f {
                    crate::servo::ServoFailure::Discontinuity { .. } => FailureReason::Discontinuity,
                    crate::servo::ServoFailure::MissingStreak { .. } => FailureReason::MissingStreak,
                };
                Ok(Some(FailureEvent {
                    event_id: self.event_id(),
                    task: TaskId::Servo,
                    image_ids: vec![f.image_id()],
                    reason,
                    timestamp: self.robot.clock.now(),
                    task_classes: vec![label.to_string()],
                }))
            }
            ServoError::Timeout(_) => Ok(None),
            ServoError::World(w) => Err(w.into()),
        }
    }

    fn lost(&mut self, task: TaskId, image_id: u64, label: &str) -> FailureEvent {
        FailureEvent {
            event_id: self.event_id(),
            task,
            image_ids: vec![image_id],
            reason: FailureReason::DetectionLost,
            timestamp: self.robot.clock.now(),
            task_classes: vec![label.to_string()],
        }
    }

    fn attempt(&mut self) -> Result<Step, TfodError> {
        let s = self.setup;
        self.attempt_start = self.robot.clock.now();
        let classes = self.active_classes();
        let eid = self.next_event + 1;
        let found = run_find(&mut self.robot, &s.find_poses, &classes, s.sentry, TaskId::Find, eid, &s.motion)?;
        let label = match found {
            FindOutcome::Found { detection, .. } => detection.class_label,
            FindOutcome::NotFound { .. } => {
                self.report.sentry_sweeps += 1;
                return Ok(if self.report.sentry_sweeps >= s.sentry_sweeps.max(1) {
                    Step::Stop
                } else {
                    Step::Next
                });
            }
            FindOutcome::Failure(ev) => {
                self.next_event = eid;
                return Ok(if self.on_failure(ev)? { Step::Next } else { Step::Stop });
            }
        };

        // Servo
        let mut restarts = 0;
        let (idx, series) = loop {
            if let Err(e) = run_servo(&mut self.robot, &s.lhat, &label, ServoPhase::PreDepth, &s.servo) {
                return self.fail_servo(e, &label);
            }
            let Some(idx) = self.pick_target(&label) else {
                return Ok(Step::Next);
            };
            self.active[idx].1.attempts += 1;
            self.active[idx].1.vs = true;
            match self.estimate_depth(idx, &label)? {
                Ok(series) => break (idx, series),
                Err(Some(ev)) => return self.after_failure(ev, idx),
                Err(None) => {
                    restarts += 1;
                    if restarts > s.depth_restarts {
                        self.retire(idx);
                        return Ok(Step::Next);
                    }
                }
            }
        };

        let obj = self
            .robot
            .scene
            .get(self.active[idx].0.object_id)
            .cloned()
            .ok_or_else(|| TfodError::Setup("target vanished".into()))?;
        let est_top_z = self.robot.pose().z() - series.final_depth();
        let err = est_top_z - obj.top_z();
        {
            let o = &mut self.active[idx].1;
            o.de = err.abs() < 0.5 * obj.shape.height();
            o.depth_error_m = Some(err);
        }
        self.report.depth_traces.push(DepthTrace {
            object: label.clone(),
            series,
        });
        if !s.grasp {
            self.retire(idx);
            return Ok(Step::Next);
        }

        // Grasp
        let here = self.robot.pose();
        let hover = CameraPose::new(here.x(), here.y(), est_top_z + s.gripper.hover_m, here.yaw());
        self.robot.move_to(hover, s.motion.speed_mps, s.motion.settle_s);
        if let Err(e) = run_servo(&mut self.robot, &s.lhat, &label, ServoPhase::PreGrasp, &s.servo) {
            return match self.servo_failure(e, &label)? {
                Some(ev) => self.after_failure(ev, idx),
                None => {
                    self.retire(idx);
                    Ok(Step::Next)
                }
            };
        }
        let scan = match scan_rotation(&mut self.robot, &label, &s.scan, &s.servo) {
            Ok(scan) => scan,
            Err(GraspError::DetectionLost { image_id }) => {
                let ev = self.lost(TaskId::Grasp, image_id, &label);
                return self.after_failure(ev, idx);
            }
            Err(GraspError::World(w)) => return Err(w.into()),
            Err(GraspError::ObjectTooWide { .. }) => unreachable!("scan does not size objects"),
        };
        let depth_now = self.robot.pose().z() - est_top_z;
        let plan = match select_grasp(&scan, depth_now, &self.robot, &s.gripper) {
            Ok(p) => p,
            Err(_) => {
                self.retire(idx);
                return Ok(Step::Next);
            }
        };
        let res = execute_grasp(&mut self.robot, &plan, &s.gripper);
        self.report.grasps.push(GraspRow {
            object: label.clone(),
            yaw: plan.gripper_yaw,
            expected_width: plan.expected_width_m,
            outcome: res.outcome,
        });
        if res.outcome != GraspOutcome::Success {
            self.retire(idx);
            return Ok(Step::Next);
        }
        // the grasped object may differ from the one the target list expected
        let idx = res
            .object_id
            .and_then(|id| self.active.iter().position(|(t, _)| t.object_id == id))
            .unwrap_or(idx);
        self.active[idx].1.grasp = true;

        match self.active[idx].0.place_class.clone() {
            None => {
                self.robot.held = None;
                self.active[idx].1.placed = true;
                self.report.placements += 1;
                self.retire(idx);
                Ok(Step::Next)
            }
            Some(bin) => self.place(idx, &bin),
        }
    }

    fn fail_servo(&mut self, e: ServoError, label: &str) -> Result<Step, TfodError> {
        match self.servo_failure(e, label)? {
            Some(ev) => Ok(if self.on_failure(ev)? { Step::Next } else { self.stop_or_retire(label) }),
            None => {
                if let Some(idx) = self.pick_target(label) {
                    self.active[idx].1.attempts += 1;
                    self.retire(idx);
                }
                Ok(Step::Next)
            }
        }
    }

    /// Without annotation a failure ends the object's only attempt.
    fn stop_or_retire(&mut self, label: &str) -> Step {
        if self.setup.annotate {
            return Step::Stop;
        }
        if let Some(idx) = self.pick_target(label) {
            self.active[idx].1.attempts += 1;
            self.retire(idx);
        }
        Step::Next
    }

    fn after_failure(&mut self, ev: FailureEvent, idx: usize) -> Result<Step, TfodError> {
        if self.on_failure(ev)? {
            return Ok(Step::Next);
        }
        if self.setup.annotate {
            return Ok(Step::Stop);
        }
        self.retire(idx);
        Ok(Step::Next)
    }

    /// `Err(Some)` is a detection failure, `Err(None)` a numerical one.
    fn estimate_depth(&mut self, idx: usize, label: &str) -> Result<Result<DepthEstimateSeries, Option<FailureEvent>>, TfodError> {
        let s = self.setup;
        match s.depth_source {
            DepthSource::Estimate => match run_depth_task(&mut self.robot, &s.lhat, label, &s.depth, &s.servo) {
                Ok(series) => Ok(Ok(series)),
                Err(DepthFailure::DetectionLost { image_id }) => Ok(Err(Some(self.lost(TaskId::Depth, image_id, label)))),
                Err(DepthFailure::Estimation(e)) => {
                    log::info!("depth estimation failed ({e}); restarting from servo");
                    Ok(Err(None))
                }
                Err(DepthFailure::World(w)) => Err(w.into()),
            },
            DepthSource::MapOracle { sigma_m } => {
                let id = self.active[idx].0.object_id;
                let top = self.robot.scene.get(id).map(|o| o.top_z()).unwrap_or(0.0);
                let n = Normal::new(0.0, sigma_m.max(0.0)).expect("finite sigma");
                let depth = self.robot.pose().z() - top + n.sample(&mut self.map_rng);
                Ok(Ok(DepthEstimateSeries {
                    checkpoints: Vec::new(),
                    final_median: depth,
                    travel: 0.0,
                    observations: 0,
                }))
            }
        }
    }

    fn place(&mut self, idx: usize, bin_class: &str) -> Result<Step, TfodError> {
        let s = self.setup;
        let classes = vec![bin_class.to_string()];
        loop {
            self.attempt_start = self.robot.clock.now();
            let eid = self.next_event + 1;
            let found = run_find(&mut self.robot, &s.place_poses, &classes, false, TaskId::PlaceFind, eid, &s.motion)?;
            match found {
                FindOutcome::Found { detection, .. } => {
                    let bins: Vec<_> = self
                        .robot
                        .scene
                        .objects
                        .iter()
                        .filter(|o| o.class_label == detection.class_label)
                        .cloned()
                        .collect();
                    let cam = self.robot.pose();
                    let Some(bin) = bins.iter().min_by(|a, b| {
                        let da = (a.position[0] - cam.x()).hypot(a.position[1] - cam.y());
                        let db = (b.position[0] - cam.x()).hypot(b.position[1] - cam.y());
                        da.total_cmp(&db)
                    }) else {
                        self.retire(idx);
                        return Ok(Step::Next);
                    };
                    let sigma = match s.depth_source {
                        DepthSource::MapOracle { sigma_m } => sigma_m,
                        DepthSource::Estimate => 0.0,
                    };
                    let n = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
                    let p = [
                        bin.position[0] + n.sample(&mut self.map_rng),
                        bin.position[1] + n.sample(&mut self.map_rng),
                    ];
                    let over = CameraPose::new(p[0], p[1], cam.z(), cam.yaw());
                    self.robot.move_to(over, s.motion.speed_mps, s.motion.settle_s);
                    self.robot.release_at(p, bin.top_z());
                    let ok = bin.footprint_contains(p) && bin.class_label == bin_class;
                    self.active[idx].1.placed = ok;
                    if ok {
                        self.report.placements += 1;
                        let k = self.report.placements as usize - 1;
                        if let Some(moves) = s.bin_moves.get(k) {
                            for (id, pos) in moves {
                                if let Some(o) = self.robot.scene.objects.iter_mut().find(|o| o.id == *id) {
                                    o.position = *pos;
                                }
                            }
                        }
                    }
                    self.retire(idx);
                    return Ok(Step::Next);
                }
                FindOutcome::Failure(ev) => {
                    self.next_event = eid;
                    if !self.on_failure(ev)? {
                        self.robot.held = None;
                        if self.setup.annotate {
                            return Ok(Step::Stop);
                        }
                        self.retire(idx);
                        return Ok(Step::Next);
                    }
                }
                FindOutcome::NotFound { .. } => unreachable!("placement search never runs in sentry mode"),
            }
        }
    }
}

/// Run one trial with a fresh failure store.
pub fn run_trial<A: Annotator>(setup: &TrialSetup, annotator: &mut A, seed: u64) -> Result<(TrialReport, FewShotSet), TfodError> {
    let mut store = FailureStore::in_memory();
    run_trial_with_store(setup, annotator, &mut store, seed)
}

/// Execute the task chain on every target. Any failure pauses for one
/// annotation, updates the detector and resumes from Find.
pub fn run_trial_with_store<A: Annotator>(
    setup: &TrialSetup,
    annotator: &mut A,
    store: &mut FailureStore,
    seed: u64,
) -> Result<(TrialReport, FewShotSet), TfodError> {
    if setup.find_poses.is_empty() {
        return Err(TfodError::Setup("at least one find pose is required".into()));
    }
    let base = DetectorModel::new(setup.detector.clone());
    let (set, model) = match &setup.prior {
        Some(p) => {
            let set = FewShotSet::with_prior(p);
            let model = base.update_model(&set).model;
            (set, model)
        }
        None => (FewShotSet::default(), base),
    };
    let mut robot = SimRobot::new(setup.scene.clone(), setup.intrinsics, setup.noise, model, seed);
    robot.threshold = setup.threshold;
    robot.set_pose(setup.start);
    let mut active = Vec::new();
    for t in &setup.targets {
        let obj = setup
            .scene
            .get(t.object_id)
            .ok_or_else(|| TfodError::Setup(format!("target {} is not in the scene", t.object_id)))?;
        active.push((
            t.clone(),
            ObjectOutcome {
                object_id: t.object_id,
                class_label: obj.class_label.clone(),
                vs: false,
                de: false,
                grasp: false,
                placed: false,
                attempts: 0,
                depth_error_m: None,
            },
        ));
    }
    let mut r = Runner {
        setup,
        robot,
        set,
        store,
        annotator,
        report: TrialReport {
            seed,
            objects: Vec::new(),
            grasps: Vec::new(),
            events: Vec::new(),
            depth_traces: Vec::new(),
            ledger: Ledger::default(),
            placements: 0,
            sim_seconds: 0.0,
            capped: false,
            sentry_sweeps: 0,
        },
        next_event: 0,
        attempt_start: 0.0,
        map_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7000),
        active,
    };
    r.status("running");
    // the empty-target sentry case still sweeps
    let sentry_only = r.active.is_empty() && setup.sentry;
    while !r.active.is_empty() || (sentry_only && r.report.sentry_sweeps < setup.sentry_sweeps.max(1)) {
        if r.cap_reached() {
            r.report.capped = true;
            break;
        }
        match r.attempt()? {
            Step::Next => {}
            Step::Stop => {
                r.report.capped = r.cap_reached();
                break;
            }
        }
    }
    // unattempted leftovers are reported as failures
    while !r.active.is_empty() {
        r.retire(0);
    }
    r.report.sim_seconds = r.robot.clock.now();
    r.report.ledger = r.set.ledger;
    r.status("done");
    Ok((r.report, r.set))
}
