use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{has_converged, DegenerateUpdate, Formulation, PseudoJacobian};
use crate::detector::{classify_context, DetectorModel, DetectorParams};
use crate::par::{self, Execution};
use crate::robot::SimRobot;
use crate::servo::{nearest_box, ImageFeature};
use crate::tfod::{AnnotatedBox, AnnotationSource, FewShotExample, FewShotSet, TaskId};
use crate::world::{
    pose_delta, ActuationNoise, CameraIntrinsics, CameraPose, Scene, SceneObject, Shape, WorldError,
};

/// Eight planar moves (m) that visit every sign combination and return to
/// the starting pose.
pub const DEFAULT_SCHEDULE: [[f64; 2]; 8] = [
    [0.05, 0.05],
    [-0.05, 0.05],
    [-0.05, -0.05],
    [0.05, -0.05],
    [-0.05, 0.0],
    [0.05, 0.0],
    [0.0, -0.05],
    [0.0, 0.05],
];

/// Sources of disturbance during learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Corner jitter of the (covered) detector, px.
    pub detection_jitter_px: f64,
    pub actuation: ActuationNoise,
    /// Per-reading error of the measured planar camera position, m.
    #[serde(default)]
    pub odometry_sigma_m: f64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            detection_jitter_px: 0.0,
            actuation: ActuationNoise::none(),
            odometry_sigma_m: 0.0,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            detection_jitter_px: 1.5,
            actuation: ActuationNoise::default(),
            odometry_sigma_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningSetup {
    pub scene: Scene,
    pub target_id: u32,
    pub intrinsics: CameraIntrinsics,
    pub start: CameraPose,
    pub detector: DetectorParams,
    pub noise: NoiseConfig,
    pub schedule: Vec<[f64; 2]>,
    pub speed_mps: f64,
    pub settle_s: f64,
    pub max_updates: u32,
    /// Frames to wait for the target after a move before giving up.
    pub missing_limit: u32,
}

pub const RACQUETBALL_RADIUS_M: f64 = 0.0285;
/// Depth of the learning target below the camera.
pub const LEARNING_DEPTH_M: f64 = 0.3176;

impl LearningSetup {
    /// A thin disc of racquetball diameter centered under the camera.
    pub fn racquetball(noise: NoiseConfig) -> Self {
        let h = 1e-4;
        let ball = SceneObject {
            id: 1,
            class_label: "racquetball".into(),
            shape: Shape::Cylinder {
                r: RACQUETBALL_RADIUS_M,
                h,
            },
            position: [0.0, 0.0],
            yaw: 0.0,
            support_height: 0.0,
            graspable: true,
            clutter_group: None,
        };
        Self {
            scene: Scene::new(vec![ball]).expect("valid scene"),
            target_id: 1,
            intrinsics: CameraIntrinsics::default(),
            start: CameraPose::new(0.0, 0.0, h + LEARNING_DEPTH_M, 0.0),
            detector: DetectorParams::default(),
            noise,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            speed_mps: 0.05,
            settle_s: 0.3,
            max_updates: 150,
            missing_limit: 20,
        }
    }

    /// Analytic `(dx/ds_x, dy/ds_y)` at the starting depth.
    pub fn analytic_diagonal(&self) -> (f64, f64) {
        let target = self.scene.get(self.target_id).expect("target in scene");
        let z = self.start.z() - target.top_z();
        let f = self.intrinsics.focal_px;
        (-z / f, z / f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub index: u32,
    pub dx: [f64; 6],
    pub de: [f64; 2],
    pub lhat: [[f64; 2]; 6],
    pub l1_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningSession {
    pub formulation: Formulation,
    pub seed: u64,
    pub motion_schedule: Vec<[f64; 2]>,
    pub update_log: Vec<UpdateRecord>,
    pub converged: bool,
    pub updates_used: u32,
    /// Moves whose image change was too small to update on.
    pub skipped: u32,
    pub wall_time: f64,
    pub initial: PseudoJacobian,
    pub lhat: PseudoJacobian,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LearnError {
    #[error("update {update}: {source}")]
    Degenerate {
        update: u32,
        source: DegenerateUpdate,
    },
    #[error("no convergence after {} updates", .0.updates_used)]
    NonConvergence(Box<LearningSession>),
    #[error("learning target lost for {frames} frames (last image {image_id})")]
    TargetLost { image_id: u64, frames: u32 },
    #[error(transparent)]
    World(#[from] WorldError),
}

fn locate(
    robot: &mut SimRobot,
    label: &str,
    near: &ImageFeature,
    missing_limit: u32,
) -> Result<ImageFeature, LearnError> {
    let classes = [label.to_string()];
    for _ in 0..missing_limit {
        let d = robot.observe(&classes)?;
        if let Some((_, s)) = nearest_box(&d, label, near) {
            return Ok(s);
        }
        robot.clock.tick();
    }
    Err(LearnError::TargetLost {
        image_id: robot.last_image_id().unwrap_or(0),
        frames: missing_limit,
    })
}

/// Single-click model covering the target's bin at the start pose.
pub(crate) fn one_click_model(setup: &LearningSetup) -> DetectorModel {
    let mut params = setup.detector.clone();
    params.covered.jitter_px = setup.noise.detection_jitter_px;
    let model = DetectorModel::new(params);
    let target = setup.scene.get(setup.target_id).expect("target in scene");
    let cfg = model.params().context;
    let bin = classify_context(target, &setup.start, 0.0, false, &cfg);
    let mut set = FewShotSet::default();
    set.push_unchecked(FewShotExample {
        image_id: 0,
        task: TaskId::Find,
        boxes: vec![AnnotatedBox {
            class_label: target.class_label.clone(),
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 1.0,
            context: bin,
        }],
        view_bin: cfg.bin(setup.start.z(), 0.0, false),
        source: AnnotationSource::Oracle,
        clicks: 1,
    });
    model.update_model(&set).model
}

/// Run the motion schedule, updating after every move until the estimate
/// stops changing.
pub fn learn_session(
    setup: &LearningSetup,
    formulation: Formulation,
    seed: u64,
) -> Result<LearningSession, LearnError> {
    let model = one_click_model(setup);
    let mut robot = SimRobot::new(
        setup.scene.clone(),
        setup.intrinsics,
        setup.noise.actuation,
        model,
        seed,
    );
    robot.set_pose(setup.start);
    learn_with_robot(&mut robot, setup, formulation, formulation.initial(), seed)
}

/// As [`learn_session`] but from an explicit starting estimate.
pub fn learn_session_from(
    setup: &LearningSetup,
    formulation: Formulation,
    initial: PseudoJacobian,
    seed: u64,
) -> Result<LearningSession, LearnError> {
    let model = one_click_model(setup);
    let mut robot = SimRobot::new(
        setup.scene.clone(),
        setup.intrinsics,
        setup.noise.actuation,
        model,
        seed,
    );
    robot.set_pose(setup.start);
    learn_with_robot(&mut robot, setup, formulation, initial, seed)
}

/// Learning loop on an already-positioned robot.
pub fn learn_with_robot(
    robot: &mut SimRobot,
    setup: &LearningSetup,
    formulation: Formulation,
    initial: PseudoJacobian,
    seed: u64,
) -> Result<LearningSession, LearnError> {
    let label = setup
        .scene
        .get(setup.target_id)
        .map(|o| o.class_label.clone())
        .unwrap_or_default();
    let t0 = robot.clock.now();
    let pp = robot.intrinsics.principal_point;
    let mut s = locate(robot, &label, &ImageFeature::new(pp.0, pp.1), setup.missing_limit)?;
    let mut lhat = initial;
    let mut log = Vec::new();
    let mut skipped = 0;
    let mut converged = false;
    let mut k = 0usize;
    let mut odo = ChaCha8Rng::seed_from_u64(seed ^ 0x0d0_e7e5);
    let sigma = setup.noise.odometry_sigma_m;
    let mut read = |p: CameraPose| -> CameraPose {
        if sigma == 0.0 {
            return p;
        }
        let ex: f64 = odo.sample(StandardNormal);
        let ey: f64 = odo.sample(StandardNormal);
        CameraPose::new(p.x() + sigma * ex, p.y() + sigma * ey, p.z(), p.yaw())
    };
    let mut measured = read(robot.pose());
    while (log.len() as u32) < setup.max_updates {
        let m = setup.schedule[k % setup.schedule.len()];
        k += 1;
        let before = measured;
        robot.translate([m[0], m[1], 0.0], setup.speed_mps, setup.settle_s);
        robot.clock.tick();
        let s_next = locate(robot, &label, &s, setup.missing_limit)?;
        measured = read(robot.pose());
        let dx = pose_delta(&before, &measured);
        // s* is constant, so the change in error is the change in feature
        let de = [s_next.s[0] - s.s[0], s_next.s[1] - s.s[1]];
        s = s_next;
        let next = match formulation.update(&lhat, &dx, de) {
            Ok(n) => n,
            Err(e) if formulation.uses_product_denominator() => {
                return Err(LearnError::Degenerate {
                    update: log.len() as u32 + 1,
                    source: e,
                })
            }
            Err(e) => {
                log::debug!("skipping update after move {k}: {e}");
                skipped += 1;
                if skipped > setup.max_updates {
                    break;
                }
                continue;
            }
        };
        let delta = lhat.l1_distance(&next);
        let done = has_converged(&lhat, &next);
        lhat = next;
        let mut dxa = [0.0; 6];
        dxa.copy_from_slice(dx.as_slice());
        log.push(UpdateRecord {
            index: log.len() as u32 + 1,
            dx: dxa,
            de,
            lhat: lhat.lhat,
            l1_delta: delta,
        });
        if done {
            converged = true;
            break;
        }
    }
    let session = LearningSession {
        formulation,
        seed,
        motion_schedule: setup.schedule.clone(),
        updates_used: log.len() as u32,
        update_log: log,
        converged,
        skipped,
        wall_time: robot.clock.now() - t0,
        initial,
        lhat,
    };
    if converged {
        Ok(session)
    } else {
        Err(LearnError::NonConvergence(Box::new(session)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub updates: u32,
    pub converged: bool,
    pub degenerate: bool,
    pub wall_time: f64,
    /// Final `[dx/ds_x, dx/ds_y, dy/ds_x, dy/ds_y]`.
    pub entries: [f64; 4],
    pub session: Option<LearningSession>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulationSummary {
    pub formulation: Formulation,
    pub mean_updates: f64,
    pub min_updates: u32,
    pub max_updates: u32,
    pub converged: u32,
    /// Min/max of each planar entry over trials, in the entry's own units.
    pub entry_ranges: [[f64; 2]; 4],
    pub trials: Vec<TrialResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n_trials: usize,
    pub base_seed: u64,
    pub noise: NoiseConfig,
    pub rows: Vec<FormulationSummary>,
}

pub const COMPARISON_CSV_HEADER: &str = "formulation,mean_updates,min_updates,max_updates,converged,trials,\
dx_dsx_min_e4,dx_dsx_max_e4,dx_dsy_min_e4,dx_dsy_max_e4,dy_dsx_min_e4,dy_dsx_max_e4,dy_dsy_min_e4,dy_dsy_max_e4";

impl ComparisonReport {
    pub fn row(&self, f: Formulation) -> Option<&FormulationSummary> {
        self.rows.iter().find(|r| r.formulation == f)
    }

    /// One row per formulation, entries scaled by 1e4.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARISON_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.1},{},{},{},{}",
                r.formulation.label(),
                r.mean_updates,
                r.min_updates,
                r.max_updates,
                r.converged,
                r.trials.len()
            ));
            for [lo, hi] in r.entry_ranges {
                out.push_str(&format!(",{:.2},{:.2}", lo * 1e4, hi * 1e4));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison report serializes")
    }
}

fn entries(l: &PseudoJacobian) -> [f64; 4] {
    [l.get(0, 0), l.get(0, 1), l.get(1, 0), l.get(1, 1)]
}

fn run_trial(setup: &LearningSetup, f: Formulation, seed: u64) -> TrialResult {
    match learn_session(setup, f, seed) {
        Ok(s) => TrialResult {
            seed,
            updates: s.updates_used,
            converged: true,
            degenerate: false,
            wall_time: s.wall_time,
            entries: entries(&s.lhat),
            session: Some(s),
        },
        Err(LearnError::NonConvergence(s)) => TrialResult {
            seed,
            updates: s.updates_used,
            converged: false,
            degenerate: false,
            wall_time: s.wall_time,
            entries: entries(&s.lhat),
            session: Some(*s),
        },
        Err(LearnError::Degenerate { update, .. }) => TrialResult {
            seed,
            updates: update,
            converged: false,
            degenerate: true,
            wall_time: 0.0,
            entries: entries(&f.initial()),
            session: None,
        },
        Err(e) => {
            log::warn!("trial {seed} for {} aborted: {e}", f.label());
            TrialResult {
                seed,
                updates: setup.max_updates,
                converged: false,
                degenerate: false,
                wall_time: 0.0,
                entries: entries(&f.initial()),
                session: None,
            }
        }
    }
}

/// Run `n_trials` seeded sessions for each formulation.
pub fn compare_formulations(
    setup: &LearningSetup,
    n_trials: usize,
    seed: u64,
    exec: Execution,
) -> ComparisonReport {
    let n_trials = n_trials.max(1);
    let jobs: Vec<(Formulation, u64)> = Formulation::ALL
        .iter()
        .flat_map(|f| (0..n_trials).map(move |i| (*f, par::trial_seed(seed, i))))
        .collect();
    let results = par::map(exec, jobs, |(f, s)| (f, run_trial(setup, f, s)));
    let mut rows = Vec::new();
    for f in Formulation::ALL {
        let trials: Vec<TrialResult> = results
            .iter()
            .filter(|(g, _)| *g == f)
            .map(|(_, t)| t.clone())
            .collect();
        let n = trials.len() as f64;
        let mean = trials.iter().map(|t| t.updates as f64).sum::<f64>() / n;
        let mut ranges = [[f64::INFINITY, f64::NEG_INFINITY]; 4];
        for t in &trials {
            for (r, v) in ranges.iter_mut().zip(t.entries) {
                r[0] = r[0].min(v);
                r[1] = r[1].max(v);
            }
        }
        rows.push(FormulationSummary {
            formulation: f,
            mean_updates: mean,
            min_updates: trials.iter().map(|t| t.updates).min().unwrap_or(0),
            max_updates: trials.iter().map(|t| t.updates).max().unwrap_or(0),
            converged: trials.iter().filter(|t| t.converged).count() as u32,
            entry_ranges: ranges,
            trials,
        });
    }
    ComparisonReport {
        n_trials,
        base_seed: seed,
        noise: setup.noise,
        rows,
    }
}
