use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catalog::{self, CatalogItem, CUP_COLORS, FOOD, TOOLS};
use super::report::{ArmReport, LearningReport, RunReport};
use super::scenario::{Ablation, Protocol, ScenarioConfig, ScenarioError};
use crate::depth::DepthConfig;
use crate::grasp::{Gripper, ScanConfig};
use crate::jacobian::{
    compare_formulations, learn_session, learn_with_robot, Formulation, LearningSetup, NoiseConfig,
    PseudoJacobian,
};
use crate::par::{self, Execution};
use crate::robot::SimRobot;
use crate::servo::ServoConfig;
use crate::tfod::{
    apply_update, run_find, run_trial_with_store, DepthSource, FailureStore, FewShotSet, FindOutcome,
    Motion, OracleAnnotator, Target, TaskId, TfodError, TrialReport, TrialSetup, Annotator,
};
use crate::world::{CameraIntrinsics, CameraPose, Scene, SceneFile};

/// Pedestal heights of the three objects in each benchmark trial.
pub const SUPPORT_HEIGHTS: [f64; 3] = [0.25, 0.125, 0.0];
pub const FIND_HEIGHT_M: f64 = 0.9;
pub const PLACE_FIND_HEIGHT_M: f64 = 0.75;
pub const MAP_SIGMA_M: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Tfod(#[from] TfodError),
    #[error("learning session failed: {0}")]
    Learning(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Options that do not change report content.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write failure images under this directory.
    pub failure_dir: Option<PathBuf>,
}

fn ring_poses(center: [f64; 2], z: f64, dx: f64, dy: f64) -> Vec<CameraPose> {
    vec![
        CameraPose::new(center[0], center[1], z, 0.0),
        CameraPose::new(center[0] - dx, center[1], z, 0.0),
        CameraPose::new(center[0] + dx, center[1], z, 0.0),
        CameraPose::new(center[0], center[1] + dy, z, 0.0),
        CameraPose::new(center[0], center[1] - dy, z, 0.0),
    ]
}

fn resolve_items(names: &[String], default: Vec<CatalogItem>) -> Vec<CatalogItem> {
    if names.is_empty() {
        return default;
    }
    names.iter().filter_map(|n| catalog::lookup(n)).collect()
}

/// The Servo Jacobian every task trial uses: a noiseless masked session.
pub fn learned_jacobian(seed: u64) -> Result<PseudoJacobian, ProtocolError> {
    let setup = LearningSetup::racquetball(NoiseConfig::none());
    learn_session(&setup, Formulation::Masked, seed)
        .map(|s| s.lhat)
        .map_err(|e| ProtocolError::Learning(e.to_string()))
}

fn base_setup(cfg: &ScenarioConfig, scene: Scene, lhat: PseudoJacobian) -> TrialSetup {
    let t = &cfg.thresholds;
    let servo = ServoConfig {
        pre_depth_px: t.servo_pre_depth_px,
        pre_grasp_px: t.servo_pre_grasp_px,
        ..ServoConfig::default()
    };
    let depth = DepthConfig {
        stop_depth_m: t.depth_stop_m,
        ..DepthConfig::default()
    };
    TrialSetup {
        scene,
        intrinsics: CameraIntrinsics::default(),
        noise: cfg.noise,
        detector: cfg.detector.clone(),
        prior: None,
        lhat,
        start: CameraPose::new(0.0, 0.0, FIND_HEIGHT_M, 0.0),
        find_poses: Vec::new(),
        place_poses: Vec::new(),
        targets: Vec::new(),
        grasp: true,
        depth_source: DepthSource::Estimate,
        servo,
        depth,
        scan: ScanConfig::default(),
        gripper: Gripper::default(),
        motion: Motion::default(),
        threshold: t.confidence,
        annotate: true,
        sentry: cfg.sentry,
        sentry_sweeps: 1,
        example_cap: cfg.example_cap,
        oracle_jitter_px: cfg.oracle_jitter_px,
        depth_restarts: 2,
        bin_moves: Vec::new(),
    }
}

fn fixed_scene(cfg: &ScenarioConfig) -> Result<Option<(Scene, Vec<Target>)>, ProtocolError> {
    let Some(path) = &cfg.scene else {
        return Ok(None);
    };
    let file = SceneFile::load(path).map_err(ScenarioError::from)?;
    let scene = file.scene().map_err(ScenarioError::from)?;
    let targets = scene
        .objects
        .iter()
        .filter(|o| cfg.objects.is_empty() || cfg.objects.contains(&o.class_label))
        .filter(|o| !o.class_label.starts_with("bin_"))
        .map(|o| Target {
            object_id: o.id,
            place_class: None,
        })
        .collect();
    Ok(Some((scene, targets)))
}

fn finish(setup: &mut TrialSetup, scene: Scene, targets: Vec<Target>) {
    let (mut cx, mut cy) = (0.0, 0.0);
    let n = scene.objects.len().max(1) as f64;
    for o in &scene.objects {
        cx += o.position[0] / n;
        cy += o.position[1] / n;
    }
    setup.find_poses = ring_poses([cx, cy], FIND_HEIGHT_M, 0.15, 0.12);
    setup.start = setup.find_poses[0];
    setup.scene = scene;
    setup.targets = targets;
}

/// Three objects at the three pedestal heights.
pub fn vosvs_setup(cfg: &ScenarioConfig, trial: usize, lhat: PseudoJacobian) -> Result<TrialSetup, ProtocolError> {
    let mut setup = base_setup(cfg, Scene::default(), lhat);
    setup.grasp = false;
    if let Some((scene, targets)) = fixed_scene(cfg)? {
        finish(&mut setup, scene, targets);
        return Ok(setup);
    }
    let items = resolve_items(&cfg.objects, FOOD.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(par::trial_seed(cfg.seed, trial) ^ 0x1a_7000);
    let slots = [[-0.18, 0.0], [0.0, 0.1], [0.18, -0.05]];
    let mut objs = Vec::new();
    for (j, slot) in slots.iter().enumerate() {
        let item = items[(3 * trial + j) % items.len()];
        let support = SUPPORT_HEIGHTS[(j + trial) % 3];
        let jitter = [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)];
        let yaw = rng.random_range(-1.5..1.5);
        objs.push(item.place(j as u32 + 1, [slot[0] + jitter[0], slot[1] + jitter[1]], yaw, support));
    }
    let targets = objs.iter().map(|o| Target { object_id: o.id, place_class: None }).collect();
    let scene = Scene::new(objs).map_err(ScenarioError::from)?;
    finish(&mut setup, scene, targets);
    Ok(setup)
}

/// Two food and two tool items on the floor, packed together in clutter.
pub fn pick_place_setup(
    cfg: &ScenarioConfig,
    trial: usize,
    clutter: bool,
    lhat: PseudoJacobian,
) -> Result<TrialSetup, ProtocolError> {
    let mut setup = base_setup(cfg, Scene::default(), lhat);
    if let Some((scene, targets)) = fixed_scene(cfg)? {
        finish(&mut setup, scene, targets);
        return Ok(setup);
    }
    let default: Vec<CatalogItem> = (0..4)
        .map(|j| {
            if j % 2 == 0 {
                FOOD[(trial * 2 + j / 2) % FOOD.len()]
            } else {
                TOOLS[(trial * 2 + j / 2) % TOOLS.len()]
            }
        })
        .collect();
    let items = if cfg.objects.is_empty() {
        default
    } else {
        let all = resolve_items(&cfg.objects, Vec::new());
        (0..4).map(|j| all[(trial * 4 + j) % all.len()]).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(par::trial_seed(cfg.seed, trial) ^ 0x9_9100);
    let spread = if clutter { 0.1 } else { 0.2 };
    let slots = [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]];
    let mut objs = Vec::new();
    for (j, item) in items.iter().enumerate() {
        let p = [
            slots[j][0] * spread + rng.random_range(-0.01..0.01),
            slots[j][1] * spread * 0.8 + rng.random_range(-0.01..0.01),
        ];
        let mut o = item.place(j as u32 + 1, p, rng.random_range(-1.5..1.5), 0.0);
        if clutter {
            o.clutter_group = Some(1);
        }
        objs.push(o);
    }
    let targets = objs.iter().map(|o| Target { object_id: o.id, place_class: None }).collect();
    let scene = Scene::new(objs).map_err(ScenarioError::from)?;
    finish(&mut setup, scene, targets);
    Ok(setup)
}

const BIN_SLOTS: [[f64; 2]; 3] = [[1.0, -0.3], [1.0, 0.0], [1.0, 0.3]];
const CUP_SPACING_M: f64 = 0.4;

/// Nine cups, three per color, and three matching bins that are shuffled
/// after every placement.
pub fn dynamic_setup(cfg: &ScenarioConfig, trial: usize, lhat: PseudoJacobian) -> Result<TrialSetup, ProtocolError> {
    let mut setup = base_setup(cfg, Scene::default(), lhat);
    setup.depth_source = DepthSource::MapOracle { sigma_m: MAP_SIGMA_M };
    let mut rng = ChaCha8Rng::seed_from_u64(par::trial_seed(cfg.seed, trial) ^ 0xd1_0a00);
    let colors: Vec<&str> = if cfg.objects.is_empty() {
        CUP_COLORS.iter().flat_map(|c| [*c; 3]).collect()
    } else {
        cfg.objects
            .iter()
            .map(|o| o.trim_start_matches("cup_"))
            .map(|c| CUP_COLORS.iter().copied().find(|k| *k == c).unwrap_or("blue"))
            .collect()
    };
    // Latin-square grid: cups of one color never share a row or column, so
    // at Find height a same-color neighbor is outside the servo image.
    let mut cells: Vec<(usize, usize)> = Vec::new();
    let mut used = [false; 9];
    for color in &colors {
        let c = CUP_COLORS.iter().position(|k| k == color).unwrap_or(0);
        let cell = (0..9)
            .find(|&j| !used[j] && (j % 3 + j / 3) % 3 == c)
            .or_else(|| (0..9).find(|&j| !used[j]))
            .unwrap_or(0);
        used[cell] = true;
        cells.push((cell % 3, cell / 3));
    }
    let mut objs = Vec::new();
    let mut targets = Vec::new();
    for (i, color) in colors.iter().enumerate() {
        let (gx, gy) = (cells[i].0 as f64 - 1.0, cells[i].1 as f64 - 1.0);
        let p = [
            gx * CUP_SPACING_M + rng.random_range(-0.02..0.02),
            gy * CUP_SPACING_M + rng.random_range(-0.02..0.02),
        ];
        let id = i as u32 + 1;
        objs.push(catalog::cup(color).place(id, p, 0.0, 0.0));
        targets.push(Target {
            object_id: id,
            place_class: Some(catalog::bin(color).name.to_string()),
        });
    }
    let bin_ids: Vec<u32> = (0..3).map(|k| 100 + k as u32).collect();
    for (k, color) in CUP_COLORS.iter().enumerate() {
        objs.push(catalog::bin(color).place(bin_ids[k], BIN_SLOTS[k], 0.0, 0.0));
    }
    // rotate bins one slot per placement
    setup.bin_moves = (1..=colors.len())
        .map(|step| {
            bin_ids
                .iter()
                .enumerate()
                .map(|(k, id)| (*id, BIN_SLOTS[(k + step) % 3]))
                .collect()
        })
        .collect();
    let scene = Scene::new(objs).map_err(ScenarioError::from)?;
    setup.scene = scene;
    setup.targets = targets;
    setup.find_poses = ring_poses([0.0, 0.0], PLACE_FIND_HEIGHT_M, 0.3, 0.25);
    setup.place_poses = vec![
        CameraPose::new(1.0, 0.0, PLACE_FIND_HEIGHT_M, 0.0),
        CameraPose::new(1.0, -0.25, PLACE_FIND_HEIGHT_M, 0.0),
        CameraPose::new(1.0, 0.25, PLACE_FIND_HEIGHT_M, 0.0),
    ];
    setup.start = setup.find_poses[0];
    Ok(setup)
}

fn oracle(cfg: &ScenarioConfig, seed: u64) -> OracleAnnotator<ChaCha8Rng> {
    OracleAnnotator {
        jitter_px: cfg.oracle_jitter_px,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0xa770_0000),
    }
}

fn store_for(opts: &RunOptions, arm: &str, trial: usize) -> Result<FailureStore, ProtocolError> {
    match &opts.failure_dir {
        None => Ok(FailureStore::in_memory()),
        Some(d) => FailureStore::on_disk(&d.join(arm).join(format!("trial_{trial}")))
            .map_err(|e| ProtocolError::Io(e.to_string())),
    }
}

/// Run every setup with its own seed and oracle. Order of results follows
/// the setups whichever way they are executed. Returns the reports and the
/// examples collected by each trial.
pub fn run_batch(
    cfg: &ScenarioConfig,
    arm: &str,
    setups: Vec<TrialSetup>,
    exec: Execution,
    opts: &RunOptions,
) -> Result<Vec<(TrialReport, FewShotSet)>, ProtocolError> {
    let jobs: Vec<(usize, TrialSetup)> = setups.into_iter().enumerate().collect();
    let out = par::map(exec, jobs, |(i, setup)| -> Result<(TrialReport, FewShotSet), ProtocolError> {
        let seed = par::trial_seed(cfg.seed, i);
        let mut store = store_for(opts, arm, i)?;
        let mut a = oracle(cfg, seed);
        Ok(run_trial_with_store(&setup, &mut a, &mut store, seed)?)
    });
    out.into_iter().collect()
}

/// Run trials with a caller-supplied annotator, one after another.
pub fn run_sequential_with<A: Annotator>(
    cfg: &ScenarioConfig,
    setups: Vec<TrialSetup>,
    annotator: &mut A,
    opts: &RunOptions,
    arm: &str,
) -> Result<Vec<(TrialReport, FewShotSet)>, ProtocolError> {
    let mut out = Vec::new();
    for (i, setup) in setups.into_iter().enumerate() {
        let mut store = store_for(opts, arm, i)?;
        out.push(run_trial_with_store(&setup, annotator, &mut store, par::trial_seed(cfg.seed, i))?);
    }
    Ok(out)
}

/// Prior set followed by every trial's new examples, in trial order.
pub fn inherit(prior: Option<&FewShotSet>, results: &[(TrialReport, FewShotSet)]) -> FewShotSet {
    let mut set = prior.map(FewShotSet::with_prior).unwrap_or_default();
    for (_, s) in results {
        for (_, ex) in s.new_examples() {
            set.push_unchecked(ex.clone());
        }
    }
    set
}

pub fn build_setups(cfg: &ScenarioConfig, lhat: PseudoJacobian) -> Result<Vec<TrialSetup>, ProtocolError> {
    (0..cfg.trials())
        .map(|i| match cfg.protocol {
            Protocol::VosvsBench => vosvs_setup(cfg, i, lhat),
            Protocol::PickPlace => pick_place_setup(cfg, i, false, lhat),
            Protocol::PickPlaceClutter => pick_place_setup(cfg, i, true, lhat),
            Protocol::DynamicPlace => dynamic_setup(cfg, i, lhat),
            Protocol::VsLearning => Err(ProtocolError::Scenario(ScenarioError::Invalid(
                "vs_learning has no task trials".into(),
            ))),
        })
        .collect()
}

pub fn run_vosvs_protocol(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, ProtocolError> {
    let lhat = learned_jacobian(cfg.seed)?;
    let setups = build_setups(cfg, lhat)?;
    let results = run_batch(cfg, "vosvs_bench", setups, cfg.execution, opts)?;
    Ok(RunReport::new(cfg, vec![ArmReport::from_trials("vosvs_bench", results, false)]))
}

pub fn run_dynamic_place(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, ProtocolError> {
    let lhat = learned_jacobian(cfg.seed)?;
    let setups = build_setups(cfg, lhat)?;
    let results = run_batch(cfg, "dynamic_place", setups, cfg.execution, opts)?;
    Ok(RunReport::new(cfg, vec![ArmReport::from_trials("dynamic_place", results, true)]))
}

fn load_prior(path: &Path) -> Result<FewShotSet, ProtocolError> {
    let text = std::fs::read_to_string(path).map_err(|_| ScenarioError::MissingFile(path.to_path_buf()))?;
    FewShotSet::from_json(&text).map_err(|e| {
        ProtocolError::Scenario(ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    })
}

/// Non-clutter TFOD run whose final set seeds the prior arms.
pub fn build_prior(cfg: &ScenarioConfig, lhat: PseudoJacobian, opts: &RunOptions) -> Result<FewShotSet, ProtocolError> {
    let mut pcfg = cfg.clone();
    pcfg.protocol = Protocol::PickPlace;
    pcfg.ablation = None;
    let setups: Vec<TrialSetup> = (0..pcfg.trials())
        .map(|i| pick_place_setup(&pcfg, i, false, lhat))
        .collect::<Result<_, _>>()?;
    let results = run_batch(&pcfg, "prior", setups, cfg.execution, opts)?;
    Ok(inherit(None, &results))
}

/// Pick-and-place with the ablation arms. Prior arms preload the configured
/// set, or the set built by a non-clutter TFOD run when none is configured.
pub fn run_pick_place(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, ProtocolError> {
    let clutter = cfg.protocol == Protocol::PickPlaceClutter;
    let lhat = learned_jacobian(cfg.seed)?;
    let arms: Vec<Ablation> = match cfg.ablation {
        Some(a) => vec![a],
        None => Ablation::ALL.to_vec(),
    };
    let prior = if arms.iter().any(|a| a.prior()) {
        Some(match &cfg.prior_set {
            Some(p) => load_prior(p)?,
            None => build_prior(cfg, lhat, opts)?,
        })
    } else {
        None
    };
    let mut out = Vec::new();
    for arm in arms {
        let mut setups = Vec::new();
        for i in 0..cfg.trials() {
            let mut s = pick_place_setup(cfg, i, clutter, lhat)?;
            if arm.prior() {
                s.prior = prior.clone();
            }
            if !arm.tfod() {
                s.annotate = false;
                s.threshold = cfg.thresholds.no_tfod_confidence;
            }
            setups.push(s);
        }
        let results = run_batch(cfg, arm.as_str(), setups, cfg.execution, opts)?;
        out.push(ArmReport::from_trials(arm.as_str(), results, true));
    }
    Ok(RunReport::new(cfg, out))
}

/// The learning session with its one-click Find, plus the formulation
/// comparison over `cfg.trials()` noisy trials.
pub fn run_vs_learning(cfg: &ScenarioConfig) -> Result<RunReport, ProtocolError> {
    run_vs_learning_with(cfg, &mut oracle(cfg, cfg.seed))
}

/// As [`run_vs_learning`] with the Find annotations from `annot`.
pub fn run_vs_learning_with<A: Annotator>(cfg: &ScenarioConfig, annot: &mut A) -> Result<RunReport, ProtocolError> {
    let noise = cfg.learning_noise.unwrap_or_default();
    let setup = LearningSetup::racquetball(noise);
    let mut params = cfg.detector.clone();
    params.covered.jitter_px = noise.detection_jitter_px;
    let model = crate::detector::DetectorModel::new(params);
    let mut robot = SimRobot::new(setup.scene.clone(), setup.intrinsics, noise.actuation, model, cfg.seed);
    robot.set_pose(setup.start);
    let classes: Vec<String> = setup.scene.objects.iter().map(|o| o.class_label.clone()).collect();
    let mut set = FewShotSet::default();
    let mut store = FailureStore::in_memory();
    let motion = Motion::default();
    let mut event = 0;
    loop {
        event += 1;
        let t0 = robot.clock.now();
        match run_find(&mut robot, &[setup.start], &classes, false, TaskId::Find, event, &motion).map_err(TfodError::from)? {
            FindOutcome::Found { .. } => break,
            FindOutcome::Failure(ev) => {
                set.ledger.robot_s += robot.clock.now() - t0;
                let entry = store.log_failure(ev, &robot).map_err(TfodError::from)?;
                let ex = annot.annotate(&entry, &store).map_err(TfodError::from)?;
                apply_update(&mut set, event, ex, &mut robot.model)?;
                store.resolve(event);
            }
            FindOutcome::NotFound { .. } => unreachable!("sentry is off"),
        }
        if set.ledger.examples >= cfg.example_cap {
            return Err(ProtocolError::Learning("target never detected".into()));
        }
    }
    robot.set_pose(setup.start);
    let session = learn_with_robot(&mut robot, &setup, Formulation::Masked, Formulation::Masked.initial(), cfg.seed)
        .map_err(|e| ProtocolError::Learning(e.to_string()))?;
    let comparison = compare_formulations(&setup, cfg.trials(), cfg.seed, cfg.execution);
    let mut report = RunReport::new(cfg, Vec::new());
    report.learning = Some(LearningReport {
        analytic: setup.analytic_diagonal(),
        session,
        ledger: set.ledger,
    });
    report.comparison = Some(comparison);
    Ok(report)
}

pub fn run_protocol(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, ProtocolError> {
    match cfg.protocol {
        Protocol::VsLearning => run_vs_learning(cfg),
        Protocol::VosvsBench => run_vosvs_protocol(cfg, opts),
        Protocol::PickPlace | Protocol::PickPlaceClutter => run_pick_place(cfg, opts),
        Protocol::DynamicPlace => run_dynamic_place(cfg, opts),
    }
}

/// Run one arm of `cfg` sequentially with a caller-supplied annotator.
/// Pick-and-place runs the configured ablation, or the TFOD arm without
/// prior; a prior arm needs `prior_set`.
pub fn run_protocol_with<A: Annotator>(
    cfg: &ScenarioConfig,
    annotator: &mut A,
    opts: &RunOptions,
) -> Result<RunReport, ProtocolError> {
    if cfg.protocol == Protocol::VsLearning {
        return run_vs_learning_with(cfg, annotator);
    }
    let lhat = learned_jacobian(cfg.seed)?;
    let mut setups = build_setups(cfg, lhat)?;
    let (arm, grasp) = match cfg.protocol {
        Protocol::PickPlace | Protocol::PickPlaceClutter => {
            let arm = cfg.ablation.unwrap_or(Ablation::TfodOnPriorOff);
            let prior = match (&cfg.prior_set, arm.prior()) {
                (Some(p), true) => Some(load_prior(p)?),
                (None, true) => {
                    return Err(ScenarioError::Invalid(format!("{} needs prior_set", arm.as_str())).into())
                }
                _ => None,
            };
            for s in &mut setups {
                s.prior = prior.clone();
                if !arm.tfod() {
                    s.annotate = false;
                    s.threshold = cfg.thresholds.no_tfod_confidence;
                }
            }
            (arm.as_str(), true)
        }
        Protocol::VosvsBench => ("vosvs_bench", false),
        _ => ("dynamic_place", true),
    };
    let results = run_sequential_with(cfg, setups, annotator, opts, arm)?;
    Ok(RunReport::new(cfg, vec![ArmReport::from_trials(arm, results, grasp)]))
}
