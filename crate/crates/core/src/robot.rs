//! Stepped robot harness: owns the world, the camera, the detector and the clock.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{detect, ContextBin, DetectionSet, DetectorModel, ObjectView, SceneView};
use crate::world::{
    apply_velocity, project_object, render_snapshot, ActuationNoise, CameraIntrinsics, CameraPose,
    ImageRecord, Scene, SceneObject, SimClock, Twist, WorldError,
};

const FRAME_HISTORY: usize = 64;

/// Metadata kept for recent frames so failure images can be rendered later.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image_id: u64,
    pub pose: CameraPose,
    pub view: SceneView,
    pub time: f64,
}

/// A rendered failure image plus the view conditions it was captured under.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CapturedImage {
    pub record: ImageRecord,
    pub view_bin: ContextBin,
    /// Bin of each in-frame object, keyed by object id.
    pub object_bins: Vec<(u32, ContextBin)>,
    pub vocabulary: Vec<String>,
    pub time: f64,
}

impl CapturedImage {
    /// Context bin for a box drawn at `(cx, cy)`: the bin of the ground-truth
    /// object whose box center is nearest, else the frame's bin.
    pub fn bin_near(&self, cx: f64, cy: f64) -> ContextBin {
        self.record
            .boxes
            .iter()
            .filter(|b| cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max)
            .min_by(|a, b| {
                let (ax, ay) = a.center();
                let (bx, by) = b.center();
                let da = (ax - cx).abs() + (ay - cy).abs();
                let db = (bx - cx).abs() + (by - cy).abs();
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
            })
            .and_then(|b| self.object_bins.iter().find(|(id, _)| *id == b.object_id))
            .map(|(_, bin)| *bin)
            .unwrap_or(self.view_bin)
    }
}

#[derive(Debug, Clone)]
pub struct SimRobot {
    pub scene: Scene,
    pub intrinsics: CameraIntrinsics,
    pub noise: ActuationNoise,
    pub clock: SimClock,
    pub model: DetectorModel,
    pub threshold: f64,
    pub held: Option<SceneObject>,
    cam: CameraPose,
    speed: f64,
    detect_rng: ChaCha8Rng,
    motion_rng: ChaCha8Rng,
    next_image_id: u64,
    frames: VecDeque<FrameRecord>,
}

impl SimRobot {
    pub fn new(
        scene: Scene,
        intrinsics: CameraIntrinsics,
        noise: ActuationNoise,
        model: DetectorModel,
        seed: u64,
    ) -> Self {
        Self {
            scene,
            intrinsics,
            noise,
            clock: SimClock::default(),
            model,
            threshold: 0.9,
            held: None,
            cam: CameraPose::new(0.0, 0.0, 1.0, 0.0),
            speed: 0.0,
            detect_rng: ChaCha8Rng::seed_from_u64(seed),
            motion_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            next_image_id: (seed & 0xffff) << 32,
            frames: VecDeque::with_capacity(FRAME_HISTORY),
        }
    }

    pub fn pose(&self) -> CameraPose {
        self.cam
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    /// Teleport without spending time (scenario setup only).
    pub fn set_pose(&mut self, pose: CameraPose) {
        self.cam = pose;
        self.speed = 0.0;
    }

    /// Drive to `pose` along a straight line at `speed` m/s, then settle.
    pub fn move_to(&mut self, pose: CameraPose, speed: f64, settle_s: f64) {
        let d = ((pose.x() - self.cam.x()).powi(2)
            + (pose.y() - self.cam.y()).powi(2)
            + (pose.z() - self.cam.z()).powi(2))
        .sqrt();
        if speed > 0.0 {
            self.clock.advance(d / speed);
        }
        self.clock.advance(settle_s);
        self.cam = pose;
        self.speed = 0.0;
    }

    /// Apply a world-frame twist for one frame period.
    pub fn step(&mut self, v: &Twist) {
        let dt = self.clock.step;
        let before = self.cam;
        self.cam = if self.noise.is_noiseless() {
            apply_velocity::<ChaCha8Rng>(&self.cam, v, dt, None)
        } else {
            apply_velocity(&self.cam, v, dt, Some((&self.noise, &mut self.motion_rng)))
        };
        let lin = ((self.cam.x() - before.x()).powi(2)
            + (self.cam.y() - before.y()).powi(2)
            + (self.cam.z() - before.z()).powi(2))
        .sqrt()
            / dt;
        let ang = v[5].abs();
        self.speed = self.model.params().context.camera_speed(lin, ang);
        self.clock.tick();
    }

    /// Commanded open-loop displacement at per-axis `speed` with actuation
    /// noise applied once over the whole move.
    pub fn translate(&mut self, delta: [f64; 3], speed: f64, settle_s: f64) {
        let dur = delta.iter().fold(0.0f64, |m, d| m.max(d.abs())) / speed;
        if dur <= 0.0 {
            self.clock.advance(settle_s);
            return;
        }
        let mut v = Twist::zeros();
        for i in 0..3 {
            v[i] = delta[i] / dur;
        }
        self.cam = if self.noise.is_noiseless() {
            apply_velocity::<ChaCha8Rng>(&self.cam, &v, dur, None)
        } else {
            apply_velocity(&self.cam, &v, dur, Some((&self.noise, &mut self.motion_rng)))
        };
        self.clock.advance(dur + settle_s);
        self.speed = 0.0;
    }

    pub fn set_yaw(&mut self, yaw: f64) {
        self.cam = CameraPose::new(self.cam.x(), self.cam.y(), self.cam.z(), yaw);
    }

    pub fn note_speed(&mut self, speed: f64) {
        self.speed = speed;
    }

    fn build_view(&mut self, task_classes: &[String]) -> Result<SceneView, WorldError> {
        let cfg = self.model.params().context;
        let mut objects = Vec::new();
        let mut any_clutter = false;
        for obj in &self.scene.objects {
            if obj.top_z() >= self.cam.z() - 1e-6 {
                continue;
            }
            let Some(gt) = project_object(obj, &self.cam, &self.intrinsics)? else {
                continue;
            };
            let clutter = self.scene.in_clutter(obj.id);
            any_clutter |= clutter;
            let bin = crate::detector::classify_context(obj, &self.cam, self.speed, clutter, &cfg);
            objects.push(ObjectView { gt, bin, clutter });
        }
        let image_id = self.next_image_id;
        self.next_image_id += 1;
        Ok(SceneView {
            image_id,
            image_size: self.intrinsics.image_size,
            objects,
            view_bin: cfg.bin(self.cam.z(), self.speed, any_clutter),
            vocabulary: self.scene.vocabulary(),
            task_classes: task_classes.to_vec(),
        })
    }

    /// Grab a frame and run the detector on it. Does not advance the clock.
    pub fn observe(&mut self, task_classes: &[String]) -> Result<DetectionSet, WorldError> {
        let view = self.build_view(task_classes)?;
        let d = detect(&view, &self.model, self.threshold, &mut self.detect_rng);
        if self.frames.len() == FRAME_HISTORY {
            self.frames.pop_front();
        }
        self.frames.push_back(FrameRecord {
            image_id: view.image_id,
            pose: self.cam,
            view,
            time: self.clock.now(),
        });
        Ok(d)
    }

    pub fn last_image_id(&self) -> Option<u64> {
        self.frames.back().map(|f| f.image_id)
    }

    pub fn frame(&self, image_id: u64) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.image_id == image_id)
    }

    /// Render a recent frame for the failure store.
    pub fn capture(&self, image_id: u64) -> Result<Option<CapturedImage>, WorldError> {
        let Some(f) = self.frame(image_id) else {
            return Ok(None);
        };
        let record = render_snapshot(&self.scene, &f.pose, &self.intrinsics, image_id)?;
        Ok(Some(CapturedImage {
            record,
            view_bin: f.view.view_bin,
            object_bins: f.view.objects.iter().map(|o| (o.gt.object_id, o.bin)).collect(),
            vocabulary: f.view.vocabulary.clone(),
            time: f.time,
        }))
    }

    pub fn grasp_object(&mut self, id: u32) -> Option<&SceneObject> {
        let obj = self.scene.remove(id)?;
        self.held = Some(obj);
        self.held.as_ref()
    }

    /// Put the held object down at a ground position on `support` height.
    pub fn release_at(&mut self, position: [f64; 2], support_height: f64) -> Option<SceneObject> {
        let mut obj = self.held.take()?;
        obj.position = position;
        obj.support_height = support_height;
        Some(obj)
    }
}
