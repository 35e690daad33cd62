//! Ground-truth world: scene, pinhole camera, kinematics, clock and renderer.

mod camera;
mod clock;
mod projection;
mod render;
mod scene;

pub use camera::{
    apply_velocity, pose_delta, wrap_angle, ActuationNoise, CameraIntrinsics, CameraPose, Twist,
};
pub use clock::{SimClock, FRAME_PERIOD_S};
pub use projection::{
    back_project, outline_points, project_object, project_point, GroundTruthBox,
    CYLINDER_RIM_SAMPLES,
};
pub use render::{class_color, render_snapshot, ImageRecord};
pub use scene::{Scene, SceneFile, SceneObject, Shape};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum WorldError {
    #[error("degenerate projection: point depth {0} m is not in front of the camera")]
    DegenerateProjection(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("i/o: {0}")]
    Io(String),
}
