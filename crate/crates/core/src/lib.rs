//! Detection-only mobile manipulation in a deterministic simulator.
//!
//! The robot learns visual servo control from camera motion and detection
//! changes, estimates depth from box expansion, grasps along the narrowest
//! box extent found by a rotation scan, and collects few-shot annotations
//! only when one of its tasks fails.

pub mod bench;
pub mod depth;
pub mod detector;
pub mod grasp;
pub mod jacobian;
pub mod par;
pub mod robot;
pub mod servo;
pub mod tfod;
pub mod world;
