//! Flat-shaded top-down rasterizer producing snapshot images.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::camera::{CameraIntrinsics, CameraPose};
use super::projection::{outline_points, project_object, project_point, GroundTruthBox};
use super::scene::Scene;
use super::WorldError;

const GROUND: [u8; 3] = [118, 112, 104];

/// A rendered frame with the ground truth needed for oracle annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub camera: CameraPose,
    pub boxes: Vec<GroundTruthBox>,
    /// Row-major RGB8 pixels.
    #[serde(skip)]
    pub rgb: Vec<u8>,
}

impl ImageRecord {
    pub fn encode_png(&self) -> Result<Vec<u8>, WorldError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| WorldError::Io(e.to_string()))?;
            w.write_image_data(&self.rgb)
                .map_err(|e| WorldError::Io(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &std::path::Path) -> Result<(), WorldError> {
        let bytes = self.encode_png()?;
        let mut f = std::fs::File::create(path)
            .map_err(|e| WorldError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes)
            .map_err(|e| WorldError::Io(format!("{}: {e}", path.display())))
    }
}

/// Stable per-label color (FNV-1a).
pub fn class_color(label: &str) -> [u8; 3] {
    let mut h: u32 = 0x811c_9dc5;
    for b in label.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    [
        64 + (h & 0x7f) as u8 + 32,
        64 + ((h >> 8) & 0x7f) as u8 + 32,
        64 + ((h >> 16) & 0x7f) as u8 + 32,
    ]
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn fill_convex(rgb: &mut [u8], width: u32, height: u32, poly: &[(f64, f64)], color: [u8; 3]) {
    if poly.len() < 3 {
        return;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in poly {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let xs = x0.floor().max(0.0) as u32;
    let ys = y0.floor().max(0.0) as u32;
    let xe = (x1.ceil().max(0.0) as u32).min(width);
    let ye = (y1.ceil().max(0.0) as u32).min(height);
    let n = poly.len();
    for py in ys..ye {
        for px in xs..xe {
            let (qx, qy) = (px as f64 + 0.5, py as f64 + 0.5);
            let side = |i: usize| {
                let a = poly[i];
                let b = poly[(i + 1) % n];
                (b.0 - a.0) * (qy - a.1) - (b.1 - a.1) * (qx - a.0)
            };
            let inside = (0..n).all(|i| side(i) >= 0.0) || (0..n).all(|i| side(i) <= 0.0);
            if inside {
                let idx = ((py * width + px) * 3) as usize;
                rgb[idx..idx + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Rasterize the scene from `cam`. Objects are painted far-to-near; each gets
/// a darkened silhouette for its sides and a class-colored top face.
pub fn render_snapshot(
    scene: &Scene,
    cam: &CameraPose,
    k: &CameraIntrinsics,
    image_id: u64,
) -> Result<ImageRecord, WorldError> {
    let (width, height) = k.image_size;
    let mut rgb = Vec::with_capacity((width * height * 3) as usize);
    for _ in 0..width * height {
        rgb.extend_from_slice(&GROUND);
    }
    let mut order: Vec<_> = scene.objects.iter().collect();
    order.sort_by(|a, b| {
        a.top_z()
            .partial_cmp(&b.top_z())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    let mut boxes = Vec::new();
    for obj in order {
        // The camera looks straight down; anything at or above it is out of view.
        if obj.top_z() >= cam.z() - 1e-6 {
            continue;
        }
        let Some(b) = project_object(obj, cam, k)? else {
            continue;
        };
        let pts = outline_points(obj);
        let mut all = Vec::with_capacity(pts.len());
        let mut top = Vec::with_capacity(pts.len() / 2);
        for (i, p) in pts.iter().enumerate() {
            let (u, v, _) = project_point(*p, cam, k)?;
            all.push((u, v));
            if i % 2 == 0 {
                top.push((u, v));
            }
        }
        let color = class_color(&obj.class_label);
        let side = [color[0] / 2, color[1] / 2, color[2] / 2];
        fill_convex(&mut rgb, width, height, &convex_hull(all), side);
        let top_hull = convex_hull(top);
        fill_convex(&mut rgb, width, height, &top_hull, color);
        boxes.push(b);
    }
    boxes.sort_by_key(|b| b.object_id);
    Ok(ImageRecord {
        image_id,
        width,
        height,
        camera: *cam,
        boxes,
        rgb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{SceneObject, Shape};

    fn one_box() -> Scene {
        Scene::new(vec![SceneObject {
            id: 1,
            class_label: "potted_meat".into(),
            shape: Shape::Box { w: 0.1, d: 0.05, h: 0.08 },
            position: [0.05, 0.0],
            yaw: 0.3,
            support_height: 0.0,
            graspable: true,
            clutter_group: None,
        }])
        .unwrap()
    }

    #[test]
    fn empty_scene_is_blank() {
        let k = CameraIntrinsics::default();
        let img = render_snapshot(&Scene::default(), &CameraPose::new(0.0, 0.0, 0.8, 0.0), &k, 1).unwrap();
        assert!(img.boxes.is_empty());
        assert!(img.rgb.chunks(3).all(|p| p == GROUND));
    }

    #[test]
    fn one_object_box_matches_projection() {
        let k = CameraIntrinsics::default();
        let cam = CameraPose::new(0.0, 0.0, 0.6, 0.0);
        let s = one_box();
        let img = render_snapshot(&s, &cam, &k, 2).unwrap();
        assert_eq!(img.boxes.len(), 1);
        assert_eq!(img.boxes[0], project_object(&s.objects[0], &cam, &k).unwrap().unwrap());
        let (u, v) = img.boxes[0].center();
        let idx = ((v as u32 * 640 + u as u32) * 3) as usize;
        assert_eq!(&img.rgb[idx..idx + 3], &class_color("potted_meat"));
    }

    #[test]
    fn rendering_is_bit_identical() {
        let k = CameraIntrinsics::default();
        let cam = CameraPose::new(0.01, 0.02, 0.7, 0.4);
        let a = render_snapshot(&one_box(), &cam, &k, 3).unwrap();
        let b = render_snapshot(&one_box(), &cam, &k, 3).unwrap();
        assert_eq!(a.encode_png().unwrap(), b.encode_png().unwrap());
    }
}
