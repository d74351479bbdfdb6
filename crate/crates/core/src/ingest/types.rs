//! Detection, calibration, and dataset domain types.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Axis-aligned 2D box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2d {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Box2d {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        if !(left < right && top < bottom) {
            return Err(Error::Data(format!(
                "degenerate box: left {left}, top {top}, right {right}, bottom {bottom}"
            )));
        }
        Ok(Box2d {
            left,
            top,
            right,
            bottom,
        })
    }

    pub fn area(&self) -> f64 {
        (self.right - self.left) * (self.bottom - self.top)
    }

    pub fn intersection_area(&self, other: &Box2d) -> f64 {
        let w = self.right.min(other.right) - self.left.max(other.left);
        let h = self.bottom.min(other.bottom) - self.top.max(other.top);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn iou(&self, other: &Box2d) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Inclusive point containment.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.left && u <= self.right && v >= self.top && v <= self.bottom
    }
}

/// 3D box in camera coordinates: dimensions (h, w, l) in meters, center of
/// the bottom face at (x, y, z), yaw about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3d {
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rotation_y: f64,
}

impl Box3d {
    /// Whether a camera-frame point lies inside the rotated box.
    pub fn contains(&self, px: f64, py: f64, pz: f64) -> bool {
        let dx = px - self.x;
        let dz = pz - self.z;
        // Undo the yaw to test in the box's own frame.
        let (s, c) = self.rotation_y.sin_cos();
        let lx = c * dx - s * dz;
        let lz = s * dx + c * dz;
        let dy = py - self.y;
        lx.abs() <= self.l / 2.0 && lz.abs() <= self.w / 2.0 && dy <= 0.0 && dy >= -self.h
    }
}

/// One detected object in one frame.
#[derive(Debug, Clone)]
pub struct Detection {
    pub frame: usize,
    pub box2d: Box2d,
    pub box3d: Option<Box3d>,
    pub score: f64,
    pub class_label: String,
}

/// Camera projection plus LiDAR-to-camera extrinsics.
#[derive(Debug, Clone)]
pub struct Calibration {
    /// 3x4 camera projection matrix (row-major).
    pub p: [[f64; 4]; 3],
    /// 4x4 homogeneous rectification.
    pub r_rect: [[f64; 4]; 4],
    /// 4x4 homogeneous LiDAR-to-camera transform.
    pub t_velo_cam: [[f64; 4]; 4],
}

impl Calibration {
    /// Identity camera with unit focal length; handy for fixtures.
    pub fn identity() -> Self {
        let mut p = [[0.0; 4]; 3];
        let mut eye4 = [[0.0; 4]; 4];
        for i in 0..3 {
            p[i][i] = 1.0;
        }
        for (i, row) in eye4.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Calibration {
            p,
            r_rect: eye4,
            t_velo_cam: eye4,
        }
    }

    /// Transform a LiDAR point into the rectified camera frame.
    pub fn velo_to_rect(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let hom = [x, y, z, 1.0];
        let mut cam = [0.0; 4];
        for (i, row) in self.t_velo_cam.iter().enumerate() {
            cam[i] = row.iter().zip(&hom).map(|(a, b)| a * b).sum();
        }
        let mut rect = [0.0; 4];
        for (i, row) in self.r_rect.iter().enumerate() {
            rect[i] = row.iter().zip(&cam).map(|(a, b)| a * b).sum();
        }
        [rect[0], rect[1], rect[2]]
    }

    /// Project a LiDAR point to the image plane; returns `(u, v, depth)` or
    /// `None` when the point is at or behind the camera.
    pub fn project(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64, f64)> {
        let rect = self.velo_to_rect(x, y, z);
        let hom = [rect[0], rect[1], rect[2], 1.0];
        let mut img = [0.0; 3];
        for (i, row) in self.p.iter().enumerate() {
            img[i] = row.iter().zip(&hom).map(|(a, b)| a * b).sum();
        }
        if img[2] <= 0.0 {
            return None;
        }
        Some((img[0] / img[2], img[1] / img[2], img[2]))
    }
}

/// Raw LiDAR scan: row-major `[L, C]` with C = 3 (x, y, z) or 4 (plus
/// reflectance), sensor frame.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Tensor,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        let shape = points.shape();
        if shape.len() != 2 || !(shape[1] == 3 || shape[1] == 4) {
            return Err(Error::dim("PointCloud::new", shape, &[0, 4]));
        }
        if !points.is_finite() {
            return Err(Error::Data("non-finite point coordinates".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn from_xyz(points: &[[f64; 3]]) -> Self {
        let data: Vec<f64> = points.iter().flatten().copied().collect();
        PointCloud {
            points: Tensor::new(vec![points.len(), 3], data).expect("shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let c = self.points.shape()[1];
        let d = self.points.data();
        [d[i * c], d[i * c + 1], d[i * c + 2]]
    }

    pub fn reflectance(&self, i: usize) -> Option<f64> {
        let c = self.points.shape()[1];
        (c == 4).then(|| self.points.data()[i * c + 3])
    }
}

/// Small RGB patch payload for the image modality; values in `[0, 1]`,
/// row-major pixels with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl ImagePatch {
    pub fn solid(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        ImagePatch { width, height, rgb }
    }
}

/// Per-detection point set for the cloud modality (already cropped to the
/// detection, camera or sensor frame as produced by the selector).
pub type PointSet = Vec<[f64; 3]>;

/// One frame: detections plus optional ground truth and per-detection
/// modality payloads. A payload slot of `None` at the frame level means the
/// whole modality was out (sensor dropout); `None` for one detection means
/// that detection has no data in an otherwise live modality.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    pub index: usize,
    pub detections: Vec<Detection>,
    pub gt: Vec<super::kitti::LabelRecord>,
    pub image_payloads: Option<Vec<Option<ImagePatch>>>,
    pub cloud_payloads: Option<Vec<Option<PointSet>>>,
}

/// An ordered sequence of frames with optional calibration.
#[derive(Debug, Clone, Default)]
pub struct SequenceDataset {
    pub id: String,
    pub frames: Vec<Frame>,
    pub calibration: Option<Calibration>,
}

impl SequenceDataset {
    pub fn validate(&self) -> Result<()> {
        for pair in self.frames.windows(2) {
            if pair[1].index <= pair[0].index {
                return Err(Error::Data(format!(
                    "frame indices not strictly increasing: {} then {}",
                    pair[0].index, pair[1].index
                )));
            }
        }
        for frame in &self.frames {
            let n = frame.detections.len();
            if let Some(p) = &frame.image_payloads {
                if p.len() != n {
                    return Err(Error::Data(format!(
                        "frame {}: {} image payload slots for {} detections",
                        frame.index,
                        p.len(),
                        n
                    )));
                }
            }
            if let Some(p) = &frame.cloud_payloads {
                if p.len() != n {
                    return Err(Error::Data(format!(
                        "frame {}: {} cloud payload slots for {} detections",
                        frame.index,
                        p.len(),
                        n
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_ground_truth(&self) -> bool {
        self.frames.iter().any(|f| !f.gt.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = Box2d::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero() {
        let a = Box2d::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = Box2d::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(Box2d::new(5.0, 0.0, 5.0, 1.0).is_err());
        assert!(Box2d::new(0.0, 2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn box3d_contains_center_of_unit_box() {
        let b = Box3d {
            h: 1.0,
            w: 1.0,
            l: 1.0,
            x: 0.0,
            y: 0.5,
            z: 0.0,
            rotation_y: 0.0,
        };
        // Bottom face at y = 0.5, so the origin is inside.
        assert!(b.contains(0.0, 0.0, 0.0));
        assert!(!b.contains(2.0, 0.0, 0.0));
    }

    #[test]
    fn box3d_rotation_moves_long_axis() {
        // Long axis (l = 4) along x when unrotated; after a quarter turn the
        // long axis lies along z.
        let unrot = Box3d {
            h: 2.0,
            w: 1.0,
            l: 4.0,
            x: 0.0,
            y: 1.0,
            z: 0.0,
            rotation_y: 0.0,
        };
        assert!(unrot.contains(1.8, 0.0, 0.0));
        assert!(!unrot.contains(0.0, 0.0, 1.8));
        let rot = Box3d {
            rotation_y: std::f64::consts::FRAC_PI_2,
            ..unrot
        };
        assert!(rot.contains(0.0, 0.0, 1.8));
        assert!(!rot.contains(1.8, 0.0, 0.0));
    }

    #[test]
    fn identity_calibration_projects_by_division() {
        let c = Calibration::identity();
        let (u, v, depth) = c.project(2.0, 4.0, 2.0).unwrap();
        assert_eq!((u, v, depth), (1.0, 2.0, 2.0));
        assert!(c.project(1.0, 1.0, -0.5).is_none());
    }
}
