//! Point selection for detections: frustum gating through the camera model
//! and rotated 3D-box containment.

use crate::ingest::{Box2d, Box3d, Calibration, PointCloud};

/// Indices of the points a detection owns inside one frame's cloud. A point
/// may appear in several detections' selections when boxes overlap.
#[derive(Debug, Clone, Default)]
pub struct FrustumSelection {
    pub indices: Vec<usize>,
}

impl FrustumSelection {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Select every point whose camera-frame depth is positive and whose image
/// projection falls inside `box2d` (inclusive boundaries).
pub fn select_frustum_points(
    cloud: &PointCloud,
    calib: &Calibration,
    box2d: &Box2d,
) -> FrustumSelection {
    let mut indices = Vec::new();
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.xyz(i);
        if let Some((u, v, _depth)) = calib.project(x, y, z) {
            if box2d.contains(u, v) {
                indices.push(i);
            }
        }
    }
    FrustumSelection { indices }
}

/// Select every point inside the rotated 3D box. The cloud must already be
/// in the same (camera) frame as the box.
pub fn select_box3d_points(cloud: &PointCloud, box3d: &Box3d) -> FrustumSelection {
    let mut indices = Vec::new();
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.xyz(i);
        if box3d.contains(x, y, z) {
            indices.push(i);
        }
    }
    FrustumSelection { indices }
}

/// Materialize per-detection point sets (camera frame) from a raw scan,
/// optionally carrying reflectance as a 4th channel.
pub fn gather_selected(
    cloud: &PointCloud,
    calib: &Calibration,
    selection: &FrustumSelection,
    with_reflectance: bool,
) -> (Vec<[f64; 3]>, Option<Vec<f64>>) {
    let mut pts = Vec::with_capacity(selection.indices.len());
    let mut refl = with_reflectance.then(Vec::new);
    for &i in &selection.indices {
        let [x, y, z] = cloud.xyz(i);
        let rect = calib.velo_to_rect(x, y, z);
        pts.push(rect);
        if let Some(r) = refl.as_mut() {
            r.push(cloud.reflectance(i).unwrap_or(0.0));
        }
    }
    (pts, refl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(points)
    }

    #[test]
    fn full_cover_box_selects_all_forward_points() {
        let c = cloud(&[
            [0.0, 0.0, 1.0],
            [5.0, 2.0, 10.0],
            [-3.0, -1.0, 4.0],
            [0.0, 0.0, -2.0], // behind the camera
        ]);
        let calib = Calibration::identity();
        let huge = Box2d::new(-1e6, -1e6, 1e6, 1e6).unwrap();
        let sel = select_frustum_points(&c, &calib, &huge);
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    #[test]
    fn point_behind_camera_is_never_selected() {
        let c = cloud(&[[0.0, 0.0, -1.0]]);
        let calib = Calibration::identity();
        let b = Box2d::new(-10.0, -10.0, 10.0, 10.0).unwrap();
        assert!(select_frustum_points(&c, &calib, &b).is_empty());
    }

    #[test]
    fn five_point_cloud_selects_known_three() {
        // Identity calibration: projection is (x/z, y/z). Box [0,1]x[0,1].
        let c = cloud(&[
            [0.5, 0.5, 1.0],  // (0.5, 0.5) inside
            [2.0, 2.0, 2.0],  // (1.0, 1.0) on the inclusive corner
            [0.0, 0.0, 5.0],  // (0, 0) on the inclusive corner
            [3.0, 0.5, 1.0],  // (3.0, 0.5) outside
            [0.5, 0.5, -1.0], // behind
        ]);
        let calib = Calibration::identity();
        let b = Box2d::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let sel = select_frustum_points(&c, &calib, &b);
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    #[test]
    fn enlarging_the_box_never_deselects() {
        // Deterministic pseudo-random cloud.
        let mut pts = Vec::new();
        let mut s = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..200 {
            pts.push([next() * 10.0, next() * 10.0, next() * 20.0]);
        }
        let c = cloud(&pts);
        let calib = Calibration::identity();
        let small = Box2d::new(-0.4, -0.4, 0.4, 0.4).unwrap();
        let large = Box2d::new(-0.9, -0.9, 0.9, 0.9).unwrap();
        let inner = select_frustum_points(&c, &calib, &small);
        let outer = select_frustum_points(&c, &calib, &large);
        for i in &inner.indices {
            assert!(outer.indices.contains(i), "point {i} deselected by growth");
        }
    }

    #[test]
    fn box3d_selection_handles_rotation_and_empty_cloud() {
        let b = Box3d {
            h: 2.0,
            w: 1.0,
            l: 4.0,
            x: 0.0,
            y: 1.0,
            z: 10.0,
            rotation_y: 0.0,
        };
        let c = cloud(&[[0.0, 0.0, 10.0], [1.8, 0.0, 10.0], [0.0, 0.0, 11.8]]);
        let sel = select_box3d_points(&c, &b);
        assert_eq!(sel.indices, vec![0, 1]);

        // Quarter turn swings the long axis onto z: the hand-rotated point
        // at z offset 1.8 is now inside, the x offset point is not.
        let rotated = Box3d {
            rotation_y: std::f64::consts::FRAC_PI_2,
            ..b
        };
        let sel = select_box3d_points(&c, &rotated);
        assert_eq!(sel.indices, vec![0, 2]);

        let empty = PointCloud::new(Tensor::zeros(&[0, 3])).unwrap();
        assert!(select_box3d_points(&empty, &b).is_empty());
    }
}
