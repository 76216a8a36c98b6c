use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

/// Oriented 3D box in the ego frame (x forward, y left, z up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Length (along heading), width, height in metres.
    pub size: [f64; 3],
    /// Heading about +z, normalised to (−π, π].
    pub yaw: f64,
    pub score: f64,
    pub class_id: u32,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, score: f64, class_id: u32) -> Result<Self> {
        if center.iter().chain(&size).any(|v| !v.is_finite()) || !yaw.is_finite() {
            bail!(Validation, "box fields must be finite");
        }
        if size.iter().any(|&s| s <= 0.0) {
            bail!(Validation, "box size must be strictly positive, got {:?}", size);
        }
        if !(0.0..=1.0).contains(&score) {
            bail!(Validation, "box score must lie in [0, 1], got {score}");
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            score,
            class_id,
        })
    }

    /// Point relative to the box centre, rotated into the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = (math::sin(self.yaw), math::cos(self.yaw));
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= 0.5 * self.size[0] && l[1].abs() <= 0.5 * self.size[1] && l[2].abs() <= 0.5 * self.size[2]
    }

    /// Footprint containment, ignoring z.
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let l = self.to_local([x, y, self.center[2]]);
        l[0].abs() <= 0.5 * self.size[0] && l[1].abs() <= 0.5 * self.size[1]
    }

    pub fn local_to_ego(&self, l: [f64; 3]) -> [f64; 3] {
        let (s, c) = (math::sin(self.yaw), math::cos(self.yaw));
        [
            self.center[0] + c * l[0] - s * l[1],
            self.center[1] + s * l[0] + c * l[1],
            self.center[2] + l[2],
        ]
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let [l, w, h] = self.size;
        let mut out = [[0.0; 3]; 8];
        let mut i = 0;
        for sx in [-0.5, 0.5] {
            for sy in [-0.5, 0.5] {
                for sz in [-0.5, 0.5] {
                    out[i] = self.local_to_ego([sx * l, sy * w, sz * h]);
                    i += 1;
                }
            }
        }
        out
    }

    /// `(xmin, ymin, xmax, ymax)` of the rotated footprint.
    pub fn footprint_aabb(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in self.corners() {
            b.0 = b.0.min(c[0]);
            b.1 = b.1.min(c[1]);
            b.2 = b.2.max(c[0]);
            b.3 = b.3.max(c[1]);
        }
        b
    }

    /// Planar distance of the centre from the ego.
    pub fn ground_distance(&self) -> f64 {
        math::sqrt(self.center[0] * self.center[0] + self.center[1] * self.center[1])
    }
}

/// Maps any finite angle into (−π, π].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let a = math::atan2(math::sin(yaw), math::cos(yaw));
    if a <= -core::f64::consts::PI {
        a + 2.0 * core::f64::consts::PI
    } else {
        a
    }
}

/// LiDAR sweep: rows of `(x, y, z, intensity)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                bail!(Validation, "point {i} has a non-finite coordinate");
            }
            if !(0.0..=1.0).contains(&p[3]) {
                bail!(Validation, "point {i} intensity {} outside [0, 1]", p[3]);
            }
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[[f64; 4]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps points for which `keep` returns true.
    pub fn filtered(&self, mut keep: impl FnMut(&[f64; 4]) -> bool) -> Self {
        Self {
            points: self.points.iter().copied().filter(|p| keep(p)).collect(),
        }
    }

    pub fn count_in_box(&self, b: &Box3D) -> usize {
        self.points.iter().filter(|p| b.contains([p[0], p[1], p[2]])).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn yaw_is_normalised() {
        let b = Box3D::new([0.0; 3], [1.0; 3], 3.0 * PI, 0.5, 0).unwrap();
        assert!((b.yaw - PI).abs() < 1e-12);
        let b = Box3D::new([0.0; 3], [1.0; 3], -PI, 0.5, 0).unwrap();
        assert!((b.yaw - PI).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0, 0.5, 0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], 0.0, 1.5, 0).is_err());
    }

    #[test]
    fn rotated_containment() {
        let b = Box3D::new([10.0, 0.0, 1.0], [4.0, 1.0, 2.0], PI / 2.0, 1.0, 0).unwrap();
        // Long axis now points along +y.
        assert!(b.contains([10.0, 1.9, 1.0]));
        assert!(!b.contains([11.9, 0.0, 1.0]));
    }

    #[test]
    fn rejects_bad_intensity() {
        assert!(PointCloud::new(alloc::vec![[0.0, 0.0, 0.0, 1.5]]).is_err());
    }
}
