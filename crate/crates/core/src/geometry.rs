//! Oriented 3D boxes and rotated bird's-eye-view overlap.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upright box: center and extents in meters, heading about +z in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Length along the heading, width across it, height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: usize,
}

/// Maps an angle into `(−π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: usize) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().chain(&self.size).all(|v| v.is_finite()) && self.yaw.is_finite();
        if !finite || self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Contract(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    /// Point expressed in the box frame (heading along +x).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Closed containment test (boundary counts as inside), with slack `tol` meters.
    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= self.size[i] / 2.0 + tol)
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| {
            [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y]
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            let p_in = cp >= 0.0;
            let q_in = cq >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let t = cp / (cp - cq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    twice.abs() / 2.0
}

/// Rotated intersection-over-union of the two BEV footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()));
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(cx: f64, cy: f64, yaw: f64) -> Box3D {
        Box3D::new([cx, cy, 0.0], [2.0, 2.0, 1.0], yaw, 0).unwrap()
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let a = Box3D::new([1.0, 2.0, 0.0], [4.0, 1.8, 1.5], 0.7, 0).unwrap();
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_shifted_squares() {
        // Overlap 1×2 = 2, union 4 + 4 − 2 = 6.
        let iou = bev_iou(&unit(0.0, 0.0, 0.0), &unit(1.0, 0.0, 0.0));
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_square_overlap() {
        // A square rotated 45° over itself: the intersection is a regular octagon
        // of inradius 1, area 8·tan(π/8).
        let inter = 8.0 * (PI / 8.0).tan();
        let expected = inter / (8.0 - inter);
        let iou = bev_iou(&unit(0.0, 0.0, 0.0), &unit(0.0, 0.0, PI / 4.0));
        assert!((iou - expected).abs() < 1e-12, "{iou} vs {expected}");
    }

    #[test]
    fn disjoint_boxes() {
        assert_eq!(bev_iou(&unit(0.0, 0.0, 0.3), &unit(10.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn yaw_is_normalized() {
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0, 0).is_err());
    }
}
