//! Procedural LiDAR-like scenes: upright boxes sampled on their visible faces
//! plus ground clutter.

use std::f64::consts::PI;

use anyhow::{bail, ensure, Result};
use fasd::geometry::{bev_iou, Box3D};
use fasd::voxel::{Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    /// Mean return intensity of the class surface.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    /// BEV extent in meters; the scene spans `[0, x) × [0, y)`.
    pub extent: [f64; 2],
    pub objects: [usize; 2],
    pub classes: Vec<ClassSpec>,
    pub points_per_object: [usize; 2],
    /// Ground returns per square meter.
    pub clutter_density: f64,
    /// Probability that an object point is lost.
    pub dropout: f64,
    /// Clearance kept between box footprints, meters.
    pub spacing: f64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let class = |name: &str, length, width, height, intensity| ClassSpec {
            name: name.into(),
            length,
            width,
            height,
            intensity,
        };
        Self {
            seed: 7,
            extent: [24.0, 24.0],
            objects: [2, 6],
            classes: vec![
                class("vehicle", [3.6, 4.6], [1.6, 2.0], [1.4, 1.8], 0.7),
                class("pedestrian", [0.6, 1.0], [0.6, 1.0], [1.5, 1.9], 0.3),
                class("cyclist", [1.6, 2.0], [0.6, 0.8], [1.4, 1.8], 0.5),
            ],
            points_per_object: [80, 200],
            clutter_density: 0.05,
            dropout: 0.1,
            spacing: 1.0,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        ensure!(self.extent.iter().all(|&e| e > 0.0), "scene extent must be positive");
        ensure!(self.objects[0] <= self.objects[1], "object count range is not ordered");
        ensure!(
            self.points_per_object[0] >= 1 && self.points_per_object[0] <= self.points_per_object[1],
            "points per object range must be ordered and start at 1 or more"
        );
        ensure!(!self.classes.is_empty(), "at least one class is required");
        for c in &self.classes {
            ensure!(
                ordered(c.length) && ordered(c.width) && ordered(c.height),
                "size ranges of class {} must be positive and ordered",
                c.name
            );
        }
        ensure!(self.clutter_density >= 0.0, "clutter density must be non-negative");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        ensure!(self.spacing >= 0.0, "spacing must be non-negative");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub index: usize,
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Point on one of the five visible faces (all but the bottom), area-weighted.
fn surface_point(rng: &mut ChaCha8Rng, b: &Box3D) -> [f64; 3] {
    let [l, w, h] = b.size;
    let areas = [l * w, l * h, l * h, w * h, w * h];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let u = rng.random_range(-0.5..0.5);
    let v = rng.random_range(-0.5..0.5);
    let local = match face {
        0 => [u * l, v * w, 0.5 * h],
        1 => [u * l, 0.5 * w, v * h],
        2 => [u * l, -0.5 * w, v * h],
        3 => [0.5 * l, u * w, v * h],
        _ => [-0.5 * l, u * w, v * h],
    };
    let (s, c) = b.yaw.sin_cos();
    [
        b.center[0] + c * local[0] - s * local[1],
        b.center[1] + s * local[0] + c * local[1],
        b.center[2] + local[2],
    ]
}

fn inflated(b: &Box3D, pad: f64) -> Box3D {
    Box3D {
        size: [b.size[0] + pad, b.size[1] + pad, b.size[2]],
        ..*b
    }
}

/// Deterministic in `(spec.seed, index)`.
pub fn gen_scene(spec: &SceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let count = rng.random_range(spec.objects[0]..=spec.objects[1]);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..spec.max_retries {
            let class = rng.random_range(0..spec.classes.len());
            let cs = &spec.classes[class];
            let size = [uniform(&mut rng, cs.length), uniform(&mut rng, cs.width), uniform(&mut rng, cs.height)];
            let margin = size[0].hypot(size[1]) / 2.0 + 0.25;
            if spec.extent.iter().any(|&e| e <= 2.0 * margin) {
                continue;
            }
            let cx = rng.random_range(margin..spec.extent[0] - margin);
            let cy = rng.random_range(margin..spec.extent[1] - margin);
            let yaw = rng.random_range(-PI..PI);
            let b = Box3D::new([cx, cy, size[2] / 2.0], size, yaw, class)?;
            let clear = boxes
                .iter()
                .all(|o| bev_iou(&inflated(o, spec.spacing), &inflated(&b, spec.spacing)) == 0.0);
            if clear {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            bail!("scene {index}: could not place object after {} attempts", spec.max_retries);
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        let cs = &spec.classes[b.class];
        let n = rng.random_range(spec.points_per_object[0]..=spec.points_per_object[1]);
        let mut kept = 0;
        for k in 0..n {
            let p = surface_point(&mut rng, b);
            let intensity = (cs.intensity + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0);
            let lost = rng.random_bool(spec.dropout);
            if !lost || (kept == 0 && k + 1 == n) {
                points.push(Point::new(p[0], p[1], p[2], intensity));
                kept += 1;
            }
        }
    }
    let clutter = (spec.clutter_density * spec.extent[0] * spec.extent[1]).round() as usize;
    for _ in 0..clutter {
        let p = [
            rng.random_range(0.0..spec.extent[0]),
            rng.random_range(0.0..spec.extent[1]),
            rng.random_range(0.0..0.1),
        ];
        let intensity = rng.random_range(0.0..0.3);
        if boxes.iter().all(|b| !b.contains(p, 0.05)) {
            points.push(Point::new(p[0], p[1], p[2], intensity));
        }
    }
    Ok(Scene {
        index,
        cloud: PointCloud { points },
        boxes,
    })
}
