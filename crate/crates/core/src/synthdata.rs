//! Procedural scenes of primitive shapes with instance and class labels.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io::LabeledScene;

/// Default class palette; the index is the class id.
pub const PALETTE: [&str; 8] = [
    "sphere", "box", "cylinder", "cone", "torus", "floor", "wall", "clutter",
];
pub const CLASS_FLOOR: i64 = 5;
pub const CLASS_WALL: i64 = 6;

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    Clutter,
}

impl Shape {
    pub fn class_id(self) -> i64 {
        match self {
            Shape::Sphere => 0,
            Shape::Box => 1,
            Shape::Cylinder => 2,
            Shape::Cone => 3,
            Shape::Torus => 4,
            Shape::Clutter => 7,
        }
    }

    pub const ALL: [Shape; 6] = [
        Shape::Sphere,
        Shape::Box,
        Shape::Cylinder,
        Shape::Cone,
        Shape::Torus,
        Shape::Clutter,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Inclusive range of object count.
    pub instances: (usize, usize),
    /// Shapes objects are drawn from.
    pub shapes: Vec<Shape>,
    /// Inclusive range of points per object.
    pub points_per_instance: (usize, usize),
    /// Inclusive range of object bounding radius (meters).
    pub radius: (f64, f64),
    /// Side length of the square floor area (meters).
    pub extent: f64,
    pub floor: bool,
    pub floor_points: usize,
    pub wall: bool,
    pub wall_points: usize,
    /// Minimum center distance as a fraction of the summed radii.
    pub spacing: f64,
    /// Gaussian noise stddev, relative to `extent`.
    pub noise: f64,
    pub colors: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            instances: (3, 6),
            shapes: Shape::ALL.to_vec(),
            points_per_instance: (120, 240),
            radius: (0.25, 0.5),
            extent: 4.0,
            floor: true,
            floor_points: 400,
            wall: false,
            wall_points: 200,
            spacing: 0.9,
            noise: 0.003,
            colors: true,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.instances.0 > self.instances.1 || self.instances.1 == 0 {
            return bad("instance range must be non-empty and allow at least one object");
        }
        if self.points_per_instance.0 == 0
            || self.points_per_instance.0 > self.points_per_instance.1
        {
            return bad("points per instance range must be non-empty and positive");
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1 && self.radius.1.is_finite()) {
            return bad("radius range must be positive and non-empty");
        }
        if self.shapes.is_empty() {
            return bad("at least one shape required");
        }
        if !(self.extent > 2.0 * self.radius.1) {
            return bad("extent must exceed the largest object diameter");
        }
        if !(self.spacing >= 0.0 && self.noise >= 0.0) {
            return bad("spacing and noise must be non-negative");
        }
        Ok(())
    }
}

/// Placed object: class shape, center on the floor plane, bounding radius.
#[derive(Debug, Clone, Copy)]
struct Placement {
    shape: Shape,
    center: [f64; 2],
    radius: f64,
}

fn place(spec: &SceneSpec, rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<Placement>> {
    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    for i in 0..count {
        let shape = spec.shapes[rng.gen_range(0..spec.shapes.len())];
        let radius = rng.gen_range(spec.radius.0..=spec.radius.1);
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = [
                rng.gen_range(radius..=spec.extent - radius),
                rng.gen_range(radius..=spec.extent - radius),
            ];
            let clear = placed.iter().all(|p| {
                let d = ((p.center[0] - c[0]).powi(2) + (p.center[1] - c[1]).powi(2)).sqrt();
                d >= (p.radius + radius) * spec.spacing
            });
            if clear {
                ok = Some(c);
                break;
            }
        }
        let center = ok.ok_or_else(|| {
            Error::Placement(format!(
                "could not place object {i} after {PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        placed.push(Placement {
            shape,
            center,
            radius,
        });
    }
    Ok(placed)
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Area-uniform point on a sphere of radius `r` centered at the origin.
pub fn sample_sphere(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    let u = unit_vector(rng);
    [u[0] * r, u[1] * r, u[2] * r]
}

/// Area-uniform point on an axis-aligned box with half-extents `h`.
pub fn sample_box(rng: &mut ChaCha8Rng, h: [f64; 3]) -> [f64; 3] {
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut axis = 2;
    for (a, &area) in areas.iter().enumerate() {
        if pick < area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut p = [0.0; 3];
    for (a, v) in p.iter_mut().enumerate() {
        *v = if a == axis {
            if rng.gen_bool(0.5) {
                h[a]
            } else {
                -h[a]
            }
        } else {
            rng.gen_range(-h[a]..=h[a])
        };
    }
    p
}

/// Closed cylinder along z from 0 to `height`.
pub fn sample_cylinder(rng: &mut ChaCha8Rng, r: f64, height: f64) -> [f64; 3] {
    let side = TAU * r * height;
    let cap = PI * r * r;
    let t = rng.gen_range(0.0..side + 2.0 * cap);
    let theta = rng.gen_range(0.0..TAU);
    if t < side {
        [
            r * theta.cos(),
            r * theta.sin(),
            rng.gen_range(0.0..=height),
        ]
    } else {
        let rr = r * rng.gen::<f64>().sqrt();
        let z = if t < side + cap { 0.0 } else { height };
        [rr * theta.cos(), rr * theta.sin(), z]
    }
}

/// Cone with base radius `r` at z = 0 and apex at z = `height`, closed base.
pub fn sample_cone(rng: &mut ChaCha8Rng, r: f64, height: f64) -> [f64; 3] {
    let slant = (r * r + height * height).sqrt();
    let side = PI * r * slant;
    let base = PI * r * r;
    let theta = rng.gen_range(0.0..TAU);
    let s = rng.gen::<f64>().sqrt();
    if rng.gen_range(0.0..side + base) < side {
        // distance from apex grows with sqrt for uniform lateral area
        [r * s * theta.cos(), r * s * theta.sin(), height * (1.0 - s)]
    } else {
        [r * s * theta.cos(), r * s * theta.sin(), 0.0]
    }
}

/// Torus in the xy-plane with major radius `big` and tube radius `small`.
pub fn sample_torus(rng: &mut ChaCha8Rng, big: f64, small: f64) -> [f64; 3] {
    loop {
        let u = rng.gen_range(0.0..TAU);
        let v = rng.gen_range(0.0..TAU);
        // accept proportionally to the local area element
        if rng.gen_range(0.0..big + small) <= big + small * v.cos() {
            let ring = big + small * v.cos();
            return [ring * u.cos(), ring * u.sin(), small * v.sin()];
        }
    }
}

fn shape_point(rng: &mut ChaCha8Rng, p: &Placement, dims: [f64; 3]) -> [f64; 3] {
    let r = p.radius;
    let local = match p.shape {
        Shape::Sphere => {
            let q = sample_sphere(rng, r);
            [q[0], q[1], q[2] + r]
        }
        Shape::Box => {
            let q = sample_box(rng, dims);
            [q[0], q[1], q[2] + dims[2]]
        }
        Shape::Cylinder => sample_cylinder(rng, r * dims[0], r * dims[1]),
        Shape::Cone => sample_cone(rng, r, r * dims[1]),
        Shape::Torus => {
            let small = r * dims[0];
            let q = sample_torus(rng, r - small, small);
            [q[0], q[1], q[2] + small]
        }
        Shape::Clutter => {
            // a loose blob of points inside an ellipsoid
            let u = unit_vector(rng);
            let s = rng.gen::<f64>().cbrt();
            [
                u[0] * s * r,
                u[1] * s * r * dims[0],
                (u[2] * s * 0.5 + 0.5) * r * dims[1],
            ]
        }
    };
    [local[0] + p.center[0], local[1] + p.center[1], local[2]]
}

fn shape_dims(rng: &mut ChaCha8Rng, p: &Placement) -> [f64; 3] {
    let r = p.radius;
    match p.shape {
        Shape::Box => {
            // half extents whose xy diagonal stays within the radius
            let hx = rng.gen_range(0.35..0.7) * r;
            let hy = rng.gen_range(0.35..0.7) * r;
            [hx, hy, rng.gen_range(0.3..0.9) * r]
        }
        Shape::Cylinder => [rng.gen_range(0.6..1.0), rng.gen_range(1.0..2.5), 0.0],
        Shape::Cone => [1.0, rng.gen_range(1.2..2.5), 0.0],
        Shape::Torus => [rng.gen_range(0.2..0.35), 0.0, 0.0],
        Shape::Clutter => [rng.gen_range(0.5..1.0), rng.gen_range(0.4..1.0), 0.0],
        Shape::Sphere => [0.0; 3],
    }
}

/// Base color per class; points get small perturbations around it.
pub fn class_color(class: i64) -> [f64; 3] {
    const COLORS: [[f64; 3]; 8] = [
        [0.85, 0.25, 0.2],
        [0.2, 0.45, 0.85],
        [0.25, 0.7, 0.3],
        [0.9, 0.7, 0.15],
        [0.6, 0.3, 0.75],
        [0.55, 0.5, 0.45],
        [0.8, 0.8, 0.75],
        [0.35, 0.75, 0.75],
    ];
    COLORS[class.rem_euclid(8) as usize]
}

/// Generates one labeled scene. Objects get instance ids `0..n`; floor and
/// wall points are background (`-1`) with their own class ids.
pub fn generate_scene(spec: &SceneSpec) -> Result<LabeledScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.gen_range(spec.instances.0..=spec.instances.1);
    let placed = place(spec, &mut rng, count)?;
    let mut points = Vec::new();
    let mut instance_ids = Vec::new();
    let mut class_ids = Vec::new();
    for (i, p) in placed.iter().enumerate() {
        let n = rng.gen_range(spec.points_per_instance.0..=spec.points_per_instance.1);
        let dims = shape_dims(&mut rng, p);
        for _ in 0..n {
            points.push(shape_point(&mut rng, p, dims));
            instance_ids.push(i as i64);
            class_ids.push(p.shape.class_id());
        }
    }
    if spec.floor {
        for _ in 0..spec.floor_points {
            points.push([
                rng.gen_range(0.0..spec.extent),
                rng.gen_range(0.0..spec.extent),
                0.0,
            ]);
            instance_ids.push(-1);
            class_ids.push(CLASS_FLOOR);
        }
    }
    if spec.wall {
        let height = spec.extent * 0.5;
        for _ in 0..spec.wall_points {
            points.push([
                rng.gen_range(0.0..spec.extent),
                0.0,
                rng.gen_range(0.0..height),
            ]);
            instance_ids.push(-1);
            class_ids.push(CLASS_WALL);
        }
    }
    let sigma = spec.noise * spec.extent;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        for p in &mut points {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let colors = spec.colors.then(|| {
        class_ids
            .iter()
            .map(|&c| {
                let base = class_color(c);
                base.map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
            })
            .collect()
    });
    let cloud = PointCloud::with_colors(points, colors)?.with_id(format!("synth-{}", spec.seed));
    Ok(LabeledScene {
        cloud,
        instance_ids: Some(instance_ids),
        class_ids: Some(class_ids),
    })
}

/// `count` scenes with consecutive seeds starting at `spec.seed`.
pub fn generate_scenes(spec: &SceneSpec, count: usize) -> Result<Vec<LabeledScene>> {
    (0..count)
        .map(|i| {
            generate_scene(&SceneSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            })
        })
        .collect()
}
