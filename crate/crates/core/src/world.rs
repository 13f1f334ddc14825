//! Procedural synthetic worlds with ground-truth traction fields, plus the
//! simulated sensors: depth camera (ray caster), GNSS, and compass.
//!
//! Worlds are rectangular, axis-aligned, with per-cell ground-truth linear
//! (`mu`) and angular (`nu`) traction in `[0, 1]` and a per-cell material
//! class that stands in for appearance. Obstacles are extruded footprints;
//! a tall-grass patch is *visible* to the depth camera but keeps high
//! traction, a ditch is invisible but untraversable.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{robot_to_world, Attitude3D, CameraModel, DepthImage};
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::kinodynamics::{step, Control, State2D};
use crate::util::wrap_angle;

/// Appearance stand-in consumed by the learner as a one-hot channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Material {
    Dirt = 0,
    Grass = 1,
    TallGrass = 2,
    Mud = 3,
    Structure = 4,
}

pub const NUM_MATERIALS: usize = 5;

impl Material {
    pub fn from_index(i: u8) -> Material {
        match i {
            1 => Material::Grass,
            2 => Material::TallGrass,
            3 => Material::Mud,
            4 => Material::Structure,
            _ => Material::Dirt,
        }
    }
}

/// Axis-aligned footprint of an obstacle or ground patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Footprint {
    Rect { cx: f64, cy: f64, half_x: f64, half_y: f64 },
    Circle { cx: f64, cy: f64, radius: f64 },
}

impl Footprint {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Footprint::Rect { cx, cy, half_x, half_y } => {
                (x - cx).abs() <= half_x && (y - cy).abs() <= half_y
            }
            Footprint::Circle { cx, cy, radius } => {
                (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius
            }
        }
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Footprint::Rect { cx, cy, half_x, half_y } => (cx - half_x, cy - half_y, cx + half_x, cy + half_y),
            Footprint::Circle { cx, cy, radius } => (cx - radius, cy - radius, cx + radius, cy + radius),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    SolidBlock,
    SolidCylinder,
    TallGrassPatch,
    Ditch,
}

/// Obstacle description in a world spec. Optional fields fall back to
/// per-kind defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub kind: ObstacleKind,
    pub footprint: Footprint,
    #[serde(default)]
    pub height: Option<f64>,
    #[serde(default)]
    pub mu_override: Option<f64>,
    #[serde(default)]
    pub nu_override: Option<f64>,
    #[serde(default)]
    pub material: Option<Material>,
}

/// Resolved obstacle with all defaults applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    pub footprint: Footprint,
    pub height: f64,
    pub mu_override: f64,
    pub nu_override: f64,
    pub visible_to_depth: bool,
    pub material: Material,
}

impl Obstacle {
    fn resolve(spec: &ObstacleSpec) -> Obstacle {
        let (height, mu, nu, material) = match spec.kind {
            ObstacleKind::SolidBlock => (1.2, 0.0, 0.0, Material::Structure),
            ObstacleKind::SolidCylinder => (1.5, 0.0, 0.0, Material::Structure),
            ObstacleKind::TallGrassPatch => (0.8, 0.95, 0.95, Material::TallGrass),
            ObstacleKind::Ditch => (0.0, 0.0, 0.0, Material::Dirt),
        };
        Obstacle {
            kind: spec.kind,
            footprint: spec.footprint,
            height: spec.height.unwrap_or(height),
            mu_override: spec.mu_override.unwrap_or(mu),
            nu_override: spec.nu_override.unwrap_or(nu),
            visible_to_depth: spec.kind != ObstacleKind::Ditch,
            material: spec.material.unwrap_or(material),
        }
    }

    /// Solid obstacles force truth traction to their override (0 by default).
    pub fn is_solid(&self) -> bool {
        matches!(self.kind, ObstacleKind::SolidBlock | ObstacleKind::SolidCylinder)
    }
}

/// Flat region of modified ground traction/material (mud, lawn, ...).
/// Invisible to the depth camera; only the material channel shows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPatch {
    pub footprint: Footprint,
    pub mu: f64,
    pub nu: f64,
    pub material: Material,
}

/// Sensor noise block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub gnss_sigma: f64,
    /// True compass-vs-North offset injected into heading measurements.
    pub compass_offset: f64,
    pub compass_sigma: f64,
    pub depth_sigma: f64,
    pub depth_dropout_rate: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self { gnss_sigma: 0.0, compass_offset: 0.0, compass_sigma: 0.0, depth_sigma: 0.0, depth_dropout_rate: 0.0 }
    }
}

impl SensorNoise {
    pub fn validate(&self) -> Result<()> {
        if self.gnss_sigma < 0.0 || self.compass_sigma < 0.0 || self.depth_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise sigmas must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.depth_dropout_rate) {
            return Err(Error::InvalidConfig("depth_dropout_rate must be in [0,1]".into()));
        }
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&self.compass_offset) {
            return Err(Error::InvalidConfig("compass_offset must be in [-pi, pi)".into()));
        }
        Ok(())
    }
}

/// World description as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Rectangular extent in meters, from (0, 0) to (extent.0, extent.1).
    pub extent: (f64, f64),
    pub cell_size: f64,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub ground_patches: Vec<GroundPatch>,
    #[serde(default)]
    pub noise: SensorNoise,
    #[serde(default)]
    pub seed: u64,
    /// Depth camera max range in meters.
    #[serde(default = "default_max_range")]
    pub max_range: f64,
}

fn default_max_range() -> f64 {
    10.0
}

/// Fully built world: truth grids, material grid, resolved obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub extent: (f64, f64),
    pub cell_size: f64,
    pub truth_mu: Grid2,
    pub truth_nu: Grid2,
    pub material: Vec<u8>,
    pub obstacles: Vec<Obstacle>,
    pub seed: u64,
    pub max_range: f64,
}

impl World {
    pub fn nx(&self) -> usize {
        self.truth_mu.nx
    }

    pub fn ny(&self) -> usize {
        self.truth_mu.ny
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.extent.0 && y < self.extent.1
    }

    /// Ground-truth traction at a point (nearest cell).
    pub fn truth_at(&self, x: f64, y: f64) -> (f64, f64) {
        (self.truth_mu.nearest(x, y), self.truth_nu.nearest(x, y))
    }

    pub fn material_at(&self, x: f64, y: f64) -> Material {
        let (ix, iy) = self.truth_mu.cell_of(x, y);
        Material::from_index(self.material[iy * self.nx() + ix])
    }
}

/// Build a world from a spec. Pure function of `(spec, seed)`.
pub fn make_world(spec: &WorldSpec, seed: u64) -> Result<World> {
    if spec.extent.0 <= 0.0 || spec.extent.1 <= 0.0 {
        return Err(Error::InvalidConfig("world extent must be positive".into()));
    }
    if spec.cell_size <= 0.0 {
        return Err(Error::InvalidConfig("cell_size must be positive".into()));
    }
    spec.noise.validate()?;
    let nx = (spec.extent.0 / spec.cell_size).round() as usize;
    let ny = (spec.extent.1 / spec.cell_size).round() as usize;
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidConfig("world extent smaller than one cell".into()));
    }
    for (i, o) in spec.obstacles.iter().enumerate() {
        let (x0, y0, x1, y1) = o.footprint.bounds();
        if x0 < 0.0 || y0 < 0.0 || x1 > spec.extent.0 || y1 > spec.extent.1 {
            return Err(Error::InvalidConfig(format!("obstacle {i} lies outside the world extent")));
        }
        if let Some(h) = o.height {
            if h < 0.0 {
                return Err(Error::InvalidConfig(format!("obstacle {i} has negative height")));
            }
        }
    }

    let mut truth_mu = Grid2::filled(nx, ny, (0.0, 0.0), spec.cell_size, 1.0);
    let mut truth_nu = Grid2::filled(nx, ny, (0.0, 0.0), spec.cell_size, 1.0);
    let mut material = vec![Material::Dirt as u8; nx * ny];

    let cell_center = |ix: usize, iy: usize| {
        ((ix as f64 + 0.5) * spec.cell_size, (iy as f64 + 0.5) * spec.cell_size)
    };

    for patch in &spec.ground_patches {
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = cell_center(ix, iy);
                if patch.footprint.contains(x, y) {
                    truth_mu.set(ix, iy, patch.mu.clamp(0.0, 1.0));
                    truth_nu.set(ix, iy, patch.nu.clamp(0.0, 1.0));
                    material[iy * nx + ix] = patch.material as u8;
                }
            }
        }
    }

    let obstacles: Vec<Obstacle> = spec.obstacles.iter().map(Obstacle::resolve).collect();
    for ob in &obstacles {
        let (mu, nu) = (ob.mu_override.clamp(0.0, 1.0), ob.nu_override.clamp(0.0, 1.0));
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = cell_center(ix, iy);
                if ob.footprint.contains(x, y) {
                    truth_mu.set(ix, iy, mu);
                    truth_nu.set(ix, iy, nu);
                    if ob.visible_to_depth {
                        material[iy * nx + ix] = ob.material as u8;
                    }
                }
            }
        }
    }

    Ok(World {
        extent: spec.extent,
        cell_size: spec.cell_size,
        truth_mu,
        truth_nu,
        material,
        obstacles,
        seed,
        max_range: spec.max_range,
    })
}

/// Noisy pose measurement: GNSS position plus compass heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub px: f64,
    pub py: f64,
    pub theta_compass: f64,
}

/// Simulate the GNSS + compass reading for a true pose.
///
/// Heading reports the true heading plus the injected compass offset plus
/// zero-mean Gaussian noise.
pub fn sense_pose<R: Rng>(pose: &State2D, noise: &SensorNoise, rng: &mut R) -> Measurement {
    let gauss = |sigma: f64, rng: &mut R| {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).unwrap().sample(rng)
        } else {
            0.0
        }
    };
    let ex = gauss(noise.gnss_sigma, rng);
    let ey = gauss(noise.gnss_sigma, rng);
    let et = gauss(noise.compass_sigma, rng);
    Measurement {
        px: pose.px + ex,
        py: pose.py + ey,
        theta_compass: wrap_angle(pose.theta + noise.compass_offset + et),
    }
}

/// One true dynamics step with traction read from the world's truth grids.
///
/// Returns the next state and whether it had to be clamped to the world
/// boundary.
pub fn step_truth(x: &State2D, u: &Control, world: &World, dt: f64) -> (State2D, bool) {
    debug_assert!(dt > 0.0);
    let (mu, nu) = world.truth_at(x.px, x.py);
    let next = step(x, u, mu, nu, dt);
    let eps = 1e-9;
    let cx = next.px.clamp(0.0, world.extent.0 - eps);
    let cy = next.py.clamp(0.0, world.extent.1 - eps);
    let clamped = cx != next.px || cy != next.py;
    (State2D::new(cx, cy, next.theta), clamped)
}

// ---------------------------------------------------------------------------
// Ray casting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Hit {
    range: f64,
    material: Material,
}

fn ray_ground(origin: &Point3<f64>, dir: &Vector3<f64>, world: &World) -> Option<Hit> {
    if dir.z >= -1e-12 {
        return None;
    }
    let t = -origin.z / dir.z;
    if t <= 0.0 {
        return None;
    }
    let p = origin + dir * t;
    let material = if world.contains(p.x, p.y) { world.material_at(p.x, p.y) } else { Material::Dirt };
    Some(Hit { range: t, material })
}

fn ray_aabb(origin: &Point3<f64>, dir: &Vector3<f64>, lo: &Point3<f64>, hi: &Point3<f64>) -> Option<f64> {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
        } else {
            let inv = 1.0 / dir[i];
            let (t0, t1) = if inv >= 0.0 {
                ((lo[i] - origin[i]) * inv, (hi[i] - origin[i]) * inv)
            } else {
                ((hi[i] - origin[i]) * inv, (lo[i] - origin[i]) * inv)
            };
            tmin = tmin.max(t0);
            tmax = tmax.min(t1);
            if tmin > tmax {
                return None;
            }
        }
    }
    if tmin > 1e-9 {
        Some(tmin)
    } else {
        None
    }
}

fn ray_cylinder(origin: &Point3<f64>, dir: &Vector3<f64>, cx: f64, cy: f64, r: f64, h: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    // side surface
    let ox = origin.x - cx;
    let oy = origin.y - cy;
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 1e-15 {
        let b = 2.0 * (ox * dir.x + oy * dir.y);
        let c = ox * ox + oy * oy - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if t > 1e-9 {
                    let z = origin.z + dir.z * t;
                    if (0.0..=h).contains(&z) {
                        best = Some(best.map_or(t, |b: f64| b.min(t)));
                    }
                }
            }
        }
    }
    // top cap
    if dir.z.abs() > 1e-15 {
        let t = (h - origin.z) / dir.z;
        if t > 1e-9 {
            let px = origin.x + dir.x * t - cx;
            let py = origin.y + dir.y * t - cy;
            if px * px + py * py <= r * r {
                best = Some(best.map_or(t, |b: f64| b.min(t)));
            }
        }
    }
    best
}

fn ray_obstacle(origin: &Point3<f64>, dir: &Vector3<f64>, ob: &Obstacle) -> Option<f64> {
    match ob.footprint {
        Footprint::Rect { cx, cy, half_x, half_y } => ray_aabb(
            origin,
            dir,
            &Point3::new(cx - half_x, cy - half_y, 0.0),
            &Point3::new(cx + half_x, cy + half_y, ob.height),
        ),
        Footprint::Circle { cx, cy, radius } => ray_cylinder(origin, dir, cx, cy, radius, ob.height),
    }
}

fn cast_ray(world: &World, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best = ray_ground(origin, dir, world);
    for ob in &world.obstacles {
        if !ob.visible_to_depth {
            continue;
        }
        if let Some(t) = ray_obstacle(origin, dir, ob) {
            if best.map_or(true, |b| t < b.range) {
                best = Some(Hit { range: t, material: ob.material });
            }
        }
    }
    best.filter(|h| h.range <= world.max_range)
}

/// Simulated camera frame: hit material per pixel plus the depth image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    /// Material class index of the surface each pixel sees; `NUM_MATERIALS`
    /// (out of range) marks pixels with no hit.
    pub material: Vec<u8>,
    /// Noisy depth in meters, 0 = invalid.
    pub depth: DepthImage,
}

pub const NO_HIT: u8 = NUM_MATERIALS as u8;

/// Render material + depth for a camera at the given pose/attitude.
///
/// Deterministic given the rng state. Dropout and additive depth noise are
/// applied per pixel in row-major order.
pub fn render_observation<R: Rng>(
    world: &World,
    camera: &CameraModel,
    pose: &State2D,
    attitude: &Attitude3D,
    noise: &SensorNoise,
    rng: &mut R,
) -> Result<Observation> {
    camera.validate()?;
    if !world.contains(pose.px, pose.py) {
        return Err(Error::InvalidInput(format!("camera pose ({}, {}) outside world", pose.px, pose.py)));
    }
    let cam_to_world = robot_to_world(pose, attitude) * camera.extrinsic;
    let origin = cam_to_world * Point3::origin();
    let mut material = vec![NO_HIT; camera.width * camera.height];
    let mut depth = DepthImage::invalid(camera.width, camera.height);
    for v in 0..camera.height {
        for u in 0..camera.width {
            let dir = cam_to_world.transform_vector(&camera.ray_dir(u as f64, v as f64));
            let hit = cast_ray(world, &origin, &dir);
            let dropped = noise.depth_dropout_rate > 0.0 && rng.gen::<f64>() < noise.depth_dropout_rate;
            if let Some(h) = hit {
                material[v * camera.width + u] = h.material as u8;
                if !dropped {
                    let mut d = h.range;
                    if noise.depth_sigma > 0.0 {
                        d += Normal::new(0.0, noise.depth_sigma).unwrap().sample(rng);
                    }
                    if d > 0.0 {
                        depth.set(u, v, d);
                    }
                }
            }
        }
    }
    Ok(Observation { width: camera.width, height: camera.height, material, depth })
}

/// Depth-only rendering (same ray caster, material discarded).
pub fn render_depth<R: Rng>(
    world: &World,
    camera: &CameraModel,
    pose: &State2D,
    attitude: &Attitude3D,
    noise: &SensorNoise,
    rng: &mut R,
) -> Result<DepthImage> {
    Ok(render_observation(world, camera, pose, attitude, noise, rng)?.depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraMount;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_spec() -> WorldSpec {
        WorldSpec {
            extent: (20.0, 20.0),
            cell_size: 0.1,
            obstacles: vec![],
            ground_patches: vec![],
            noise: SensorNoise::default(),
            seed: 0,
            max_range: 10.0,
        }
    }

    fn level_camera(width: usize, height: usize) -> CameraModel {
        // camera 1 m above ground looking straight forward (no pitch)
        CameraModel::from_fov(
            width,
            height,
            90f64.to_radians(),
            &CameraMount { height: 1.0, forward: 0.0, pitch_down: 0.0 },
        )
    }

    #[test]
    fn empty_world_uniform_traction() {
        let w = make_world(&empty_spec(), 1).unwrap();
        assert!(w.truth_mu.data.iter().all(|&v| v == 1.0));
        assert!(w.truth_nu.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn solid_block_zeroes_cells() {
        let mut spec = empty_spec();
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::SolidBlock,
            footprint: Footprint::Rect { cx: 5.0, cy: 5.0, half_x: 1.0, half_y: 1.0 },
            height: None,
            mu_override: None,
            nu_override: None,
            material: None,
        });
        let w = make_world(&spec, 1).unwrap();
        assert_eq!(w.truth_at(5.0, 5.0), (0.0, 0.0));
        assert_eq!(w.truth_at(2.0, 2.0), (1.0, 1.0));
        // all truth values within [0,1]
        assert!(w.truth_mu.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn world_generation_deterministic() {
        let mut spec = empty_spec();
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::TallGrassPatch,
            footprint: Footprint::Circle { cx: 8.0, cy: 8.0, radius: 2.0 },
            height: None,
            mu_override: None,
            nu_override: None,
            material: None,
        });
        let a = make_world(&spec, 42).unwrap();
        let b = make_world(&spec, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = empty_spec();
        spec.cell_size = -1.0;
        assert!(make_world(&spec, 0).is_err());

        let mut spec = empty_spec();
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::SolidBlock,
            footprint: Footprint::Rect { cx: 25.0, cy: 5.0, half_x: 1.0, half_y: 1.0 },
            height: None,
            mu_override: None,
            nu_override: None,
            material: None,
        });
        assert!(make_world(&spec, 0).is_err());
    }

    #[test]
    fn tall_grass_visible_but_traversable() {
        let mut spec = empty_spec();
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::TallGrassPatch,
            footprint: Footprint::Rect { cx: 10.0, cy: 10.0, half_x: 2.0, half_y: 2.0 },
            height: None,
            mu_override: None,
            nu_override: None,
            material: None,
        });
        let w = make_world(&spec, 0).unwrap();
        let ob = &w.obstacles[0];
        assert!(ob.visible_to_depth);
        assert!(ob.mu_override > 0.9 && ob.nu_override > 0.9);
        let (mu, _) = w.truth_at(10.0, 10.0);
        assert!(mu > 0.9);
    }

    #[test]
    fn sense_pose_zero_noise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pose = State2D::new(3.0, 4.0, 0.5);
        let z = sense_pose(&pose, &SensorNoise::default(), &mut rng);
        assert_eq!(z.px, 3.0);
        assert_eq!(z.py, 4.0);
        assert_eq!(z.theta_compass, 0.5);
    }

    #[test]
    fn sense_pose_compass_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = SensorNoise { compass_offset: 0.3, ..Default::default() };
        let z = sense_pose(&State2D::new(0.0, 0.0, 0.1), &noise, &mut rng);
        assert_relative_eq!(z.theta_compass, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn sense_pose_noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = SensorNoise { gnss_sigma: 0.05, ..Default::default() };
        let pose = State2D::new(1.0, 1.0, 0.0);
        let n = 10_000;
        let mut errs = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let z = sense_pose(&pose, &noise, &mut rng);
            errs.push(z.px - pose.px);
            errs.push(z.py - pose.py);
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errs.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 0.05).abs() / 0.05 < 0.05, "sample std {std} not within 5% of 0.05");
    }

    #[test]
    fn step_truth_matches_model_step() {
        let w = make_world(&empty_spec(), 0).unwrap();
        let x = State2D::new(1.0, 1.0, 0.0);
        let (next, clamped) = step_truth(&x, &Control::new(1.0, 0.0), &w, 0.1);
        assert!(!clamped);
        assert_relative_eq!(next.px, 1.1, epsilon = 1e-12);

        // zero-traction cell: position frozen
        let mut spec = empty_spec();
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::SolidBlock,
            footprint: Footprint::Rect { cx: 1.0, cy: 1.0, half_x: 0.5, half_y: 0.5 },
            height: None,
            mu_override: None,
            nu_override: None,
            material: None,
        });
        let w = make_world(&spec, 0).unwrap();
        let (next, _) = step_truth(&x, &Control::new(1.0, 0.5), &w, 0.1);
        assert_eq!((next.px, next.py), (1.0, 1.0));
    }

    #[test]
    fn step_truth_clamps_at_boundary() {
        let w = make_world(&empty_spec(), 0).unwrap();
        let x = State2D::new(19.95, 10.0, 0.0);
        let (next, clamped) = step_truth(&x, &Control::new(1.0, 0.0), &w, 1.0);
        assert!(clamped);
        assert!(next.px < 20.0);
    }

    #[test]
    fn wall_ahead_principal_pixel_depth() {
        let mut spec = empty_spec();
        // wall 2 m ahead of a camera at x=5 looking +x
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::SolidBlock,
            footprint: Footprint::Rect { cx: 7.05, cy: 5.0, half_x: 0.05, half_y: 3.0 },
            height: Some(3.0),
            mu_override: None,
            nu_override: None,
            material: None,
        });
        let w = make_world(&spec, 0).unwrap();
        let cam = level_camera(33, 25); // odd resolution: principal point on a pixel
        let obs = render_observation(
            &w,
            &cam,
            &State2D::new(5.0, 5.0, 0.0),
            &Attitude3D::default(),
            &SensorNoise::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let u = cam.cx as usize;
        let v = cam.cy as usize;
        assert_relative_eq!(obs.depth.get(u, v), 2.0, epsilon = 1e-6);
        assert_eq!(obs.material[v * cam.width + u], Material::Structure as u8);

        // yawed 90 degrees away: ray misses the wall, hits nothing at the
        // principal pixel except ground beyond max range -> invalid
        let obs2 = render_observation(
            &w,
            &cam,
            &State2D::new(5.0, 5.0, std::f64::consts::FRAC_PI_2),
            &Attitude3D::default(),
            &SensorNoise::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(!obs2.depth.is_valid(u, v));
    }

    #[test]
    fn empty_world_level_camera_center_invalid() {
        let w = make_world(&empty_spec(), 0).unwrap();
        let cam = level_camera(33, 25);
        let obs = render_observation(
            &w,
            &cam,
            &State2D::new(10.0, 10.0, 0.0),
            &Attitude3D::default(),
            &SensorNoise::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        // the principal ray is parallel to the ground: no hit within range
        let u = cam.cx as usize;
        let v = cam.cy as usize;
        assert!(!obs.depth.is_valid(u, v));
    }

    #[test]
    fn cylinder_depth_closed_form() {
        let mut spec = empty_spec();
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::SolidCylinder,
            footprint: Footprint::Circle { cx: 8.0, cy: 5.0, radius: 0.5 },
            height: Some(3.0),
            mu_override: None,
            nu_override: None,
            material: None,
        });
        let w = make_world(&spec, 0).unwrap();
        let cam = level_camera(33, 25);
        let obs = render_observation(
            &w,
            &cam,
            &State2D::new(5.0, 5.0, 0.0),
            &Attitude3D::default(),
            &SensorNoise::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        // principal ray along +x hits the cylinder at x = 8 - 0.5
        let u = cam.cx as usize;
        let v = cam.cy as usize;
        assert_relative_eq!(obs.depth.get(u, v), 2.5, epsilon = 1e-6);
    }

    #[test]
    fn ditch_invisible_to_depth() {
        let mut spec = empty_spec();
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::Ditch,
            footprint: Footprint::Rect { cx: 7.0, cy: 5.0, half_x: 0.5, half_y: 3.0 },
            height: None,
            mu_override: None,
            nu_override: None,
            material: None,
        });
        let w = make_world(&spec, 0).unwrap();
        assert_eq!(w.truth_at(7.0, 5.0), (0.0, 0.0));
        let cam = CameraModel::from_fov(33, 25, 90f64.to_radians(), &CameraMount::default());
        let obs = render_observation(
            &w,
            &cam,
            &State2D::new(5.0, 5.0, 0.0),
            &Attitude3D::default(),
            &SensorNoise::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        // pitched-down camera sees ground there, never a "ditch" material
        assert!(obs.material.iter().all(|&m| m != Material::Structure as u8));
    }

    #[test]
    fn rendering_deterministic() {
        let mut spec = empty_spec();
        spec.noise.depth_sigma = 0.01;
        spec.noise.depth_dropout_rate = 0.1;
        spec.obstacles.push(ObstacleSpec {
            kind: ObstacleKind::SolidBlock,
            footprint: Footprint::Rect { cx: 8.0, cy: 5.0, half_x: 1.0, half_y: 1.0 },
            height: None,
            mu_override: None,
            nu_override: None,
            material: None,
        });
        let w = make_world(&spec, 0).unwrap();
        let cam = CameraModel::from_fov(16, 12, 90f64.to_radians(), &CameraMount::default());
        let pose = State2D::new(5.0, 5.0, 0.0);
        let a = render_observation(&w, &cam, &pose, &Attitude3D::default(), &spec.noise, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = render_observation(&w, &cam, &pose, &Attitude3D::default(), &spec.noise, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
