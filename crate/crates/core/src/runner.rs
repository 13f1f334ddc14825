//! Orchestration: closed-loop simulation ticks (sense → estimate → fuse →
//! predict → control → actuate), scripted data collection, training,
//! evaluation, and artifact emission. Library functions behind the CLI.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::observation_to_input;
use crate::camera::{Attitude3D, CameraModel, CameraMount, DepthBins};
use crate::bev::VoxelGridSpec;
use crate::controller::{
    advance_waypoint, scale_angular_channel, solve_mpc, MpcConfig, MpcState, Reference,
};
use crate::error::{Error, Result};
use crate::estimator::{run_labeling, EstimatorConfig, LabeledStep};
use crate::grid::TraversabilityMap;
use crate::io::{
    ensure_dir, save_dataset, save_model, write_overview_png, write_trajectory_csv, write_trav_pgm,
    CsvWriter, Manifest,
};
use crate::kinodynamics::{Control, State2D, Trajectory};
use crate::model::{FrameInput, ModelConfig, TravNet, Variant};
use crate::trainer::{build_dataset, mean_abs_error, train, LossConfig, TrainingTuple};
use crate::util::{angle_diff, wrap_angle};
use crate::world::{make_world, render_observation, sense_pose, step_truth, Observation, World, WorldSpec};

/// Camera description as it appears in scenario JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub mount_height: f64,
    pub mount_forward: f64,
    pub pitch_down_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 24,
            hfov_deg: 90.0,
            mount_height: 0.3,
            mount_forward: 0.0,
            pitch_down_deg: 15.0,
        }
    }
}

impl CameraConfig {
    pub fn to_model(&self) -> Result<CameraModel> {
        let cam = CameraModel::from_fov(
            self.width,
            self.height,
            self.hfov_deg.to_radians(),
            &CameraMount {
                height: self.mount_height,
                forward: self.mount_forward,
                pitch_down: self.pitch_down_deg.to_radians(),
            },
        );
        cam.validate()?;
        Ok(cam)
    }
}

/// Everything one scenario needs, loadable from a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub world: WorldSpec,
    pub camera: CameraConfig,
    pub estimator: EstimatorConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub mpc: MpcConfig,
    /// Mission waypoints for `navigate`.
    pub waypoints: Vec<(f64, f64)>,
    pub arrival_radius: f64,
    /// Start pose (x, y, heading).
    pub start: (f64, f64, f64),
    pub tick_rate: f64,
    pub max_ticks: usize,
    pub seed: u64,
    /// Scripted teleoperation targets for `collect` (cycled).
    pub collect_waypoints: Vec<(f64, f64)>,
    pub collect_ticks: usize,
    /// Exploration noise on the teleop controls (sigma_v, sigma_omega).
    pub teleop_noise: (f64, f64),
    /// Ticks before the teleop gives up on an unreachable target and moves
    /// to the next one (deliberate low-traction traversals end this way).
    pub teleop_waypoint_timeout: usize,
    /// Half the label window: 2m poses around each anchor.
    pub label_half_window: usize,
    /// Consecutive stuck ticks before a navigation abort.
    pub stuck_limit: usize,
}

impl ScenarioConfig {
    /// A workable configuration for a given world; tests and `worldgen`
    /// start from this.
    pub fn default_for(world: WorldSpec) -> Self {
        let grid = VoxelGridSpec {
            origin: (-1.0, -4.0, -0.05),
            cell_xy: 0.25,
            cell_z: 0.3,
            nx: 32,
            ny: 32,
            nz: 4,
        };
        Self {
            world,
            camera: CameraConfig::default(),
            estimator: EstimatorConfig::default(),
            model: ModelConfig {
                context_channels: 4,
                bins: DepthBins::new(0.5, 8.0, 16).expect("static bins"),
                grid,
                frames: 3,
                variant: Variant::VoxelTemporal,
            },
            loss: LossConfig::default(),
            mpc: MpcConfig::default(),
            waypoints: vec![],
            arrival_radius: 0.5,
            start: (1.0, 1.0, 0.0),
            tick_rate: 10.0,
            max_ticks: 600,
            seed: 0,
            collect_waypoints: vec![],
            collect_ticks: 400,
            teleop_noise: (0.1, 0.3),
            teleop_waypoint_timeout: 100,
            label_half_window: 3,
            stuck_limit: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tick_rate <= 0.0 {
            return Err(Error::InvalidConfig("tick_rate must be positive".into()));
        }
        if self.arrival_radius <= 0.0 {
            return Err(Error::InvalidConfig("arrival_radius must be positive".into()));
        }
        if self.label_half_window == 0 {
            return Err(Error::InvalidConfig("label_half_window must be >= 1".into()));
        }
        self.camera.to_model()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.mpc.validate()?;
        self.estimator.validate()?;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Closed-loop mission outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub success: bool,
    pub ticks_used: usize,
    pub path_length: f64,
    /// Minimum ground-truth linear traction the robot actually crossed.
    pub min_traversability_crossed: f64,
    pub final_pose: State2D,
    pub reason: String,
}

/// What drives the traversability prediction during navigation.
pub enum Planner {
    /// Trained network.
    Model(Box<TravNet>),
    /// Occupancy-as-obstacle baseline: any return above the ground clearance
    /// zeroes the cell. No learning involved.
    Geometric { clearance_z: f64 },
}

/// Build the per-tick traversability map in the robot frame.
fn plan_map(
    planner: &Planner,
    cfg: &ScenarioConfig,
    camera: &CameraModel,
    history: &[(State2D, Observation)],
) -> Result<TraversabilityMap> {
    let (pose_now, _) = history.last().expect("non-empty history");
    match planner {
        Planner::Model(net) => {
            let used = net.cfg.frames;
            let frames: Vec<FrameInput> = padded_frames(history, used, cfg, pose_now);
            net.predict(&frames)
        }
        Planner::Geometric { clearance_z } => {
            let (_, obs) = history.last().unwrap();
            let spec = cfg.model.grid;
            let occ = crate::bev::depth_to_occupancy(
                &obs.depth,
                camera,
                &camera.extrinsic,
                &spec,
            )?;
            let mut map = TraversabilityMap::uniform(
                spec.nx,
                spec.ny,
                (spec.origin.0, spec.origin.1),
                spec.cell_xy,
                1.0,
                1.0,
            );
            let n2 = spec.nx * spec.ny;
            for iz in 0..spec.nz {
                // skip layers that can contain ground returns: only voxels
                // entirely above the clearance height count as obstacles
                let z_lo = spec.origin.2 + iz as f64 * spec.cell_z;
                if z_lo < *clearance_z {
                    continue;
                }
                for j in 0..n2 {
                    if occ.data[iz * n2 + j] > 0.0 {
                        map.mu.data[j] = 0.0;
                        map.nu.data[j] = 0.0;
                    }
                }
            }
            Ok(map)
        }
    }
}

/// Global route for the geometric baseline: A* over an occupancy-as-obstacle
/// grid of the static geometry (anything a depth sensor would return above
/// the ground clearance), inflated by the robot clearance, then simplified by
/// line-of-sight. Returns the mission waypoints expanded into a detour route;
/// falls back to the raw waypoints when no route exists.
fn geometric_route(
    world: &crate::world::World,
    spec: &WorldSpec,
    clearance_z: f64,
    start: (f64, f64),
    waypoints: &[(f64, f64)],
) -> Vec<(f64, f64)> {
    let cs = spec.cell_size;
    let nx = (spec.extent.0 / cs).ceil() as usize;
    let ny = (spec.extent.1 / cs).ceil() as usize;
    let center = |ix: usize, iy: usize| ((ix as f64 + 0.5) * cs, (iy as f64 + 0.5) * cs);
    let mut blocked = vec![false; nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            let (x, y) = center(ix, iy);
            if world
                .obstacles
                .iter()
                .any(|ob| ob.visible_to_depth && ob.height > clearance_z && ob.footprint.contains(x, y))
            {
                blocked[iy * nx + ix] = true;
            }
        }
    }
    // inflate by ~0.5 m so route corners keep distance from the geometry
    let inflate = (0.5 / cs).ceil() as isize;
    let mut inflated = blocked.clone();
    for iy in 0..ny as isize {
        for ix in 0..nx as isize {
            if !blocked[iy as usize * nx + ix as usize] {
                continue;
            }
            for dy in -inflate..=inflate {
                for dx in -inflate..=inflate {
                    let (jx, jy) = (ix + dx, iy + dy);
                    if jx >= 0 && jy >= 0 && (jx as usize) < nx && (jy as usize) < ny {
                        inflated[jy as usize * nx + jx as usize] = true;
                    }
                }
            }
        }
    }
    let cell_of = |x: f64, y: f64| {
        (
            ((x / cs) as usize).min(nx - 1),
            ((y / cs) as usize).min(ny - 1),
        )
    };
    let free = |c: (usize, usize)| !inflated[c.1 * nx + c.0];
    // straight segment between cell centers staying in free cells?
    let line_free = |a: (f64, f64), b: (f64, f64)| {
        let d = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let steps = (d / (0.25 * cs)).ceil().max(1.0) as usize;
        (0..=steps).all(|i| {
            let t = i as f64 / steps as f64;
            free(cell_of(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)))
        })
    };
    let astar = |from: (usize, usize), to: (usize, usize)| -> Option<Vec<(usize, usize)>> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        if !free(from) || !free(to) {
            return None;
        }
        let idx = |c: (usize, usize)| c.1 * nx + c.0;
        let h = |c: (usize, usize)| {
            let (dx, dy) = ((c.0 as f64 - to.0 as f64).abs(), (c.1 as f64 - to.1 as f64).abs());
            let (lo, hi) = (dx.min(dy), dx.max(dy));
            hi - lo + lo * std::f64::consts::SQRT_2
        };
        let mut dist = vec![f64::INFINITY; nx * ny];
        let mut prev = vec![usize::MAX; nx * ny];
        let mut heap = BinaryHeap::new();
        dist[idx(from)] = 0.0;
        heap.push(Reverse((ordered_float(h(from)), idx(from))));
        while let Some(Reverse((_, i))) = heap.pop() {
            let c = (i % nx, i / nx);
            if c == to {
                let mut path = vec![c];
                let mut j = i;
                while prev[j] != usize::MAX {
                    j = prev[j];
                    path.push((j % nx, j / nx));
                }
                path.reverse();
                return Some(path);
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (jx, jy) = (c.0 as i64 + dx, c.1 as i64 + dy);
                    if jx < 0 || jy < 0 || jx as usize >= nx || jy as usize >= ny {
                        continue;
                    }
                    let n = (jx as usize, jy as usize);
                    if !free(n) {
                        continue;
                    }
                    // no corner cutting on diagonal moves
                    if dx != 0 && dy != 0 && (!free((n.0, c.1)) || !free((c.0, n.1))) {
                        continue;
                    }
                    let step = if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                    let nd = dist[i] + step;
                    if nd < dist[idx(n)] {
                        dist[idx(n)] = nd;
                        prev[idx(n)] = i;
                        heap.push(Reverse((ordered_float(nd + h(n)), idx(n))));
                    }
                }
            }
        }
        None
    };
    let mut route: Vec<(f64, f64)> = Vec::new();
    let mut cursor = start;
    for &goal in waypoints {
        match astar(cell_of(cursor.0, cursor.1), cell_of(goal.0, goal.1)) {
            Some(cells) => {
                // greedy line-of-sight simplification over the cell path
                let pts: Vec<(f64, f64)> = cells.iter().map(|&(ix, iy)| center(ix, iy)).collect();
                let mut i = 0;
                while i + 1 < pts.len() {
                    let mut j = pts.len() - 1;
                    while j > i + 1 && !line_free(pts[i], pts[j]) {
                        j -= 1;
                    }
                    route.push(pts[j]);
                    i = j;
                }
                // land exactly on the mission waypoint
                route.pop();
                route.push(goal);
            }
            None => route.push(goal),
        }
        cursor = goal;
    }
    route
}

/// Total order for the A* heap; costs are finite and non-negative, where the
/// IEEE bit pattern is monotone in the value.
fn ordered_float(v: f64) -> u64 {
    debug_assert!(v >= 0.0);
    v.to_bits()
}

/// Last `used` frames from the history, repeated-padded at the front,
/// with poses re-expressed relative to the current pose.
fn padded_frames(
    history: &[(State2D, Observation)],
    used: usize,
    cfg: &ScenarioConfig,
    reference: &State2D,
) -> Vec<FrameInput> {
    let mut picks: Vec<&(State2D, Observation)> = Vec::with_capacity(used);
    let n = history.len();
    for i in 0..used {
        let idx = (n + i).saturating_sub(used).min(n - 1);
        picks.push(&history[idx]);
    }
    picks
        .into_iter()
        .map(|(pose, obs)| FrameInput {
            input: observation_to_input(obs, cfg.world.max_range),
            occ_depth: obs.depth.clone(),
            rel_pose: crate::trainer::relative_pose(reference, pose),
        })
        .collect()
}

/// Run the closed loop until the mission completes or a limit trips.
/// Writes trajectory CSV, tick diagnostics CSV, overview PNG, and
/// `report.json` when `out` is given.
pub fn run_navigate(
    cfg: &ScenarioConfig,
    planner: &Planner,
    seed: u64,
    out: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.waypoints.is_empty() {
        return Err(Error::InvalidConfig("navigate needs at least one waypoint".into()));
    }
    let world = make_world(&cfg.world, cfg.world.seed)?;
    let camera = cfg.camera.to_model()?;
    let dt = cfg.dt();
    let mut mpc_cfg = cfg.mpc.clone();
    mpc_cfg.dt = dt;
    let attitude = Attitude3D { roll: 0.0, pitch: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut truth = State2D::new(cfg.start.0, cfg.start.1, cfg.start.2);
    // the geometric baseline plans a global detour around anything it treats
    // as an obstacle; the learned planner works from the mission waypoints
    let mission = match planner {
        Planner::Geometric { clearance_z } => {
            geometric_route(&world, &cfg.world, *clearance_z, (truth.px, truth.py), &cfg.waypoints)
        }
        Planner::Model(_) => cfg.waypoints.clone(),
    };
    let mut reference = Reference::new(mission, cfg.arrival_radius)?;
    let mut mpc_state = MpcState::new();
    let mut history: Vec<(State2D, Observation)> = Vec::new();
    let mut states = vec![truth];
    let mut min_mu = f64::INFINITY;
    let mut stuck_run = 0usize;
    let mut ticks = 0usize;
    let mut success = false;
    let mut reason = String::from("max_ticks reached");

    let mut diag = match out {
        Some(dir) => {
            ensure_dir(dir)?;
            Some(CsvWriter::create(
                &dir.join("ticks.csv"),
                &["tick", "v", "omega", "best_cost", "stuck", "waypoint_x", "waypoint_y"],
            )?)
        }
        None => None,
    };

    for tick in 0..cfg.max_ticks {
        ticks = tick + 1;
        // sense
        let z = sense_pose(&truth, &cfg.world.noise, &mut rng);
        let pose_est = State2D::new(z.px, z.py, wrap_angle(z.theta_compass));
        let obs = render_observation(&world, &camera, &truth, &attitude, &cfg.world.noise, &mut rng)?;
        history.push((pose_est, obs));
        let keep = cfg.model.frames.max(1) + 2;
        if history.len() > keep {
            history.drain(0..history.len() - keep);
        }

        // waypoint bookkeeping in the world frame
        let (next_ref, complete) = advance_waypoint(&pose_est, &reference);
        reference = next_ref;
        if complete {
            success = true;
            reason = "mission complete".into();
            break;
        }

        // predict in the robot frame
        let mut map = plan_map(planner, cfg, &camera, &history)?;
        if (mpc_cfg.angular_scale - 1.0).abs() > 1e-12 {
            map = scale_angular_channel(&map, mpc_cfg.angular_scale)?;
        }

        // control in the robot frame
        let local_wps: Vec<(f64, f64)> = reference
            .waypoints
            .iter()
            .map(|&(x, y)| pose_est.world_to_local(x, y))
            .collect();
        let local_ref = Reference::new(local_wps, cfg.arrival_radius)?;
        let x0 = State2D::new(0.0, 0.0, 0.0);
        let mpc_seed = seed ^ (tick as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let sol = solve_mpc(&x0, &local_ref, &map, &mpc_cfg, &mut mpc_state, mpc_seed)?;
        if sol.diagnostics.stuck {
            stuck_run += 1;
            if stuck_run > cfg.stuck_limit {
                reason = "stuck limit exceeded".into();
                break;
            }
        } else {
            stuck_run = 0;
        }
        if let Some(w) = diag.as_mut() {
            let (wx, wy) = reference.current().unwrap_or((f64::NAN, f64::NAN));
            w.row_f64(&[
                tick as f64,
                sol.u_first.v,
                sol.u_first.omega,
                sol.diagnostics.best_cost,
                if sol.diagnostics.stuck { 1.0 } else { 0.0 },
                wx,
                wy,
            ])?;
        }

        // actuate
        let (next, _clamped) = step_truth(&truth, &sol.u_first, &world, dt);
        truth = next;
        states.push(truth);
        let (mu, _) = world.truth_at(truth.px, truth.py);
        min_mu = min_mu.min(mu);
    }
    if !success && reason == "max_ticks reached" && reference.complete() {
        success = true;
        reason = "mission complete".into();
    }

    let traj = Trajectory { states, dt };
    let report = RunReport {
        success,
        ticks_used: ticks,
        path_length: traj.path_length(),
        min_traversability_crossed: if min_mu.is_finite() { min_mu } else { 1.0 },
        final_pose: truth,
        reason,
    };
    if let Some(dir) = out {
        if let Some(w) = diag.take() {
            w.finish()?;
        }
        write_trajectory_csv(&dir.join("trajectory.csv"), &traj)?;
        let final_map = plan_map(planner, cfg, &camera, &history)?;
        write_overview_png(
            &dir.join("overview.png"),
            &world,
            &traj,
            Some((&final_map, &truth)),
            &cfg.waypoints,
        )?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        let mut manifest = Manifest::new("navigate", seed);
        manifest.add("trajectory", "trajectory.csv");
        manifest.add("ticks", "ticks.csv");
        manifest.add("overview", "overview.png");
        manifest.add("report", "report.json");
        manifest.save(dir)?;
    }
    Ok(report)
}

/// Everything `collect` produced, before persistence.
pub struct CollectResult {
    pub tuples: Vec<TrainingTuple>,
    pub skipped: usize,
    pub labels: Vec<LabeledStep>,
    pub trajectory: Trajectory,
}

/// Scripted teleoperation: waypoint-seeking proportional steering with
/// exploration noise, cycling through `collect_waypoints`. Logs sensors,
/// runs the estimator over the log, and assembles training tuples.
pub fn run_collect(cfg: &ScenarioConfig, seed: u64) -> Result<CollectResult> {
    cfg.validate()?;
    if cfg.collect_waypoints.is_empty() {
        return Err(Error::InvalidConfig("collect needs collect_waypoints".into()));
    }
    let world = make_world(&cfg.world, cfg.world.seed)?;
    let camera = cfg.camera.to_model()?;
    let dt = cfg.dt();
    let attitude = Attitude3D { roll: 0.0, pitch: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut truth = State2D::new(cfg.start.0, cfg.start.1, cfg.start.2);
    let mut target_idx = 0usize;
    let mut ticks_on_target = 0usize;
    let mut measurements = Vec::with_capacity(cfg.collect_ticks + 1);
    let mut observations = Vec::with_capacity(cfg.collect_ticks + 1);
    let mut controls = Vec::with_capacity(cfg.collect_ticks);
    let mut states = vec![truth];

    for _ in 0..=cfg.collect_ticks {
        measurements.push(sense_pose(&truth, &cfg.world.noise, &mut rng));
        observations.push(render_observation(&world, &camera, &truth, &attitude, &cfg.world.noise, &mut rng)?);
        if measurements.len() > cfg.collect_ticks {
            break;
        }
        let (tx, ty) = cfg.collect_waypoints[target_idx % cfg.collect_waypoints.len()];
        let d = ((truth.px - tx).powi(2) + (truth.py - ty).powi(2)).sqrt();
        ticks_on_target += 1;
        let timed_out =
            cfg.teleop_waypoint_timeout > 0 && ticks_on_target >= cfg.teleop_waypoint_timeout;
        if d < cfg.arrival_radius || timed_out {
            target_idx += 1;
            ticks_on_target = 0;
        }
        let bearing = (ty - truth.py).atan2(tx - truth.px);
        let err = angle_diff(bearing, truth.theta);
        let v = cfg.mpc.v_cruise + cfg.teleop_noise.0 * rng.gen_range(-1.0..1.0);
        let omega = (2.0 * err).clamp(-cfg.mpc.limits.omega_max, cfg.mpc.limits.omega_max)
            + cfg.teleop_noise.1 * rng.gen_range(-1.0..1.0);
        let u = Control::new(v, omega).clamped(&cfg.mpc.limits);
        controls.push(u);
        let (next, _) = step_truth(&truth, &u, &world, dt);
        truth = next;
        states.push(truth);
    }

    let mut est_cfg = cfg.estimator.clone();
    est_cfg.dt = dt;
    let labels = run_labeling(&measurements, &controls, &est_cfg)?;
    let aligned_obs = &observations[..labels.len()];
    let (tuples, skipped) = build_dataset(
        aligned_obs,
        &labels,
        cfg.model.frames,
        cfg.label_half_window,
        cfg.world.max_range,
    )?;
    Ok(CollectResult { tuples, skipped, labels, trajectory: Trajectory { states, dt } })
}

/// `collect` with persistence: dataset blobs, labels CSV, trajectory CSV,
/// and the manifest, all under `out`.
pub fn cmd_collect(cfg: &ScenarioConfig, seed: u64, out: &Path) -> Result<CollectResult> {
    let result = run_collect(cfg, seed)?;
    if result.tuples.is_empty() {
        return Err(Error::InvalidInput("collection produced no training tuples".into()));
    }
    ensure_dir(out)?;
    let dataset_dir = out.join("dataset");
    save_dataset(&dataset_dir, &result.tuples)?;
    let mut w = CsvWriter::create(&out.join("labels.csv"), &["px", "py", "theta", "mu", "nu", "excitation"])?;
    for l in &result.labels {
        w.row_f64(&[
            l.pose.px,
            l.pose.py,
            l.pose.theta,
            l.mu,
            l.nu,
            if l.excitation_flag { 1.0 } else { 0.0 },
        ])?;
    }
    w.finish()?;
    write_trajectory_csv(&out.join("trajectory.csv"), &result.trajectory)?;
    let mut manifest = Manifest::new("collect", seed);
    manifest.add_counted("dataset", "dataset", result.tuples.len());
    manifest.add("labels", "labels.csv");
    manifest.add("trajectory", "trajectory.csv");
    manifest.save(out)?;
    Ok(result)
}

pub struct TrainOutcome {
    pub net: TravNet,
    pub curve: Vec<(f64, f64)>,
    pub final_train_loss: f64,
}

/// Deterministic 80/20 split, shuffled by seed.
pub fn split_dataset(tuples: &[TrainingTuple], seed: u64) -> (Vec<TrainingTuple>, Vec<TrainingTuple>) {
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (tuples.len() / 5).max(1).min(tuples.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    (
        train_idx.iter().map(|&i| tuples[i].clone()).collect(),
        val_idx.iter().map(|&i| tuples[i].clone()).collect(),
    )
}

/// Train a fresh network on in-memory tuples.
pub fn run_train(cfg: &ScenarioConfig, tuples: &[TrainingTuple], seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tuples.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let camera = cfg.camera.to_model()?;
    let mut net = TravNet::new(cfg.model.clone(), camera)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_random(&mut rng, 0.1);
    let (train_set, val_set) = split_dataset(tuples, seed);
    let mut loss_cfg = cfg.loss.clone();
    loss_cfg.rng_seed = seed;
    let curve = train(&train_set, &val_set, &mut net, &loss_cfg)?;
    let final_train_loss = curve.last().map(|c| c.0).unwrap_or(f64::NAN);
    Ok(TrainOutcome { net, curve, final_train_loss })
}

/// `train` with persistence: model binary + descriptor, loss-curve CSV,
/// manifest.
pub fn cmd_train(cfg: &ScenarioConfig, dataset_dir: &Path, seed: u64, out: &Path) -> Result<TrainOutcome> {
    let tuples = crate::io::load_dataset(dataset_dir)?;
    let outcome = run_train(cfg, &tuples, seed)?;
    ensure_dir(out)?;
    save_model(&out.join("model.bin"), &outcome.net)?;
    let mut w = CsvWriter::create(&out.join("loss_curve.csv"), &["epoch", "train_loss", "val_loss"])?;
    for (i, (t, v)) in outcome.curve.iter().enumerate() {
        w.row_f64(&[i as f64, *t, *v])?;
    }
    w.finish()?;
    let mut manifest = Manifest::new("train", seed);
    manifest.add("model", "model.bin");
    manifest.add("model_descriptor", "model.json");
    manifest.add("loss_curve", "loss_curve.csv");
    manifest.save(out)?;
    Ok(outcome)
}

/// Mean absolute traversability error of each named model on a dataset.
pub fn run_eval(models: &[(String, TravNet)], tuples: &[TrainingTuple]) -> Result<Vec<(String, f64)>> {
    if tuples.is_empty() {
        return Err(Error::InvalidInput("empty evaluation dataset".into()));
    }
    models
        .iter()
        .map(|(name, net)| Ok((name.clone(), mean_abs_error(net, tuples)?)))
        .collect()
}

/// `eval` with persistence: metrics CSV and manifest.
pub fn cmd_eval(
    models: &[(String, TravNet)],
    dataset_dir: &Path,
    seed: u64,
    out: &Path,
) -> Result<Vec<(String, f64)>> {
    let tuples = crate::io::load_dataset(dataset_dir)?;
    let rows = run_eval(models, &tuples)?;
    ensure_dir(out)?;
    let mut w = CsvWriter::create(&out.join("metrics.csv"), &["model", "mean_abs_error"])?;
    for (name, err) in &rows {
        w.row(&[name.clone(), format!("{err}")])?;
    }
    w.finish()?;
    let mut manifest = Manifest::new("eval", seed);
    manifest.add_counted("metrics", "metrics.csv", rows.len());
    manifest.save(out)?;
    Ok(rows)
}

/// `worldgen`: build the world and persist its spec and truth maps.
pub fn cmd_worldgen(spec: &WorldSpec, seed: u64, out: &Path) -> Result<World> {
    let world = make_world(spec, seed)?;
    ensure_dir(out)?;
    std::fs::write(out.join("world.json"), serde_json::to_string_pretty(spec)?)?;
    write_trav_pgm(&out.join("truth_mu.pgm"), &world.truth_mu)?;
    write_trav_pgm(&out.join("truth_nu.pgm"), &world.truth_nu)?;
    let mut manifest = Manifest::new("worldgen", seed);
    manifest.add("world_spec", "world.json");
    manifest.add("truth_mu", "truth_mu.pgm");
    manifest.add("truth_nu", "truth_nu.pgm");
    manifest.save(out)?;
    Ok(world)
}
