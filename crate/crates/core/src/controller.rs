//! Sampling model predictive controller: action trajectories are drawn
//! around a warm-started nominal sequence, rolled through the
//! map-parameterized model, scored, and the first action of the selected
//! sequence is applied. Includes the min-pool clearance map post-process,
//! waypoint sequencing, and the cross-platform angular-channel scaling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TraversabilityMap;
use crate::kinodynamics::{rollout_map, ActuatorLimits, Control, State2D, Trajectory};
use crate::util::maybe_par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    BestOfN,
    /// MPPI-style softmin average of the sampled sequences.
    ExponentialWeighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub n: usize,
    pub dt: f64,
    /// Diagonal state tracking weights (x, y, heading). Heading defaults to
    /// zero: references carry no heading.
    pub q: [f64; 3],
    /// Diagonal control tracking weights (v, omega).
    pub r: [f64; 2],
    /// Diagonal terminal weights.
    pub qn: [f64; 3],
    pub w_mu: f64,
    pub w_nu: f64,
    pub num_samples: usize,
    /// Exploration noise (sigma_v, sigma_omega).
    pub noise_sigma: (f64, f64),
    pub selection: Selection,
    pub temperature: f64,
    pub clearance_k: usize,
    pub angular_scale: f64,
    pub limits: ActuatorLimits,
    /// Nominal forward reference speed.
    pub v_cruise: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            n: 30,
            dt: 0.1,
            q: [1.0, 1.0, 0.0],
            r: [0.1, 0.1],
            qn: [5.0, 5.0, 0.0],
            w_mu: 0.5,
            w_nu: 0.1,
            num_samples: 512,
            noise_sigma: (0.2, 0.5),
            selection: Selection::ExponentialWeighting,
            temperature: 0.5,
            clearance_k: 3,
            angular_scale: 1.0,
            limits: ActuatorLimits::default(),
            v_cruise: 0.6,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.num_samples == 0 {
            return Err(Error::InvalidConfig("n and num_samples must be >= 1".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        if self.q.iter().chain(&self.qn).any(|&w| w < 0.0) || self.r.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig("tracking weights must be non-negative".into()));
        }
        if self.clearance_k % 2 == 0 {
            return Err(Error::InvalidConfig("clearance_k must be odd".into()));
        }
        if self.temperature <= 0.0 && self.selection == Selection::ExponentialWeighting {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.angular_scale <= 0.0 {
            return Err(Error::InvalidConfig("angular_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub waypoints: Vec<(f64, f64)>,
    pub arrival_radius: f64,
}

impl Reference {
    pub fn new(waypoints: Vec<(f64, f64)>, arrival_radius: f64) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::InvalidConfig("reference needs at least one waypoint".into()));
        }
        if arrival_radius <= 0.0 {
            return Err(Error::InvalidConfig("arrival_radius must be positive".into()));
        }
        Ok(Self { waypoints, arrival_radius })
    }

    pub fn current(&self) -> Option<(f64, f64)> {
        self.waypoints.first().copied()
    }

    pub fn complete(&self) -> bool {
        self.waypoints.is_empty()
    }
}

/// Per-channel k×k minimum filter with replicated borders. Conservative
/// clearance: a cell is only as traversable as its worst neighbor.
pub fn clearance_minpool(map: &TraversabilityMap, k: usize) -> Result<TraversabilityMap> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidInput(format!("clearance kernel must be odd, got {k}")));
    }
    let mut out = map.clone();
    if k == 1 {
        return Ok(out);
    }
    let r = (k / 2) as isize;
    let (nx, ny) = (map.mu.nx as isize, map.mu.ny as isize);
    for (src, dst) in [(&map.mu, &mut out.mu), (&map.nu, &mut out.nu)] {
        for iy in 0..ny {
            for ix in 0..nx {
                let mut m = f64::INFINITY;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (ix + dx).clamp(0, nx - 1) as usize;
                        let sy = (iy + dy).clamp(0, ny - 1) as usize;
                        m = m.min(src.data[sy * nx as usize + sx]);
                    }
                }
                dst.data[(iy * nx + ix) as usize] = m;
            }
        }
    }
    Ok(out)
}

/// Multiply the angular (nu) channel by `factor`, clamped to [0, 1]. The mu
/// channel is untouched.
pub fn scale_angular_channel(map: &TraversabilityMap, factor: f64) -> Result<TraversabilityMap> {
    if factor <= 0.0 {
        return Err(Error::InvalidInput("angular scale factor must be positive".into()));
    }
    let mut out = map.clone();
    for v in out.nu.data.iter_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Quadratic tracking cost minus the traversability reward.
///
/// `traj` must hold n+1 states produced under `cfg.dt`; the reward sums over
/// all n+1 states while tracking sums over the first n plus a terminal term.
pub fn trajectory_cost(
    traj: &Trajectory,
    controls: &[Control],
    reference: &Reference,
    map: &TraversabilityMap,
    cfg: &MpcConfig,
) -> f64 {
    let (wx, wy) = reference.current().unwrap_or((traj.states[0].px, traj.states[0].py));
    let n = controls.len();
    let mut cost = 0.0;
    for i in 0..n {
        let x = &traj.states[i];
        let ex = x.px - wx;
        let ey = x.py - wy;
        cost += cfg.q[0] * ex * ex + cfg.q[1] * ey * ey;
        let ev = controls[i].v - cfg.v_cruise;
        let ew = controls[i].omega;
        cost += cfg.r[0] * ev * ev + cfg.r[1] * ew * ew;
    }
    let xn = &traj.states[n];
    let ex = xn.px - wx;
    let ey = xn.py - wy;
    cost += cfg.qn[0] * ex * ex + cfg.qn[1] * ey * ey;
    for x in &traj.states {
        let (mu, nu) = map.sample(x.px, x.py);
        cost -= cfg.w_mu * mu + cfg.w_nu * nu * cfg.angular_scale;
    }
    cost
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcDiagnostics {
    pub best_cost: f64,
    pub nominal_cost: f64,
    pub stuck: bool,
    pub samples_scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub u_first: Control,
    pub best_traj: Trajectory,
    /// Full selected sequence; warm-starts the next call after a one-step shift.
    pub sequence: Vec<Control>,
    pub diagnostics: MpcDiagnostics,
}

/// Persistent solver state: the warm-started nominal sequence.
#[derive(Debug, Clone, Default)]
pub struct MpcState {
    nominal: Vec<Control>,
}

impl MpcState {
    pub fn new() -> Self {
        Self::default()
    }

    fn nominal_for(&self, cfg: &MpcConfig) -> Vec<Control> {
        let mut nom = self.nominal.clone();
        nom.resize(cfg.n, Control::new(cfg.v_cruise, 0.0));
        nom
    }

    /// Shift the selected sequence by one step for the next tick.
    fn warm_start(&mut self, sequence: &[Control], cfg: &MpcConfig) {
        let mut next: Vec<Control> = sequence.iter().skip(1).copied().collect();
        next.resize(cfg.n, Control::new(cfg.v_cruise, 0.0));
        self.nominal = next;
    }
}

fn score_sequences(
    x0: &State2D,
    sequences: &[Vec<Control>],
    reference: &Reference,
    map: &TraversabilityMap,
    cfg: &MpcConfig,
) -> Vec<(f64, Trajectory)> {
    maybe_par_map(sequences, |seq| {
        let traj = rollout_map(x0, seq, map, cfg.dt);
        let cost = trajectory_cost(&traj, seq, reference, map, cfg);
        (cost, traj)
    })
}

/// Sequential scoring path, kept for the benchmark comparison.
pub fn score_sequences_seq(
    x0: &State2D,
    sequences: &[Vec<Control>],
    reference: &Reference,
    map: &TraversabilityMap,
    cfg: &MpcConfig,
) -> Vec<(f64, Trajectory)> {
    crate::util::seq_map(sequences, |seq| {
        let traj = rollout_map(x0, seq, map, cfg.dt);
        let cost = trajectory_cost(&traj, seq, reference, map, cfg);
        (cost, traj)
    })
}

#[cfg(feature = "parallel")]
pub fn score_sequences_par(
    x0: &State2D,
    sequences: &[Vec<Control>],
    reference: &Reference,
    map: &TraversabilityMap,
    cfg: &MpcConfig,
) -> Vec<(f64, Trajectory)> {
    crate::util::par_map(sequences, |seq| {
        let traj = rollout_map(x0, seq, map, cfg.dt);
        let cost = trajectory_cost(&traj, seq, reference, map, cfg);
        (cost, traj)
    })
}

/// Draw the sampled control sequences: the nominal itself plus
/// Gaussian-perturbed copies, all clipped to the actuator limits.
fn sample_sequences(nominal: &[Control], cfg: &MpcConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Control>> {
    let nv = Normal::new(0.0, cfg.noise_sigma.0).expect("sigma_v >= 0");
    let nw = Normal::new(0.0, cfg.noise_sigma.1).expect("sigma_omega >= 0");
    let mut seqs = Vec::with_capacity(cfg.num_samples);
    seqs.push(nominal.iter().map(|u| u.clamped(&cfg.limits)).collect());
    for _ in 1..cfg.num_samples {
        let seq: Vec<Control> = nominal
            .iter()
            .map(|u| {
                Control::new(u.v + nv.sample(rng), u.omega + nw.sample(rng)).clamped(&cfg.limits)
            })
            .collect();
        seqs.push(seq);
    }
    seqs
}

/// One MPC solve over caller-provided candidate sequences. Used directly by
/// the lattice oracle and internally by [`solve_mpc`].
pub fn solve_mpc_with_samples(
    x0: &State2D,
    reference: &Reference,
    map: &TraversabilityMap,
    cfg: &MpcConfig,
    sequences: Vec<Vec<Control>>,
) -> Result<MpcSolution> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::InvalidInput("no candidate sequences".into()));
    }
    let clear = clearance_minpool(map, cfg.clearance_k)?;
    let (mu0, _) = clear.sample(x0.px, x0.py);
    if mu0 <= 1e-9 {
        let traj = rollout_map(x0, &vec![Control::zero(); cfg.n], &clear, cfg.dt);
        return Ok(MpcSolution {
            u_first: Control::zero(),
            best_traj: traj,
            sequence: vec![Control::zero(); cfg.n],
            diagnostics: MpcDiagnostics {
                best_cost: f64::INFINITY,
                nominal_cost: f64::INFINITY,
                stuck: true,
                samples_scored: 0,
            },
        });
    }
    let scored = score_sequences(x0, &sequences, reference, &clear, cfg);
    let nominal_cost = scored[0].0;
    let best_idx = scored
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).expect("finite costs"))
        .map(|(i, _)| i)
        .unwrap();
    let best_cost = scored[best_idx].0;

    let (sequence, best_traj) = match cfg.selection {
        Selection::BestOfN => (sequences[best_idx].clone(), scored[best_idx].1.clone()),
        Selection::ExponentialWeighting => {
            // softmin weights relative to the best cost for stability
            let mut wsum = 0.0;
            let mut avg = vec![Control::zero(); cfg.n];
            for (seq, (cost, _)) in sequences.iter().zip(&scored) {
                let w = (-(cost - best_cost) / cfg.temperature).exp();
                wsum += w;
                for (a, u) in avg.iter_mut().zip(seq) {
                    a.v += w * u.v;
                    a.omega += w * u.omega;
                }
            }
            for a in avg.iter_mut() {
                a.v /= wsum;
                a.omega /= wsum;
                *a = a.clamped(&cfg.limits);
            }
            let traj = rollout_map(x0, &avg, &clear, cfg.dt);
            (avg, traj)
        }
    };
    Ok(MpcSolution {
        u_first: sequence[0],
        best_traj,
        sequence,
        diagnostics: MpcDiagnostics {
            best_cost,
            nominal_cost,
            stuck: false,
            samples_scored: scored.len(),
        },
    })
}

/// Full sampling solve with warm start: perturb the persistent nominal
/// sequence, score, select, shift.
pub fn solve_mpc(
    x0: &State2D,
    reference: &Reference,
    map: &TraversabilityMap,
    cfg: &MpcConfig,
    state: &mut MpcState,
    seed: u64,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let nominal = state.nominal_for(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = sample_sequences(&nominal, cfg, &mut rng);
    let solution = solve_mpc_with_samples(x0, reference, map, cfg, sequences)?;
    if solution.diagnostics.stuck {
        state.nominal.clear();
    } else {
        state.warm_start(&solution.sequence, cfg);
    }
    Ok(solution)
}

/// Pop the current waypoint once the state is within the arrival radius.
/// Returns (updated reference, mission_complete).
pub fn advance_waypoint(state: &State2D, reference: &Reference) -> (Reference, bool) {
    let mut out = reference.clone();
    while let Some((wx, wy)) = out.current() {
        let d = ((state.px - wx).powi(2) + (state.py - wy).powi(2)).sqrt();
        if d < out.arrival_radius {
            out.waypoints.remove(0);
        } else {
            break;
        }
    }
    let complete = out.complete();
    (out, complete)
}

/// Exhaustive constant-action candidate set over a (v, omega) lattice, for
/// oracle comparisons against the sampling solver.
pub fn lattice_sequences(cfg: &MpcConfig, v_steps: usize, omega_steps: usize) -> Vec<Vec<Control>> {
    let mut seqs = Vec::with_capacity(v_steps * omega_steps);
    for iv in 0..v_steps {
        let v = if v_steps == 1 {
            cfg.limits.v_max
        } else {
            cfg.limits.v_max * iv as f64 / (v_steps - 1) as f64
        };
        for iw in 0..omega_steps {
            let omega = if omega_steps == 1 {
                0.0
            } else {
                -cfg.limits.omega_max
                    + 2.0 * cfg.limits.omega_max * iw as f64 / (omega_steps - 1) as f64
            };
            seqs.push(vec![Control::new(v, omega); cfg.n]);
        }
    }
    seqs
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uniform_map(v: f64) -> TraversabilityMap {
        TraversabilityMap::uniform(20, 20, (-5.0, -5.0), 0.5, v, v)
    }

    #[test]
    fn minpool_k1_identity() {
        let mut map = uniform_map(1.0);
        map.mu.set(3, 4, 0.2);
        let out = clearance_minpool(&map, 1).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn minpool_single_zero_k3_block() {
        let mut map = TraversabilityMap::uniform(9, 9, (0.0, 0.0), 1.0, 1.0, 1.0);
        map.mu.set(4, 4, 0.0);
        let out = clearance_minpool(&map, 3).unwrap();
        for iy in 0..9 {
            for ix in 0..9 {
                let expect = if (3..=5).contains(&ix) && (3..=5).contains(&iy) { 0.0 } else { 1.0 };
                assert_eq!(out.mu.data[iy * 9 + ix], expect, "cell ({ix},{iy})");
            }
        }
        // nu channel untouched by the mu zero
        assert!(out.nu.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn minpool_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut map = uniform_map(0.0);
        for v in map.mu.data.iter_mut().chain(map.nu.data.iter_mut()) {
            *v = rand::Rng::gen_range(&mut rng, 0.0..1.0);
        }
        let k3 = clearance_minpool(&map, 3).unwrap();
        let k5 = clearance_minpool(&map, 5).unwrap();
        let k7 = clearance_minpool(&map, 7).unwrap();
        for i in 0..map.mu.data.len() {
            assert!(k7.mu.data[i] <= k5.mu.data[i] + 1e-15);
            assert!(k5.mu.data[i] <= k3.mu.data[i] + 1e-15);
            assert!(k3.mu.data[i] <= map.mu.data[i] + 1e-15);
        }
    }

    #[test]
    fn minpool_even_k_rejected() {
        assert!(clearance_minpool(&uniform_map(1.0), 4).is_err());
    }

    #[test]
    fn scale_angular_examples() {
        let map = TraversabilityMap::uniform(3, 3, (0.0, 0.0), 1.0, 0.7, 0.4);
        let same = scale_angular_channel(&map, 1.0).unwrap();
        assert_eq!(same, map);
        let scaled = scale_angular_channel(&map, 2.5).unwrap();
        assert!(scaled.nu.data.iter().all(|&v| v == 1.0));
        assert!(scaled.mu.data.iter().all(|&v| v == 0.7));
        let zero = scale_angular_channel(&TraversabilityMap::uniform(2, 2, (0.0, 0.0), 1.0, 0.5, 0.0), 10.0).unwrap();
        assert!(zero.nu.data.iter().all(|&v| v == 0.0));
        assert!(scale_angular_channel(&map, 0.0).is_err());
    }

    #[test]
    fn cost_zero_at_goal() {
        let map = uniform_map(1.0);
        let cfg = MpcConfig { w_mu: 0.0, w_nu: 0.0, v_cruise: 0.0, n: 5, ..Default::default() };
        let reference = Reference::new(vec![(0.0, 0.0)], 0.5).unwrap();
        let controls = vec![Control::zero(); 5];
        let traj = rollout_map(&State2D::new(0.0, 0.0, 0.3), &controls, &map, cfg.dt);
        let c = trajectory_cost(&traj, &controls, &reference, &map, &cfg);
        assert_relative_eq!(c, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn cost_monotone_in_map() {
        let map_hi = uniform_map(0.9);
        let map_lo = uniform_map(0.4);
        let cfg = MpcConfig { w_mu: 1.0, w_nu: 1.0, n: 6, ..Default::default() };
        let reference = Reference::new(vec![(3.0, 0.0)], 0.5).unwrap();
        let controls = vec![Control::new(0.5, 0.1); 6];
        let traj = rollout_map(&State2D::new(0.0, 0.0, 0.0), &controls, &map_hi, cfg.dt);
        let ch = trajectory_cost(&traj, &controls, &reference, &map_hi, &cfg);
        let cl = trajectory_cost(&traj, &controls, &reference, &map_lo, &cfg);
        assert!(ch <= cl);
    }

    #[test]
    fn cost_hand_computed_two_step() {
        // Q = R = QN = diag(1,1,0)/diag(1,1), W_mu = W_nu = 1, angular 1.
        // x0 = (0,0,0), u = [(1,0), (1,0)], dt = 0.1, uniform map 0.8,
        // waypoint (1,0), v_cruise = 0.5.
        let map = uniform_map(0.8);
        let cfg = MpcConfig {
            n: 2,
            dt: 0.1,
            q: [1.0, 1.0, 0.0],
            r: [1.0, 1.0],
            qn: [1.0, 1.0, 0.0],
            w_mu: 1.0,
            w_nu: 1.0,
            angular_scale: 1.0,
            v_cruise: 0.5,
            clearance_k: 1,
            ..Default::default()
        };
        let reference = Reference::new(vec![(1.0, 0.0)], 0.5).unwrap();
        let controls = vec![Control::new(1.0, 0.0); 2];
        let traj = rollout_map(&State2D::new(0.0, 0.0, 0.0), &controls, &map, cfg.dt);
        // states: x = 0, 0.08, 0.16 (mu = 0.8, v dt = 0.1)
        assert_relative_eq!(traj.states[1].px, 0.08, epsilon = 1e-12);
        assert_relative_eq!(traj.states[2].px, 0.16, epsilon = 1e-12);
        // tracking: (0-1)^2 + (0.08-1)^2 = 1 + 0.8464
        // controls: 2 * (1-0.5)^2 = 0.5
        // terminal: (0.16-1)^2 = 0.7056
        // reward: 3 states * (0.8 + 0.8) = 4.8
        let expect = 1.0 + 0.8464 + 0.5 + 0.7056 - 4.8;
        let c = trajectory_cost(&traj, &controls, &reference, &map, &cfg);
        assert_relative_eq!(c, expect, epsilon = 1e-12);
    }

    #[test]
    fn solve_drives_toward_goal() {
        let map = uniform_map(1.0);
        let cfg = MpcConfig { num_samples: 128, ..Default::default() };
        let reference = Reference::new(vec![(4.0, 0.0)], 0.5).unwrap();
        let mut state = MpcState::new();
        let sol = solve_mpc(&State2D::new(-4.0, 0.0, 0.0), &reference, &map, &cfg, &mut state, 7).unwrap();
        assert!(sol.u_first.v > 0.0);
        assert!(!sol.diagnostics.stuck);
        // selected cost never beats the nominal by less than zero
        assert!(sol.diagnostics.best_cost <= sol.diagnostics.nominal_cost + 1e-12);
        let x0 = &sol.best_traj.states[0];
        let xn = sol.best_traj.states.last().unwrap();
        let d0 = ((x0.px - 4.0f64).powi(2) + x0.py.powi(2)).sqrt();
        let dn = ((xn.px - 4.0f64).powi(2) + xn.py.powi(2)).sqrt();
        assert!(dn < d0, "horizon should reduce goal distance: {d0} -> {dn}");
    }

    #[test]
    fn solve_at_goal_emits_small_control() {
        let map = uniform_map(1.0);
        let cfg = MpcConfig { v_cruise: 0.0, num_samples: 256, selection: Selection::BestOfN, ..Default::default() };
        let reference = Reference::new(vec![(0.0, 0.0)], 0.5).unwrap();
        let mut state = MpcState::new();
        let sol = solve_mpc(&State2D::new(0.0, 0.0, 0.0), &reference, &map, &cfg, &mut state, 11).unwrap();
        assert!(sol.u_first.v.abs() <= 0.05 * cfg.limits.v_max, "v = {}", sol.u_first.v);
        assert!(sol.u_first.omega.abs() <= 0.05 * cfg.limits.omega_max + 0.05, "omega = {}", sol.u_first.omega);
    }

    #[test]
    fn stuck_in_zero_traction() {
        let map = uniform_map(0.0);
        let cfg = MpcConfig::default();
        let reference = Reference::new(vec![(4.0, 0.0)], 0.5).unwrap();
        let mut state = MpcState::new();
        let sol = solve_mpc(&State2D::new(0.0, 0.0, 0.0), &reference, &map, &cfg, &mut state, 3).unwrap();
        assert!(sol.diagnostics.stuck);
        assert_eq!(sol.u_first, Control::zero());
    }

    #[test]
    fn best_of_n_dominates_sampled_set() {
        let map = uniform_map(1.0);
        let cfg = MpcConfig { selection: Selection::BestOfN, num_samples: 64, ..Default::default() };
        let reference = Reference::new(vec![(3.0, 2.0)], 0.5).unwrap();
        let x0 = State2D::new(0.0, 0.0, 0.0);
        let mut state = MpcState::new();
        let nominal = state.nominal_for(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seqs = sample_sequences(&nominal, &cfg, &mut rng);
        let clear = clearance_minpool(&map, cfg.clearance_k).unwrap();
        let costs: Vec<f64> = seqs
            .iter()
            .map(|s| {
                let t = rollout_map(&x0, s, &clear, cfg.dt);
                trajectory_cost(&t, s, &reference, &clear, &cfg)
            })
            .collect();
        let sol = solve_mpc(&x0, &reference, &map, &cfg, &mut state, 9).unwrap();
        let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(sol.diagnostics.best_cost, min, epsilon = 1e-12);
    }

    #[test]
    fn emitted_controls_feasible() {
        let map = uniform_map(0.8);
        for selection in [Selection::BestOfN, Selection::ExponentialWeighting] {
            let cfg = MpcConfig { selection, num_samples: 64, noise_sigma: (2.0, 5.0), ..Default::default() };
            let reference = Reference::new(vec![(4.0, -3.0)], 0.5).unwrap();
            let mut state = MpcState::new();
            let sol = solve_mpc(&State2D::new(0.0, 0.0, 1.0), &reference, &map, &cfg, &mut state, 13).unwrap();
            for u in &sol.sequence {
                assert!(u.v.abs() <= cfg.limits.v_max + 1e-12);
                assert!(u.omega.abs() <= cfg.limits.omega_max + 1e-12);
            }
        }
    }

    #[test]
    fn solve_deterministic() {
        let map = uniform_map(0.9);
        let cfg = MpcConfig { num_samples: 64, ..Default::default() };
        let reference = Reference::new(vec![(3.0, 1.0)], 0.5).unwrap();
        let x0 = State2D::new(0.0, 0.0, 0.2);
        let mut sa = MpcState::new();
        let mut sb = MpcState::new();
        let a = solve_mpc(&x0, &reference, &map, &cfg, &mut sa, 21).unwrap();
        let b = solve_mpc(&x0, &reference, &map, &cfg, &mut sb, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn waypoint_advancement() {
        let reference = Reference::new(vec![(1.0, 0.0), (5.0, 0.0)], 0.5).unwrap();
        let (r1, done1) = advance_waypoint(&State2D::new(0.9, 0.1, 0.0), &reference);
        assert_eq!(r1.waypoints, vec![(5.0, 0.0)]);
        assert!(!done1);
        let (r2, done2) = advance_waypoint(&State2D::new(10.0, 0.0, 0.0), &reference);
        assert_eq!(r2, reference);
        assert!(!done2);
        let last = Reference::new(vec![(1.0, 0.0)], 0.5).unwrap();
        let (r3, done3) = advance_waypoint(&State2D::new(1.0, 0.0, 0.0), &last);
        assert!(r3.complete());
        assert!(done3);
    }

    #[test]
    fn obstacle_respected_with_large_w_mu() {
        // zero-traction band across the straight path, gap to the side
        let mut map = TraversabilityMap::uniform(20, 20, (-5.0, -5.0), 0.5, 1.0, 1.0);
        for iy in 0..20 {
            for ix in 9..=10 {
                // leave a gap at the top rows
                if iy < 16 {
                    map.mu.set(ix, iy, 0.0);
                    map.nu.set(ix, iy, 0.0);
                }
            }
        }
        let cfg = MpcConfig {
            w_mu: 5.0,
            num_samples: 512,
            selection: Selection::BestOfN,
            clearance_k: 1,
            ..Default::default()
        };
        let reference = Reference::new(vec![(4.0, 0.0)], 0.5).unwrap();
        let x0 = State2D::new(-3.0, 0.0, 0.0);
        let mut state = MpcState::new();
        let sol = solve_mpc(&x0, &reference, &map, &cfg, &mut state, 31).unwrap();
        let integrated_mu: f64 = sol.best_traj.states.iter().map(|s| map.sample(s.px, s.py).0).sum();
        // straight-to-goal comparison
        let straight = rollout_map(&x0, &vec![Control::new(1.0, 0.0); cfg.n], &map, cfg.dt);
        let straight_mu: f64 = straight.states.iter().map(|s| map.sample(s.px, s.py).0).sum();
        assert!(integrated_mu > straight_mu, "selected {integrated_mu} vs straight {straight_mu}");
    }

    #[test]
    fn lattice_solver_matches_manual_argmin() {
        let map = uniform_map(1.0);
        let cfg = MpcConfig { selection: Selection::BestOfN, clearance_k: 1, ..Default::default() };
        let reference = Reference::new(vec![(2.0, 2.0)], 0.3).unwrap();
        let x0 = State2D::new(-2.0, -2.0, 0.0);
        let seqs = lattice_sequences(&cfg, 4, 9);
        let best_manual = seqs
            .iter()
            .map(|s| {
                let t = rollout_map(&x0, s, &map, cfg.dt);
                (trajectory_cost(&t, s, &reference, &map, &cfg), s[0])
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .unwrap();
        let sol = solve_mpc_with_samples(&x0, &reference, &map, &cfg, seqs).unwrap();
        assert_eq!(sol.u_first, best_manual.1);
        assert_relative_eq!(sol.diagnostics.best_cost, best_manual.0, epsilon = 1e-12);
    }
}
