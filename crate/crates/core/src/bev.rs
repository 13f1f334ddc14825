//! Camera-to-BEV pipeline: lift per-pixel features into a depth-weighted
//! frustum, splat into a metric voxel grid, project depth into occupancy
//! voxels, align grids across time, fuse, and decode a two-channel
//! traversability map.
//!
//! The learnable pieces (encoder, temporal fuser, head) are deliberately tiny
//! affine/softmax blocks so end-to-end analytic gradients stay checkable
//! against finite differences. The geometry (lift, splat, align) is exact.

use nalgebra::{Isometry3, Point3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, DepthBins, DepthImage};
use crate::error::{Error, Result};
use crate::grid::{Grid2, TraversabilityMap};
use crate::kinodynamics::State2D;
use crate::world::{Observation, NO_HIT, NUM_MATERIALS};

// ---------------------------------------------------------------------------
// Images and feature tensors
// ---------------------------------------------------------------------------

/// Multi-channel per-pixel input, layout `data[(c*H + v)*W + u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl InputImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, x: f64) {
        self.data[(c * self.height + v) * self.width + u] = x;
    }
}

/// Number of encoder input channels: one-hot material plus a depth cue.
pub const INPUT_CHANNELS: usize = NUM_MATERIALS + 1;

/// Turn a simulated observation into the encoder input: one-hot material
/// channels plus normalized depth (0 where invalid).
pub fn observation_to_input(obs: &Observation, max_range: f64) -> InputImage {
    let mut img = InputImage::zeros(obs.width, obs.height, INPUT_CHANNELS);
    for v in 0..obs.height {
        for u in 0..obs.width {
            let m = obs.material[v * obs.width + u];
            if m != NO_HIT {
                img.set(m as usize, u, v, 1.0);
            }
            let d = obs.depth.get(u, v);
            if d > 0.0 {
                img.set(NUM_MATERIALS, u, v, d / max_range);
            }
        }
    }
    img
}

/// Per-pixel context features plus a categorical depth distribution.
///
/// Layouts: `context[(c*H + v)*W + u]`, `depth_dist[(d*H + v)*W + u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bins: usize,
    pub context: Vec<f64>,
    pub depth_dist: Vec<f64>,
    /// Pre-softmax depth logits, kept for the backward pass.
    pub depth_logits: Vec<f64>,
}

impl FeatureImage {
    #[inline]
    pub fn context_at(&self, c: usize, u: usize, v: usize) -> f64 {
        self.context[(c * self.height + v) * self.width + u]
    }

    #[inline]
    pub fn dist_at(&self, d: usize, u: usize, v: usize) -> f64 {
        self.depth_dist[(d * self.height + v) * self.width + u]
    }
}

// ---------------------------------------------------------------------------
// Stand-in encoder
// ---------------------------------------------------------------------------

/// One trainable affine layer per pixel: input channels to context channels
/// plus depth logits; the logits pass through a softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandInEncoder {
    pub in_channels: usize,
    pub context_channels: usize,
    pub depth_bins: usize,
    /// Row-major `(context_channels + depth_bins) x (in_channels + 1)`;
    /// the last column is the bias.
    pub weights: Vec<f64>,
}

impl StandInEncoder {
    pub fn zeros(in_channels: usize, context_channels: usize, depth_bins: usize) -> Self {
        Self {
            in_channels,
            context_channels,
            depth_bins,
            weights: vec![0.0; (context_channels + depth_bins) * (in_channels + 1)],
        }
    }

    pub fn rows(&self) -> usize {
        self.context_channels + self.depth_bins
    }

    pub fn cols(&self) -> usize {
        self.in_channels + 1
    }

    #[inline]
    pub fn w(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols() + col]
    }

    #[inline]
    pub fn w_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        let cols = self.cols();
        &mut self.weights[row * cols + col]
    }

    /// Identity context block (requires `context_channels == in_channels`),
    /// zero depth logits (uniform distribution).
    pub fn identity(in_channels: usize, depth_bins: usize) -> Self {
        let mut e = Self::zeros(in_channels, in_channels, depth_bins);
        for c in 0..in_channels {
            *e.w_mut(c, c) = 1.0;
        }
        e
    }

    pub fn forward(&self, input: &InputImage) -> Result<FeatureImage> {
        if input.channels != self.in_channels {
            return Err(Error::InvalidInput(format!(
                "encoder expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (w, h) = (input.width, input.height);
        let n = w * h;
        let c_ch = self.context_channels;
        let d_ch = self.depth_bins;
        let mut context = vec![0.0; c_ch * n];
        let mut depth_logits = vec![0.0; d_ch * n];
        let mut depth_dist = vec![0.0; d_ch * n];
        for v in 0..h {
            for u in 0..w {
                let pix = v * w + u;
                for row in 0..self.rows() {
                    let mut z = self.w(row, self.in_channels); // bias
                    for c in 0..self.in_channels {
                        z += self.w(row, c) * input.get(c, u, v);
                    }
                    if row < c_ch {
                        context[row * n + pix] = z;
                    } else {
                        depth_logits[(row - c_ch) * n + pix] = z;
                    }
                }
                // softmax over bins
                let mut max = f64::NEG_INFINITY;
                for d in 0..d_ch {
                    max = max.max(depth_logits[d * n + pix]);
                }
                let mut sum = 0.0;
                for d in 0..d_ch {
                    let e = (depth_logits[d * n + pix] - max).exp();
                    depth_dist[d * n + pix] = e;
                    sum += e;
                }
                for d in 0..d_ch {
                    depth_dist[d * n + pix] /= sum;
                }
            }
        }
        Ok(FeatureImage { width: w, height: h, channels: c_ch, bins: d_ch, context, depth_dist, depth_logits })
    }
}

/// Alias used by the spec-facing API.
pub fn extract_features(observation: &InputImage, model: &StandInEncoder) -> Result<FeatureImage> {
    model.forward(observation)
}

// ---------------------------------------------------------------------------
// Frustum lifting and voxel splatting
// ---------------------------------------------------------------------------

/// Lifted frustum: one 3D point per (pixel, depth bin) carrying
/// `context(u,v) * depth_dist(u,v)[d]`.
///
/// Point order: `p = (v*W + u)*D + d`; features at `features[p*C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumPointCloud {
    pub points: Vec<Point3<f64>>,
    pub features: Vec<f64>,
    pub channels: usize,
    pub bins: usize,
    pub width: usize,
    pub height: usize,
}

pub fn lift_frustum(feat: &FeatureImage, bins: &DepthBins, cam: &CameraModel) -> Result<FrustumPointCloud> {
    if feat.width != cam.width || feat.height != cam.height {
        return Err(Error::InvalidInput("feature image resolution must match camera".into()));
    }
    if feat.bins != bins.count {
        return Err(Error::InvalidInput("feature depth bins must match bin spec".into()));
    }
    let (w, h, dch, cch) = (feat.width, feat.height, bins.count, feat.channels);
    let mut points = Vec::with_capacity(w * h * dch);
    let mut features = vec![0.0; w * h * dch * cch];
    for v in 0..h {
        for u in 0..w {
            let dir = cam.ray_dir(u as f64, v as f64);
            for d in 0..dch {
                let p = Point3::from(dir * bins.center(d));
                let pi = (v * w + u) * dch + d;
                points.push(p);
                let pd = feat.dist_at(d, u, v);
                for c in 0..cch {
                    features[pi * cch + c] = feat.context_at(c, u, v) * pd;
                }
            }
        }
    }
    Ok(FrustumPointCloud { points, features, channels: cch, bins: dch, width: w, height: h })
}

/// Geometry of a metric voxel grid. `origin` is the corner of voxel (0,0,0)
/// in the target frame; horizontal and vertical cells may differ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: (f64, f64, f64),
    pub cell_xy: f64,
    pub cell_z: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 || self.cell_xy <= 0.0 || self.cell_z <= 0.0 {
            return Err(Error::InvalidConfig("voxel grid dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial voxel index of a point, or None when outside the grid.
    pub fn voxel_of(&self, p: &Point3<f64>) -> Option<usize> {
        let ix = (p.x - self.origin.0) / self.cell_xy;
        let iy = (p.y - self.origin.1) / self.cell_xy;
        let iz = (p.z - self.origin.2) / self.cell_z;
        if ix < 0.0 || iy < 0.0 || iz < 0.0 {
            return None;
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= self.nx || iy >= self.ny || iz >= self.nz {
            return None;
        }
        Some((iz * self.ny + iy) * self.nx + ix)
    }

    /// Center of the voxel with spatial index `i`, in the grid's frame.
    pub fn center(&self, i: usize) -> Point3<f64> {
        let ix = i % self.nx;
        let iy = (i / self.nx) % self.ny;
        let iz = i / (self.nx * self.ny);
        Point3::new(
            self.origin.0 + (ix as f64 + 0.5) * self.cell_xy,
            self.origin.1 + (iy as f64 + 0.5) * self.cell_xy,
            self.origin.2 + (iz as f64 + 0.5) * self.cell_z,
        )
    }
}

/// Multi-channel voxel grid, layout `data[c * spec.len() + spatial]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub spec: VoxelGridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(spec: VoxelGridSpec, channels: usize) -> Self {
        Self { spec, channels, data: vec![0.0; channels * spec.len()] }
    }

    #[inline]
    pub fn at(&self, c: usize, spatial: usize) -> f64 {
        self.data[c * self.spec.len() + spatial]
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Sum-pool frustum features into a voxel grid expressed in the target frame.
///
/// Returns the grid plus the per-point target voxel (None = discarded), which
/// the backward pass reuses. Sum pooling conserves feature mass.
pub fn splat_to_voxels(
    frustum: &FrustumPointCloud,
    to_target: &Isometry3<f64>,
    spec: &VoxelGridSpec,
) -> Result<(VoxelGrid, Vec<Option<usize>>)> {
    spec.validate()?;
    let mut grid = VoxelGrid::zeros(*spec, frustum.channels);
    let n = spec.len();
    let mut targets = Vec::with_capacity(frustum.points.len());
    for (pi, p) in frustum.points.iter().enumerate() {
        let q = to_target * p;
        let t = spec.voxel_of(&q);
        if let Some(i) = t {
            for c in 0..frustum.channels {
                grid.data[c * n + i] += frustum.features[pi * frustum.channels + c];
            }
        }
        targets.push(t);
    }
    Ok((grid, targets))
}

/// Back-project every valid depth pixel and mark its voxel occupied.
pub fn depth_to_occupancy(
    depth: &DepthImage,
    cam: &CameraModel,
    cam_to_target: &Isometry3<f64>,
    spec: &VoxelGridSpec,
) -> Result<VoxelGrid> {
    spec.validate()?;
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::InvalidInput("depth resolution must match camera".into()));
    }
    let mut grid = VoxelGrid::zeros(*spec, 1);
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if d <= 0.0 {
                continue;
            }
            let p = cam_to_target * cam.back_project(u as f64, v as f64, d);
            if let Some(i) = spec.voxel_of(&p) {
                grid.data[i] = 1.0;
            }
        }
    }
    Ok(grid)
}

/// Resample each grid (expressed in its own pose's frame) into the reference
/// pose's frame by nearest-voxel lookup. z passes through unchanged.
pub fn align_sequence(grids: &[VoxelGrid], poses: &[State2D], reference: &State2D) -> Result<Vec<VoxelGrid>> {
    if grids.len() != poses.len() {
        return Err(Error::InvalidInput("grids and poses must have equal length".into()));
    }
    let mut out = Vec::with_capacity(grids.len());
    for (g, pose) in grids.iter().zip(poses.iter()) {
        let spec = g.spec;
        let mut aligned = VoxelGrid::zeros(spec, g.channels);
        let n = spec.len();
        for i in 0..n {
            let c_ref = spec.center(i);
            // reference-local -> world -> source-local
            let (wx, wy) = reference.local_to_world(c_ref.x, c_ref.y);
            let (sx, sy) = pose.world_to_local(wx, wy);
            if let Some(src) = spec.voxel_of(&Point3::new(sx, sy, c_ref.z)) {
                for c in 0..g.channels {
                    aligned.data[c * n + i] = g.data[c * n + src];
                }
            }
        }
        out.push(aligned);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Temporal fusion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TemporalFuser {
    /// Elementwise maximum over time: past occupancy persists.
    Max,
    /// Convex combination with the given per-step weights (must sum to 1).
    Convex(Vec<f64>),
}

pub fn fuse_temporal(aligned: &[VoxelGrid], fuser: &TemporalFuser) -> Result<VoxelGrid> {
    let first = aligned.first().ok_or_else(|| Error::InvalidInput("empty grid sequence".into()))?;
    for g in aligned {
        if g.spec != first.spec || g.channels != first.channels {
            return Err(Error::InvalidInput("fused grids must share spec".into()));
        }
    }
    let mut out = VoxelGrid::zeros(first.spec, first.channels);
    match fuser {
        TemporalFuser::Max => {
            out.data.copy_from_slice(&first.data);
            for g in &aligned[1..] {
                for (o, &v) in out.data.iter_mut().zip(g.data.iter()) {
                    *o = o.max(v);
                }
            }
        }
        TemporalFuser::Convex(w) => {
            if w.len() != aligned.len() {
                return Err(Error::InvalidInput("one weight per grid required".into()));
            }
            for (g, &wi) in aligned.iter().zip(w.iter()) {
                for (o, &v) in out.data.iter_mut().zip(g.data.iter()) {
                    *o += wi * v;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decode head
// ---------------------------------------------------------------------------

/// Per-cell affine map over the z-summed channels followed by a sigmoid,
/// two output channels (mu, nu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandInHead {
    pub in_channels: usize,
    /// Row-major `2 x (in_channels + 1)`, last column is the bias.
    pub weights: Vec<f64>,
}

impl StandInHead {
    pub fn zeros(in_channels: usize) -> Self {
        Self { in_channels, weights: vec![0.0; 2 * (in_channels + 1)] }
    }

    #[inline]
    pub fn w(&self, out: usize, col: usize) -> f64 {
        self.weights[out * (self.in_channels + 1) + col]
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Collapse z by summation, apply the head per cell, squash into [0, 1].
///
/// Returns the map plus the z-summed feature columns (`cols[(c*ny+y)*nx+x]`)
/// for the backward pass.
pub fn decode_traversability(fused: &VoxelGrid, head: &StandInHead) -> Result<(TraversabilityMap, Vec<f64>)> {
    if fused.channels != head.in_channels {
        return Err(Error::InvalidInput(format!(
            "head expects {} channels, fused grid has {}",
            head.in_channels, fused.channels
        )));
    }
    let spec = fused.spec;
    let (nx, ny, nz) = (spec.nx, spec.ny, spec.nz);
    let n2 = nx * ny;
    let n3 = spec.len();
    let mut cols = vec![0.0; fused.channels * n2];
    for c in 0..fused.channels {
        for z in 0..nz {
            for j in 0..n2 {
                cols[c * n2 + j] += fused.data[c * n3 + z * n2 + j];
            }
        }
    }
    let origin = (spec.origin.0, spec.origin.1);
    let mut mu = Grid2::filled(nx, ny, origin, spec.cell_xy, 0.0);
    let mut nu = Grid2::filled(nx, ny, origin, spec.cell_xy, 0.0);
    for j in 0..n2 {
        for out in 0..2 {
            let mut z = head.w(out, head.in_channels);
            for c in 0..head.in_channels {
                z += head.w(out, c) * cols[c * n2 + j];
            }
            let v = sigmoid(z);
            if out == 0 {
                mu.data[j] = v;
            } else {
                nu.data[j] = v;
            }
        }
    }
    Ok((TraversabilityMap { mu, nu }, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraMount;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cam_8x8() -> CameraModel {
        CameraModel::from_fov(8, 8, 90f64.to_radians(), &CameraMount { height: 0.0, forward: 0.0, pitch_down: 0.0 })
    }

    fn small_spec() -> VoxelGridSpec {
        VoxelGridSpec { origin: (-2.0, -2.0, -2.0), cell_xy: 0.25, cell_z: 1.0, nx: 16, ny: 16, nz: 4 }
    }

    #[test]
    fn encoder_identity_passes_context_through() {
        let enc = StandInEncoder::identity(4, 3);
        let mut input = InputImage::zeros(2, 2, 4);
        input.set(2, 1, 0, 1.0);
        input.set(0, 0, 1, 0.5);
        let feat = enc.forward(&input).unwrap();
        assert_eq!(feat.context_at(2, 1, 0), 1.0);
        assert_eq!(feat.context_at(0, 0, 1), 0.5);
        assert_eq!(feat.context_at(1, 1, 1), 0.0);
    }

    #[test]
    fn depth_dist_normalized() {
        let mut enc = StandInEncoder::zeros(3, 2, 5);
        for (i, w) in enc.weights.iter_mut().enumerate() {
            *w = ((i * 7919) % 13) as f64 / 6.5 - 1.0;
        }
        let mut input = InputImage::zeros(4, 3, 3);
        for (i, x) in input.data.iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin();
        }
        let feat = enc.forward(&input).unwrap();
        for v in 0..3 {
            for u in 0..4 {
                let s: f64 = (0..5).map(|d| feat.dist_at(d, u, v)).sum();
                assert_relative_eq!(s, 1.0, epsilon = 1e-6);
                assert!((0..5).all(|d| feat.dist_at(d, u, v) >= 0.0));
            }
        }
    }

    #[test]
    fn logit_perturbation_moves_probability() {
        let mut enc = StandInEncoder::zeros(1, 1, 4);
        let input = InputImage::zeros(1, 1, 1);
        let before = enc.forward(&input).unwrap();
        // bump bin 2's bias
        *enc.w_mut(1 + 2, 1) = 0.5;
        let after = enc.forward(&input).unwrap();
        assert!(after.dist_at(2, 0, 0) > before.dist_at(2, 0, 0));
        for d in [0, 1, 3] {
            assert!(after.dist_at(d, 0, 0) < before.dist_at(d, 0, 0));
        }
    }

    #[test]
    fn encoder_resolution_mismatch_rejected() {
        let enc = StandInEncoder::zeros(3, 2, 4);
        let input = InputImage::zeros(2, 2, 5);
        assert!(enc.forward(&input).is_err());
    }

    #[test]
    fn lift_one_hot_distribution() {
        let cam = cam_8x8();
        let bins = DepthBins::new(1.0, 5.0, 4).unwrap();
        let n = 8 * 8;
        let mut feat = FeatureImage {
            width: 8,
            height: 8,
            channels: 2,
            bins: 4,
            context: vec![0.0; 2 * n],
            depth_dist: vec![0.0; 4 * n],
            depth_logits: vec![0.0; 4 * n],
        };
        // pixel (3, 2): context = (0.7, -0.3), one-hot at bin 1
        let pix = 2 * 8 + 3;
        feat.context[pix] = 0.7;
        feat.context[n + pix] = -0.3;
        feat.depth_dist[n + pix] = 1.0;
        let fr = lift_frustum(&feat, &bins, &cam).unwrap();
        let pi = (2 * 8 + 3) * 4 + 1;
        assert_eq!(fr.features[pi * 2], 0.7);
        assert_eq!(fr.features[pi * 2 + 1], -0.3);
        // all other points carry zero feature
        let nonzero: usize = fr.features.iter().filter(|f| **f != 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn lift_uniform_distribution_splits_mass() {
        let cam = cam_8x8();
        let bins = DepthBins::new(1.0, 5.0, 4).unwrap();
        let n = 8 * 8;
        let feat = FeatureImage {
            width: 8,
            height: 8,
            channels: 1,
            bins: 4,
            context: vec![1.0; n],
            depth_dist: vec![0.25; 4 * n],
            depth_logits: vec![0.0; 4 * n],
        };
        let fr = lift_frustum(&feat, &bins, &cam).unwrap();
        assert!(fr.features.iter().all(|&f| (f - 0.25).abs() < 1e-12));
    }

    #[test]
    fn lift_principal_pixel_on_axis() {
        let cam = cam_8x8();
        let bins = DepthBins::new(2.0, 4.0, 2).unwrap();
        let n = 8 * 8;
        let feat = FeatureImage {
            width: 8,
            height: 8,
            channels: 1,
            bins: 2,
            context: vec![1.0; n],
            depth_dist: vec![0.5; 2 * n],
            depth_logits: vec![0.0; 2 * n],
        };
        let fr = lift_frustum(&feat, &bins, &cam).unwrap();
        // synthesize the principal point ray: cx = 3.5 is between pixels, so
        // check a back-projection directly instead
        let p = cam.back_project(cam.cx, cam.cy, 2.5);
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.z, 2.5, epsilon = 1e-12);
        assert_eq!(fr.points.len(), 8 * 8 * 2);
    }

    #[test]
    fn splat_sums_and_conserves_mass() {
        let spec = small_spec();
        let cloud = FrustumPointCloud {
            points: vec![
                Point3::new(0.1, 0.1, -1.5),
                Point3::new(0.1, 0.1, -1.5),
                Point3::new(100.0, 0.0, 0.0), // out of bounds
            ],
            features: vec![0.4, 0.6, 9.0],
            channels: 1,
            bins: 1,
            width: 3,
            height: 1,
        };
        let (grid, targets) = splat_to_voxels(&cloud, &Isometry3::identity(), &spec).unwrap();
        assert!(targets[2].is_none());
        assert_eq!(targets[0], targets[1]);
        let i = targets[0].unwrap();
        assert_relative_eq!(grid.data[i], 1.0, epsilon = 1e-12);
        // conservation: total grid mass equals in-bounds point mass
        assert_relative_eq!(grid.total_mass(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn occupancy_single_pixel() {
        let cam = cam_8x8();
        let spec = VoxelGridSpec { origin: (-2.0, -2.0, -2.0), cell_xy: 0.25, cell_z: 1.0, nx: 16, ny: 16, nz: 4 };
        let mut depth = DepthImage::invalid(8, 8);
        depth.set(4, 4, 2.0);
        let grid = depth_to_occupancy(&depth, &cam, &Isometry3::identity(), &spec).unwrap();
        let p = cam.back_project(4.0, 4.0, 2.0);
        let i = spec.voxel_of(&p).unwrap();
        assert_eq!(grid.data[i], 1.0);
        assert_eq!(grid.total_mass(), 1.0);
    }

    #[test]
    fn occupancy_all_invalid_is_empty() {
        let cam = cam_8x8();
        let depth = DepthImage::invalid(8, 8);
        let grid = depth_to_occupancy(&depth, &cam, &Isometry3::identity(), &small_spec()).unwrap();
        assert_eq!(grid.total_mass(), 0.0);
    }

    #[test]
    fn occupancy_flat_wall_plane_count() {
        // all pixels see a wall at z_cam such that back-projections span a plane;
        // expected voxel set computed by direct enumeration
        let cam = cam_8x8();
        let spec = VoxelGridSpec { origin: (-4.0, -4.0, -4.0), cell_xy: 0.5, cell_z: 0.5, nx: 16, ny: 16, nz: 16 };
        let mut depth = DepthImage::invalid(8, 8);
        let wall_z = 2.0;
        for v in 0..8 {
            for u in 0..8 {
                let dir = cam.ray_dir(u as f64, v as f64);
                depth.set(u, v, wall_z / dir.z); // range so that z component = wall_z
            }
        }
        let grid = depth_to_occupancy(&depth, &cam, &Isometry3::identity(), &spec).unwrap();
        let mut expected = std::collections::HashSet::new();
        for v in 0..8 {
            for u in 0..8 {
                let p = cam.back_project(u as f64, v as f64, depth.get(u, v));
                assert_relative_eq!(p.z, wall_z, epsilon = 1e-9);
                expected.insert(spec.voxel_of(&p).unwrap());
            }
        }
        assert_eq!(grid.total_mass() as usize, expected.len());
        for i in expected {
            assert_eq!(grid.data[i], 1.0);
        }
    }

    #[test]
    fn align_identity_is_noop() {
        let spec = small_spec();
        let mut g = VoxelGrid::zeros(spec, 2);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = (i % 17) as f64;
        }
        let pose = State2D::new(3.0, -1.0, 0.8);
        let out = align_sequence(std::slice::from_ref(&g), &[pose], &pose).unwrap();
        assert_eq!(out[0], g);
    }

    #[test]
    fn align_forward_motion_shifts_backward() {
        let spec = VoxelGridSpec { origin: (-2.0, -2.0, 0.0), cell_xy: 0.1, cell_z: 1.0, nx: 40, ny: 40, nz: 1 };
        let mut g = VoxelGrid::zeros(spec, 1);
        // feature at source-local (1.05, 0.05): voxel (30, 20)
        let i = spec.voxel_of(&Point3::new(1.05, 0.05, 0.5)).unwrap();
        g.data[i] = 1.0;
        let past = State2D::new(0.0, 0.0, 0.0);
        let now = State2D::new(1.0, 0.0, 0.0); // advanced 1 m
        let out = align_sequence(&[g], &[past], &now).unwrap();
        // in the new frame the feature sits 10 cells back: local (0.05, 0.05)
        let j = spec.voxel_of(&Point3::new(0.05, 0.05, 0.5)).unwrap();
        assert_eq!(out[0].data[j], 1.0);
    }

    #[test]
    fn align_rotation_maps_x_to_y() {
        let spec = VoxelGridSpec { origin: (-2.0, -2.0, 0.0), cell_xy: 0.1, cell_z: 1.0, nx: 40, ny: 40, nz: 1 };
        let mut g = VoxelGrid::zeros(spec, 1);
        let src = Point3::new(1.05, 0.05, 0.5);
        g.data[spec.voxel_of(&src).unwrap()] = 1.0;
        let past = State2D::new(0.0, 0.0, 0.0);
        let now = State2D::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let out = align_sequence(&[g], &[past], &now).unwrap();
        // apply the transform to the voxel center and re-bin: x -> -y' direction
        let (wx, wy) = past.local_to_world(src.x, src.y);
        let (lx, ly) = now.world_to_local(wx, wy);
        let j = spec.voxel_of(&Point3::new(lx, ly, 0.5)).unwrap();
        assert_eq!(out[0].data[j], 1.0);
    }

    #[test]
    fn align_composition_within_one_cell() {
        let spec = VoxelGridSpec { origin: (-2.0, -2.0, 0.0), cell_xy: 0.1, cell_z: 1.0, nx: 40, ny: 40, nz: 1 };
        let mut g = VoxelGrid::zeros(spec, 1);
        g.data[spec.voxel_of(&Point3::new(0.55, -0.35, 0.5)).unwrap()] = 1.0;
        let p0 = State2D::new(0.0, 0.0, 0.0);
        let p1 = State2D::new(0.3, 0.1, 0.2);
        let p2 = State2D::new(0.5, 0.3, 0.5);
        // two hops
        let hop1 = align_sequence(std::slice::from_ref(&g), &[p0], &p1).unwrap();
        let hop2 = align_sequence(&hop1, &[p1], &p2).unwrap();
        // direct
        let direct = align_sequence(std::slice::from_ref(&g), &[p0], &p2).unwrap();
        // the single occupied voxel must agree within one cell of quantization
        let find = |g: &VoxelGrid| {
            g.data
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.5)
                .map(|(i, _)| spec.center(i))
                .next()
                .unwrap()
        };
        let a = find(&hop2[0]);
        let b = find(&direct[0]);
        assert!((a - b).norm() <= spec.cell_xy * 2.0_f64.sqrt() + 1e-9, "a={a:?} b={b:?}");
    }

    #[test]
    fn fuse_single_element_identity() {
        let spec = small_spec();
        let mut g = VoxelGrid::zeros(spec, 1);
        g.data[5] = 3.0;
        assert_eq!(fuse_temporal(std::slice::from_ref(&g), &TemporalFuser::Max).unwrap(), g);
        assert_eq!(fuse_temporal(std::slice::from_ref(&g), &TemporalFuser::Convex(vec![1.0])).unwrap(), g);
    }

    #[test]
    fn max_fuser_keeps_past_occupancy() {
        let spec = small_spec();
        let mut past = VoxelGrid::zeros(spec, 1);
        past.data[7] = 1.0;
        let now = VoxelGrid::zeros(spec, 1);
        let fused = fuse_temporal(&[past.clone(), now], &TemporalFuser::Max).unwrap();
        assert_eq!(fused.data[7], 1.0);
        // persistence: fused >= every input elementwise
        for (f, p) in fused.data.iter().zip(past.data.iter()) {
            assert!(f >= p);
        }
    }

    #[test]
    fn one_hot_convex_weights_select_last_frame() {
        let spec = small_spec();
        let mut a = VoxelGrid::zeros(spec, 1);
        a.data[3] = 2.0;
        let mut b = VoxelGrid::zeros(spec, 1);
        b.data[9] = 5.0;
        let fused = fuse_temporal(&[a, b.clone()], &TemporalFuser::Convex(vec![0.0, 1.0])).unwrap();
        assert_eq!(fused, b);
    }

    #[test]
    fn decode_zero_head_gives_half() {
        let spec = small_spec();
        let g = VoxelGrid::zeros(spec, 3);
        let head = StandInHead::zeros(3);
        let (map, _) = decode_traversability(&g, &head).unwrap();
        assert!(map.mu.data.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(map.nu.data.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn decode_monotone_in_bias() {
        let spec = small_spec();
        let g = VoxelGrid::zeros(spec, 1);
        let mut prev = 0.5;
        for bias in [1.0, 3.0, 8.0, 20.0] {
            let mut head = StandInHead::zeros(1);
            head.weights[1] = bias;
            let (map, _) = decode_traversability(&g, &head).unwrap();
            let v = map.mu.data[0];
            assert!(v > prev);
            prev = v;
        }
        assert!(prev > 0.999);
    }

    proptest! {
        #[test]
        fn splat_mass_conservation(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = small_spec();
            let n = 200;
            let points: Vec<Point3<f64>> = (0..n)
                .map(|_| Point3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)))
                .collect();
            let features: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cloud = FrustumPointCloud { points, features, channels: 1, bins: 1, width: n, height: 1 };
            let (grid, targets) = splat_to_voxels(&cloud, &Isometry3::identity(), &spec).unwrap();
            let in_mass: f64 = targets
                .iter()
                .zip(cloud.features.iter())
                .filter(|(t, _)| t.is_some())
                .map(|(_, f)| *f)
                .sum();
            prop_assert!((grid.total_mass() - in_mass).abs() < 1e-9);
        }

        #[test]
        fn minpool_like_persistence(seed in 0u64..20) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = small_spec();
            let grids: Vec<VoxelGrid> = (0..3)
                .map(|_| {
                    let mut g = VoxelGrid::zeros(spec, 1);
                    for v in g.data.iter_mut() {
                        *v = rng.gen_range(0.0..1.0);
                    }
                    g
                })
                .collect();
            let fused = fuse_temporal(&grids, &TemporalFuser::Max).unwrap();
            for g in &grids {
                for (f, v) in fused.data.iter().zip(g.data.iter()) {
                    prop_assert!(f >= v);
                }
            }
        }
    }
}
