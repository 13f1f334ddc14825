//! The trainable stand-in network: per-pixel affine encoder, frustum lift,
//! voxel splat, occupancy concat, temporal fusion, and the decode head, with
//! hand-derived backpropagation through the whole chain.
//!
//! Everything upstream of the parameters is linear or softmax/sigmoid, so the
//! analytic gradients are exact and cheap to verify against central finite
//! differences.

use nalgebra::Isometry3;
use serde::{Deserialize, Serialize};

use crate::bev::{
    decode_traversability, depth_to_occupancy, fuse_temporal, lift_frustum, splat_to_voxels,
    FeatureImage, InputImage, StandInEncoder, StandInHead, TemporalFuser, VoxelGrid, VoxelGridSpec,
    INPUT_CHANNELS,
};
use crate::camera::{pose_isometry, CameraModel, DepthBins, DepthImage};
use crate::error::{Error, Result};
use crate::grid::TraversabilityMap;
use crate::kinodynamics::State2D;

/// Which input branches the network uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single frame, no occupancy branch.
    VisionOnly,
    /// Single frame with the depth-occupancy branch.
    Voxel,
    /// Full frame sequence with occupancy and temporal fusion.
    VoxelTemporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_channels: usize,
    pub bins: DepthBins,
    /// BEV voxel grid, expressed in the robot frame at the reference step.
    pub grid: VoxelGridSpec,
    /// Sequence length the network consumes.
    pub frames: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_channels == 0 || self.frames == 0 {
            return Err(Error::InvalidConfig("context_channels and frames must be positive".into()));
        }
        self.grid.validate()
    }

    pub fn frames_used(&self) -> usize {
        match self.variant {
            Variant::VisionOnly | Variant::Voxel => 1,
            Variant::VoxelTemporal => self.frames,
        }
    }
}

/// One observation frame as the network sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameInput {
    pub input: InputImage,
    /// Depth image feeding the occupancy branch (dropout zeroes this).
    pub occ_depth: DepthImage,
    /// Pose of this frame's robot frame expressed in the reference frame.
    pub rel_pose: State2D,
}

/// Encoder + temporal fuser + head with a flat parameter view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravNet {
    pub cfg: ModelConfig,
    pub camera: CameraModel,
    pub encoder: StandInEncoder,
    pub fuser_logits: Vec<f64>,
    pub head: StandInHead,
}

impl TravNet {
    pub fn new(cfg: ModelConfig, camera: CameraModel) -> Result<Self> {
        cfg.validate()?;
        camera.validate()?;
        let encoder = StandInEncoder::zeros(INPUT_CHANNELS, cfg.context_channels, cfg.bins.count);
        let head = StandInHead::zeros(cfg.context_channels + 1);
        let fuser_logits = vec![0.0; cfg.frames];
        Ok(Self { cfg, camera, encoder, fuser_logits, head })
    }

    pub fn init_random<R: rand::Rng>(&mut self, rng: &mut R, scale: f64) {
        for w in self.encoder.weights.iter_mut() {
            *w = rng.gen_range(-scale..scale);
        }
        for w in self.head.weights.iter_mut() {
            *w = rng.gen_range(-scale..scale);
        }
        for w in self.fuser_logits.iter_mut() {
            *w = rng.gen_range(-scale..scale);
        }
    }

    pub fn num_params(&self) -> usize {
        self.encoder.weights.len() + self.fuser_logits.len() + self.head.weights.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.encoder.weights);
        p.extend_from_slice(&self.fuser_logits);
        p.extend_from_slice(&self.head.weights);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let ne = self.encoder.weights.len();
        let nf = self.fuser_logits.len();
        self.encoder.weights.copy_from_slice(&p[..ne]);
        self.fuser_logits.copy_from_slice(&p[ne..ne + nf]);
        self.head.weights.copy_from_slice(&p[ne + nf..]);
    }

    /// Softmax over the fuser logits for the frames actually used.
    fn fuse_weights(&self, used: usize) -> Vec<f64> {
        if used == 1 {
            return vec![1.0];
        }
        let logits = &self.fuser_logits[..used];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Full forward pass. `frames` must hold at least `frames_used()` entries;
    /// the *last* entries are consumed (the final one is the reference frame).
    pub fn forward(&self, frames: &[FrameInput]) -> Result<ForwardPass> {
        let used = self.cfg.frames_used();
        if frames.len() < used {
            return Err(Error::InvalidInput(format!(
                "model needs {} frames, got {}",
                used,
                frames.len()
            )));
        }
        let frames = &frames[frames.len() - used..];
        let weights = self.fuse_weights(used);
        let spec = self.cfg.grid;
        let cch = self.cfg.context_channels;
        let n3 = spec.len();

        let mut feats = Vec::with_capacity(used);
        let mut targets = Vec::with_capacity(used);
        let mut context_grids = Vec::with_capacity(used);
        let mut occ_grids = Vec::with_capacity(used);
        for f in frames {
            let feat = self.encoder.forward(&f.input)?;
            let frustum = lift_frustum(&feat, &self.cfg.bins, &self.camera)?;
            let cam_to_ref: Isometry3<f64> = pose_isometry(&f.rel_pose) * self.camera.extrinsic;
            let (ctx_grid, tgt) = splat_to_voxels(&frustum, &cam_to_ref, &spec)?;
            let occ = if self.cfg.variant == Variant::VisionOnly {
                VoxelGrid::zeros(spec, 1)
            } else {
                depth_to_occupancy(&f.occ_depth, &self.camera, &cam_to_ref, &spec)?
            };
            feats.push(feat);
            targets.push(tgt);
            context_grids.push(ctx_grid);
            occ_grids.push(occ);
        }

        // context channels: convex combination; occupancy: elementwise max
        let fused_ctx = fuse_temporal(&context_grids, &TemporalFuser::Convex(weights.clone()))?;
        let fused_occ = fuse_temporal(&occ_grids, &TemporalFuser::Max)?;
        let mut fused = VoxelGrid::zeros(spec, cch + 1);
        fused.data[..cch * n3].copy_from_slice(&fused_ctx.data);
        fused.data[cch * n3..].copy_from_slice(&fused_occ.data);

        let (map, cols) = decode_traversability(&fused, &self.head)?;
        Ok(ForwardPass { map, cols, feats, targets, context_grids, fuse_weights: weights })
    }

    /// Convenience: forward returning only the map.
    pub fn predict(&self, frames: &[FrameInput]) -> Result<TraversabilityMap> {
        Ok(self.forward(frames)?.map)
    }

    /// Backpropagate to a flat parameter gradient.
    ///
    /// `d_map` holds dL/d(mu cell) and dL/d(nu cell); `d_depth_logits[t]` is
    /// an optional extra gradient on frame t's depth logits (the cross-entropy
    /// term), layout matching `FeatureImage::depth_logits`.
    pub fn backward(
        &self,
        frames: &[FrameInput],
        pass: &ForwardPass,
        d_map: &MapGrad,
        d_depth_logits: &[Vec<f64>],
    ) -> Vec<f64> {
        let used = self.cfg.frames_used();
        let frames = &frames[frames.len() - used..];
        let spec = self.cfg.grid;
        let cch = self.cfg.context_channels;
        let n2 = spec.nx * spec.ny;
        let n3 = spec.len();
        let head_in = cch + 1;

        let mut g_encoder = vec![0.0; self.encoder.weights.len()];
        let mut g_fuser = vec![0.0; self.fuser_logits.len()];
        let mut g_head = vec![0.0; self.head.weights.len()];

        // head backward: map = sigmoid(W [cols;1])
        let mut d_cols = vec![0.0; head_in * n2];
        for j in 0..n2 {
            for out in 0..2 {
                let s = if out == 0 { pass.map.mu.data[j] } else { pass.map.nu.data[j] };
                let dv = if out == 0 { d_map.mu[j] } else { d_map.nu[j] };
                if dv == 0.0 {
                    continue;
                }
                let dz = dv * s * (1.0 - s);
                for c in 0..head_in {
                    g_head[out * (head_in + 1) + c] += dz * pass.cols[c * n2 + j];
                    d_cols[c * n2 + j] += dz * self.head.w(out, c);
                }
                g_head[out * (head_in + 1) + head_in] += dz;
            }
        }

        // per-frame backward through fuse -> splat -> lift -> encoder.
        // occupancy channel (index cch) carries no parameter gradient.
        let mut d_alpha = vec![0.0; used];
        for (t, frame) in frames.iter().enumerate() {
            let a_t = pass.fuse_weights[t];
            let feat = &pass.feats[t];
            let (w, h) = (feat.width, feat.height);
            let npix = w * h;
            let dch = feat.bins;

            // d(fused ctx voxel) = d_cols broadcast over z; voxel grad for
            // this frame scales by a_t. Collect voxel grads sparsely through
            // the splat targets.
            let tgt = &pass.targets[t];
            let mut d_context = vec![0.0; cch * npix];
            let mut d_dist = vec![0.0; dch * npix];
            for v in 0..h {
                for u in 0..w {
                    let pix = v * w + u;
                    for d in 0..dch {
                        let pi = (v * w + u) * dch + d;
                        let Some(vox) = tgt[pi] else { continue };
                        let j2 = vox % n2; // z-summed column index
                        let pd = feat.depth_dist[d * npix + pix];
                        for c in 0..cch {
                            let dvox = a_t * d_cols[c * n2 + j2];
                            if dvox == 0.0 {
                                continue;
                            }
                            // fused ctx also feeds d_alpha through this frame's voxel value
                            d_context[c * npix + pix] += dvox * pd;
                            d_dist[d * npix + pix] += dvox * feat.context[c * npix + pix];
                        }
                    }
                }
            }
            // d_alpha_t = sum over voxels of d_fused_ctx * ctx_grid_t
            if used > 1 {
                let ctx = &pass.context_grids[t];
                let mut s = 0.0;
                for c in 0..cch {
                    for i in 0..n3 {
                        let j2 = i % n2;
                        s += d_cols[c * n2 + j2] * ctx.data[c * n3 + i];
                    }
                }
                d_alpha[t] = s;
            }

            // softmax backward for the depth distribution, plus the external
            // cross-entropy gradient already expressed on the logits
            let ext = d_depth_logits.get(t);
            let mut d_logits = vec![0.0; dch * npix];
            for pix in 0..npix {
                let mut dot = 0.0;
                for d in 0..dch {
                    dot += d_dist[d * npix + pix] * feat.depth_dist[d * npix + pix];
                }
                for d in 0..dch {
                    let p = feat.depth_dist[d * npix + pix];
                    d_logits[d * npix + pix] = p * (d_dist[d * npix + pix] - dot);
                }
            }
            if let Some(ext) = ext {
                for (dl, e) in d_logits.iter_mut().zip(ext.iter()) {
                    *dl += e;
                }
            }

            // encoder backward: z = W [input;1]
            let ic = self.encoder.in_channels;
            let cols_w = ic + 1;
            for v in 0..h {
                for u in 0..w {
                    let pix = v * w + u;
                    for row in 0..self.encoder.rows() {
                        let dz = if row < cch {
                            d_context[row * npix + pix]
                        } else {
                            d_logits[(row - cch) * npix + pix]
                        };
                        if dz == 0.0 {
                            continue;
                        }
                        for c in 0..ic {
                            g_encoder[row * cols_w + c] += dz * frame.input.get(c, u, v);
                        }
                        g_encoder[row * cols_w + ic] += dz;
                    }
                }
            }
        }

        // fuser softmax backward
        if used > 1 {
            let a = &pass.fuse_weights;
            let dot: f64 = a.iter().zip(d_alpha.iter()).map(|(ai, di)| ai * di).sum();
            for t in 0..used {
                g_fuser[t] = a[t] * (d_alpha[t] - dot);
            }
        }

        let mut g = Vec::with_capacity(self.num_params());
        g.extend_from_slice(&g_encoder);
        g.extend_from_slice(&g_fuser);
        g.extend_from_slice(&g_head);
        g
    }
}

/// Intermediates kept from a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub map: TraversabilityMap,
    /// z-summed per-cell feature columns, `cols[(c*ny+y)*nx + x]`.
    pub cols: Vec<f64>,
    pub feats: Vec<FeatureImage>,
    pub targets: Vec<Vec<Option<usize>>>,
    pub context_grids: Vec<VoxelGrid>,
    pub fuse_weights: Vec<f64>,
}

/// Gradient of a scalar loss with respect to the map cells.
#[derive(Debug, Clone)]
pub struct MapGrad {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

impl MapGrad {
    pub fn zeros(n: usize) -> Self {
        Self { mu: vec![0.0; n], nu: vec![0.0; n] }
    }
}
