//! Self-supervised training: dataset assembly from estimator labels,
//! label-distribution-smoothing weights, depth-modality dropout, the
//! two-term loss (weighted absolute traversability error sampled from the
//! map by differentiable bilinear interpolation, plus a depth-bin
//! cross-entropy), and a momentum-SGD loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::observation_to_input;
use crate::camera::DepthImage;
use crate::error::{Error, Result};
use crate::estimator::LabeledStep;
use crate::grid::TraversabilityMap;
use crate::kinodynamics::State2D;
use crate::model::{FrameInput, MapGrad, TravNet};
use crate::util::{maybe_par_map, wrap_angle};
use crate::world::Observation;

/// One self-supervision sample: an observation sequence ending at the anchor
/// step plus label poses/traversability expressed in the anchor's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    /// N frames; `rel_pose` of each is relative to the anchor's pose.
    pub frames: Vec<FrameInput>,
    /// Per-frame depth targets for the cross-entropy term. Never touched by
    /// dropout.
    pub depth_targets: Vec<DepthImage>,
    /// 2M label poses in the anchor frame.
    pub label_poses: Vec<State2D>,
    /// 2M (mu, nu) labels.
    pub label_trav: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on the depth cross-entropy term.
    pub lambda: f64,
    /// LDS kernel bandwidth in bins.
    pub lds_kernel_sigma: f64,
    pub lds_bins: usize,
    pub depth_dropout_p: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lds_kernel_sigma: 2.0,
            lds_bins: 20,
            depth_dropout_p: 0.3,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 100,
            batch_size: 8,
            rng_seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.depth_dropout_p) {
            return Err(Error::InvalidConfig("depth_dropout_p must be in [0,1]".into()));
        }
        if self.lds_bins == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("lds_bins and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Assemble training tuples from a time-aligned observation log and the
/// estimator's labeled log.
///
/// An anchor `k` is valid when its full frame context (`n` frames) and label
/// window (`2m` steps, `k-m+1 ..= k+m`) lie inside the sensed history, i.e.
/// `k - m + 1 >= n - 1` and `k + m <= len - 1`. Returns the tuples and the
/// number of skipped anchors.
pub fn build_dataset(
    observations: &[Observation],
    labels: &[LabeledStep],
    n: usize,
    m: usize,
    max_range: f64,
) -> Result<(Vec<TrainingTuple>, usize)> {
    if observations.len() != labels.len() {
        return Err(Error::InvalidInput("observation and label logs must be time-aligned".into()));
    }
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig("n and m must be positive".into()));
    }
    let len = labels.len();
    let mut tuples = Vec::new();
    let mut skipped = 0;
    for k in 0..len {
        let lo = (k + 1).checked_sub(m);
        let frames_ok = lo.map_or(false, |lo| lo >= n - 1);
        let labels_ok = k + m <= len.saturating_sub(1);
        if !frames_ok || !labels_ok {
            skipped += 1;
            continue;
        }
        let anchor = labels[k].pose;
        let frames: Vec<FrameInput> = (k + 1 - n..=k)
            .map(|i| {
                let pose = labels[i].pose;
                let rel = relative_pose(&anchor, &pose);
                FrameInput {
                    input: observation_to_input(&observations[i], max_range),
                    occ_depth: observations[i].depth.clone(),
                    rel_pose: rel,
                }
            })
            .collect();
        let depth_targets: Vec<DepthImage> =
            (k + 1 - n..=k).map(|i| observations[i].depth.clone()).collect();
        let mut label_poses = Vec::with_capacity(2 * m);
        let mut label_trav = Vec::with_capacity(2 * m);
        for i in k + 1 - m..=k + m {
            label_poses.push(relative_pose(&anchor, &labels[i].pose));
            label_trav.push((labels[i].mu, labels[i].nu));
        }
        tuples.push(TrainingTuple { frames, depth_targets, label_poses, label_trav });
    }
    Ok((tuples, skipped))
}

/// Pose `b` expressed in the frame of pose `a`.
pub fn relative_pose(a: &State2D, b: &State2D) -> State2D {
    let (x, y) = a.world_to_local(b.px, b.py);
    State2D::new(x, y, wrap_angle(b.theta - a.theta))
}

/// Inverse-effective-density label weights (label distribution smoothing).
///
/// Histogram the labels into `lds_bins` over [0, 1], convolve with a Gaussian
/// of `lds_kernel_sigma` bins, weight each label by the reciprocal of its
/// bin's effective density, then normalize to mean 1.
pub fn lds_weights(trav_labels: &[f64], cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if trav_labels.is_empty() {
        return Err(Error::InvalidInput("empty label set".into()));
    }
    let nb = cfg.lds_bins;
    let bin_of = |v: f64| ((v.clamp(0.0, 1.0) * nb as f64) as usize).min(nb - 1);
    let mut hist = vec![0.0f64; nb];
    for &v in trav_labels {
        hist[bin_of(v)] += 1.0;
    }
    let sigma = cfg.lds_kernel_sigma;
    let eff = if sigma > 0.0 {
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        let mut eff = vec![0.0f64; nb];
        for (i, e) in eff.iter_mut().enumerate() {
            // renormalize by the in-range kernel mass so boundary bins are
            // not artificially down-weighted
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let src = i as isize + (j as isize - radius);
                if (0..nb as isize).contains(&src) {
                    acc += hist[src as usize] * kv;
                    mass += kv;
                }
            }
            *e = acc / mass;
        }
        eff
    } else {
        hist.clone()
    };
    let mut w: Vec<f64> = trav_labels.iter().map(|&v| 1.0 / eff[bin_of(v)].max(1e-12)).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    for wi in w.iter_mut() {
        *wi /= mean;
    }
    Ok(w)
}

/// Bilinear map sample with the partial derivatives needed for training.
#[derive(Debug, Clone, Copy)]
pub struct MapSample {
    pub mu: f64,
    pub nu: f64,
    /// (cell index, d value / d cell) per channel.
    pub d_mu_cells: [(usize, f64); 4],
    pub d_nu_cells: [(usize, f64); 4],
    /// Spatial partials (d mu/dx, d mu/dy, d nu/dx, d nu/dy).
    pub d_pos: [f64; 4],
}

/// Differentiable bilinear interpolation of both map channels at a point.
pub fn sample_map_bilinear(map: &TraversabilityMap, px: f64, py: f64) -> MapSample {
    let bm = map.mu.bilinear(px, py);
    let bn = map.nu.bilinear(px, py);
    MapSample {
        mu: bm.value,
        nu: bn.value,
        d_mu_cells: bm.corners,
        d_nu_cells: bn.corners,
        d_pos: [bm.dvdx, bm.dvdy, bn.dvdx, bn.dvdy],
    }
}

/// Value and parameter gradient of the full loss for one tuple.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub trav_term: f64,
    pub depth_term: f64,
    pub grad: Vec<f64>,
}

/// The two-term loss with analytic gradients through the bilinear sampling
/// and the stand-in network.
///
/// `weights` holds one LDS weight per label step. Label poses outside the map
/// are down-weighted to zero.
pub fn loss(net: &TravNet, tuple: &TrainingTuple, weights: &[f64], cfg: &LossConfig) -> Result<LossEval> {
    if weights.len() != tuple.label_trav.len() {
        return Err(Error::InvalidInput("one weight per label step required".into()));
    }
    let pass = net.forward(&tuple.frames)?;
    let map = &pass.map;
    let n2 = map.mu.data.len();
    let two_m = tuple.label_trav.len() as f64;
    let mut d_map = MapGrad::zeros(n2);

    let mut trav_term = 0.0;
    for ((pose, &(lmu, lnu)), &w) in tuple.label_poses.iter().zip(&tuple.label_trav).zip(weights) {
        let w = if map.mu.contains(pose.px, pose.py) { w } else { 0.0 };
        if w == 0.0 {
            continue;
        }
        let s = sample_map_bilinear(map, pose.px, pose.py);
        trav_term += w * ((s.mu - lmu).abs() + (s.nu - lnu).abs());
        let gmu = w * (s.mu - lmu).signum() / two_m;
        let gnu = w * (s.nu - lnu).signum() / two_m;
        for &(idx, dw) in &s.d_mu_cells {
            d_map.mu[idx] += gmu * dw;
        }
        for &(idx, dw) in &s.d_nu_cells {
            d_map.nu[idx] += gnu * dw;
        }
    }
    trav_term /= two_m;

    // depth cross-entropy over the frames the variant consumes
    let used = net.cfg.frames_used();
    let first = tuple.frames.len() - used;
    let bins = net.cfg.bins;
    let mut n_valid = 0usize;
    for t in 0..used {
        let dt = &tuple.depth_targets[first + t];
        n_valid += dt.data.iter().filter(|&&d| d > 0.0).count();
    }
    let mut depth_term = 0.0;
    let mut d_logits: Vec<Vec<f64>> = Vec::with_capacity(used);
    for t in 0..used {
        let feat = &pass.feats[t];
        let target = &tuple.depth_targets[first + t];
        let npix = feat.width * feat.height;
        let mut dl = vec![0.0; feat.bins * npix];
        if cfg.lambda > 0.0 && n_valid > 0 {
            let scale = cfg.lambda / n_valid as f64;
            for pix in 0..npix {
                let d = target.data[pix];
                if d <= 0.0 {
                    continue;
                }
                let tbin = bins.index_of(d);
                let p = feat.depth_dist[tbin * npix + pix].max(1e-300);
                depth_term += -p.ln() / n_valid as f64;
                // dCE/dlogit = p - onehot
                for b in 0..feat.bins {
                    let pb = feat.depth_dist[b * npix + pix];
                    dl[b * npix + pix] = scale * (pb - if b == tbin { 1.0 } else { 0.0 });
                }
            }
        }
        d_logits.push(dl);
    }
    depth_term *= cfg.lambda;

    let grad = net.backward(&tuple.frames, &pass, &d_map, &d_logits);
    Ok(LossEval { loss: trav_term + depth_term, trav_term, depth_term, grad })
}

/// Apply depth-modality dropout to a tuple: with probability `p` the
/// occupancy-branch depth inputs are replaced by all-invalid images. Depth
/// *targets* are never modified.
pub fn depth_dropout<R: Rng>(tuple: &TrainingTuple, p: f64, rng: &mut R) -> TrainingTuple {
    let mut out = tuple.clone();
    if p > 0.0 && rng.gen::<f64>() < p {
        for f in out.frames.iter_mut() {
            f.occ_depth = DepthImage::invalid(f.occ_depth.width, f.occ_depth.height);
        }
    }
    out
}

/// Per-epoch (train, validation) loss.
pub type LossCurve = Vec<(f64, f64)>;

/// Mini-batch momentum SGD. Deterministic for a fixed `rng_seed`.
pub fn train(
    train_set: &[TrainingTuple],
    val_set: &[TrainingTuple],
    net: &mut TravNet,
    cfg: &LossConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    // LDS weights from the training label distribution (mean of the two
    // channels per label step)
    let all_labels: Vec<f64> = train_set
        .iter()
        .flat_map(|t| t.label_trav.iter().map(|&(m, n)| 0.5 * (m + n)))
        .collect();
    let flat_weights = lds_weights(&all_labels, cfg)?;
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(train_set.len());
    let mut off = 0;
    for t in train_set {
        let n = t.label_trav.len();
        weights.push(flat_weights[off..off + n].to_vec());
        off += n;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut velocity = vec![0.0; net.num_params()];
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            // dropout decided sequentially so the draw order is stable
            let dropped: Vec<(usize, TrainingTuple)> = batch
                .iter()
                .map(|&i| (i, depth_dropout(&train_set[i], cfg.depth_dropout_p, &mut rng)))
                .collect();
            let evals = maybe_par_map(&dropped, |(i, t)| loss(net, t, &weights[*i], cfg));
            let mut grad = vec![0.0; net.num_params()];
            let mut batch_loss = 0.0;
            for e in evals {
                let e = e?;
                batch_loss += e.loss;
                for (g, eg) in grad.iter_mut().zip(e.grad.iter()) {
                    *g += eg;
                }
            }
            let bn = batch.len() as f64;
            batch_loss /= bn;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            n_batches += 1;
            if cfg.learning_rate > 0.0 {
                let mut params = net.params();
                for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad.iter()) {
                    *v = cfg.momentum * *v - cfg.learning_rate * g / bn;
                    *p += *v;
                }
                net.set_params(&params);
            }
        }
        let train_loss = epoch_loss / n_batches as f64;
        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(net, val_set, cfg)?
        };
        curve.push((train_loss, val_loss));
    }
    Ok(curve)
}

/// Mean loss over a dataset with unit weights and no dropout.
pub fn evaluate_loss(net: &TravNet, set: &[TrainingTuple], cfg: &LossConfig) -> Result<f64> {
    let evals = maybe_par_map(set, |t| {
        let w = vec![1.0; t.label_trav.len()];
        loss(net, t, &w, cfg)
    });
    let mut total = 0.0;
    for e in evals {
        total += e?.loss;
    }
    Ok(total / set.len() as f64)
}

/// Mean absolute traversability error of predictions at the label poses
/// (both channels averaged). The offline-validation metric.
pub fn mean_abs_error(net: &TravNet, set: &[TrainingTuple]) -> Result<f64> {
    let errs = maybe_par_map(set, |t| -> Result<(f64, usize)> {
        let map = net.predict(&t.frames)?;
        let mut e = 0.0;
        let mut n = 0;
        for (pose, &(lmu, lnu)) in t.label_poses.iter().zip(&t.label_trav) {
            if !map.mu.contains(pose.px, pose.py) {
                continue;
            }
            let (mu, nu) = map.sample(pose.px, pose.py);
            e += 0.5 * ((mu - lmu).abs() + (nu - lnu).abs());
            n += 1;
        }
        Ok((e, n))
    });
    let mut total = 0.0;
    let mut count = 0usize;
    for r in errs {
        let (e, n) = r?;
        total += e;
        count += n;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no in-map label poses to evaluate".into()));
    }
    Ok(total / count as f64)
}
