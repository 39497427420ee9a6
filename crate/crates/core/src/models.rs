//! Trial-level binary classifiers: a random forest over the 44 hand-crafted
//! features and a compact two-stage convolutional network over raw epochs.
//!
//! Both are written from first principles so that every numeric step is
//! reproducible from a seed: bootstrap draws, per-node feature subsampling,
//! weight initialization, batch shuffling and dropout all come from a
//! counter-based RNG, and inference is bit-stable across batch compositions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::Epoch;
use crate::Real;
use base64::Engine as _;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Random forest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features considered per split.
    pub mtry: usize,
    /// Sample weight of target-class rows; non-targets weigh 1.
    pub target_class_weight: f64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 1000, max_depth: 12, mtry: 6, target_class_weight: 5.0 }
    }
}

/// Flat tree node; `feature < 0` marks a leaf carrying the weighted class
/// masses that reached it during training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: i32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub w_target: f64,
    pub w_non_target: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

/// A leaf votes for the class with the larger weighted mass; an exact tie
/// contributes half a vote.
pub fn leaf_vote(w_target: f64, w_non_target: f64) -> f64 {
    if w_target > w_non_target {
        1.0
    } else if w_target < w_non_target {
        0.0
    } else {
        0.5
    }
}

impl Tree {
    pub fn vote(&self, row: ArrayView1<Real>) -> f64 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.feature < 0 {
                return leaf_vote(n.w_target, n.w_non_target);
            }
            i = if row[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Forest {
    pub config: ForestConfig,
    pub n_features: usize,
    pub trees: Vec<Tree>,
    /// Mean-decrease-in-impurity importances, normalized to sum to one.
    pub feature_importances: Vec<f64>,
}

fn gini(w0: f64, w1: f64) -> f64 {
    let w = w0 + w1;
    if w <= 0.0 {
        return 0.0;
    }
    let p0 = w0 / w;
    let p1 = w1 / w;
    1.0 - p0 * p0 - p1 * p1
}

struct GrowCtx<'a> {
    x: ArrayView2<'a, Real>,
    y: &'a [bool],
    w: &'a [f64],
    config: &'a ForestConfig,
    importances: Vec<f64>,
}

fn grow_node(
    ctx: &mut GrowCtx,
    nodes: &mut Vec<TreeNode>,
    indices: &[u32],
    depth: usize,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let mut w_t = 0.0;
    let mut w_n = 0.0;
    for &i in indices {
        if ctx.y[i as usize] {
            w_t += ctx.w[i as usize];
        } else {
            w_n += ctx.w[i as usize];
        }
    }
    let slot = nodes.len() as u32;
    nodes.push(TreeNode {
        feature: -1,
        threshold: 0.0,
        left: 0,
        right: 0,
        w_target: w_t,
        w_non_target: w_n,
    });
    let node_gini = gini(w_n, w_t);
    if depth >= ctx.config.max_depth || node_gini <= 0.0 || indices.len() < 2 {
        return slot;
    }

    // sample mtry distinct features in rng order
    let n_feat = ctx.x.ncols();
    let mut pool: Vec<usize> = (0..n_feat).collect();
    let mtry = ctx.config.mtry.min(n_feat);
    let (chosen, _) = pool.partial_shuffle(rng, mtry);

    let total_w = w_t + w_n;
    let mut best: Option<(f64, usize, f64)> = None; // (decrease, feature, threshold)
    let mut scratch: Vec<(f64, f64, bool)> = Vec::with_capacity(indices.len());
    for &f in chosen.iter() {
        scratch.clear();
        for &i in indices {
            scratch.push((ctx.x[(i as usize, f)], ctx.w[i as usize], ctx.y[i as usize]));
        }
        scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut lw_t = 0.0;
        let mut lw_n = 0.0;
        for k in 0..scratch.len() - 1 {
            let (v, wt, is_t) = scratch[k];
            if is_t {
                lw_t += wt;
            } else {
                lw_n += wt;
            }
            let next = scratch[k + 1].0;
            if next <= v {
                continue;
            }
            let rw_t = w_t - lw_t;
            let rw_n = w_n - lw_n;
            let decrease = total_w * node_gini
                - (lw_t + lw_n) * gini(lw_n, lw_t)
                - (rw_t + rw_n) * gini(rw_n, rw_t);
            if best.map_or(true, |(bd, _, _)| decrease > bd) {
                best = Some((decrease, f, (v + next) / 2.0));
            }
        }
    }
    let Some((decrease, feature, threshold)) = best else {
        return slot;
    };
    if decrease <= 1e-12 {
        return slot;
    }

    ctx.importances[feature] += decrease;
    let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = indices
        .iter()
        .partition(|&&i| ctx.x[(i as usize, feature)] <= threshold);
    let left = grow_node(ctx, nodes, &left_idx, depth + 1, rng);
    let right = grow_node(ctx, nodes, &right_idx, depth + 1, rng);
    let n = &mut nodes[slot as usize];
    n.feature = feature as i32;
    n.threshold = threshold;
    n.left = left;
    n.right = right;
    slot
}

impl Forest {
    pub fn fit(
        x: ArrayView2<Real>,
        y: &[bool],
        config: &ForestConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forest> {
        let n = x.nrows();
        if n != y.len() {
            return Err(Error::invalid("row/label count mismatch"));
        }
        if n < 2 {
            return Err(Error::invalid("need at least two training rows"));
        }
        if config.n_trees == 0 || config.mtry == 0 || config.max_depth == 0 {
            return Err(Error::invalid("forest config must be positive"));
        }
        if !y.iter().any(|v| *v) || y.iter().all(|v| *v) {
            return Err(Error::DegenerateInput(
                "training labels contain a single class".into(),
            ));
        }
        let w: Vec<f64> = y
            .iter()
            .map(|t| if *t { config.target_class_weight } else { 1.0 })
            .collect();
        let tree_seeds: Vec<u64> = (0..config.n_trees).map(|_| rng.gen()).collect();
        let mut ctx =
            GrowCtx { x: x.view(), y, w: &w, config, importances: vec![0.0; x.ncols()] };
        let mut trees = Vec::with_capacity(config.n_trees);
        for seed in tree_seeds {
            let mut trng = ChaCha8Rng::seed_from_u64(seed);
            let indices: Vec<u32> = (0..n).map(|_| trng.gen_range(0..n) as u32).collect();
            let mut nodes = Vec::new();
            grow_node(&mut ctx, &mut nodes, &indices, 0, &mut trng);
            trees.push(Tree { nodes });
        }
        let total: f64 = ctx.importances.iter().sum();
        let feature_importances = if total > 0.0 {
            ctx.importances.iter().map(|v| v / total).collect()
        } else {
            ctx.importances.clone()
        };
        Ok(Forest { config: config.clone(), n_features: x.ncols(), trees, feature_importances })
    }

    /// Fraction of trees voting target (ties count half).
    pub fn predict_one(&self, row: ArrayView1<Real>) -> f64 {
        let votes: f64 = self.trees.iter().map(|t| t.vote(row)).sum();
        votes / self.trees.len() as f64
    }

    pub fn predict_proba(&self, x: ArrayView2<Real>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.predict_one(r)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Forest> {
        let f: Forest = serde_json::from_str(text)?;
        if f.trees.is_empty() {
            return Err(Error::invalid("model has no trees"));
        }
        Ok(f)
    }
}

// ---------------------------------------------------------------------------
// Compact CNN
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CnnConfig {
    pub n_channels: usize,
    pub input_samples: usize,
    pub n_filters: usize,
    pub time_kernel: usize,
    pub pool: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub target_class_weight: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            n_channels: 2,
            input_samples: 350,
            n_filters: 50,
            time_kernel: 10,
            pool: 3,
            dropout: 0.1,
            learning_rate: 1e-5,
            momentum: 0.95,
            weight_decay: 1e-6,
            batch_size: 32,
            target_class_weight: 5.0,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl CnnConfig {
    /// Time points after the valid temporal convolution.
    pub fn t_conv(&self) -> usize {
        self.input_samples - self.time_kernel + 1
    }

    /// Time points after max-pooling (trailing remainder dropped).
    pub fn t_pool(&self) -> usize {
        self.t_conv() / self.pool
    }

    /// Dense-layer input width.
    pub fn dense_in(&self) -> usize {
        self.n_filters * self.t_pool()
    }

    fn validate(&self) -> Result<()> {
        if self.n_channels == 0
            || self.n_filters == 0
            || self.time_kernel == 0
            || self.pool == 0
            || self.batch_size == 0
            || self.input_samples <= self.time_kernel
        {
            return Err(Error::invalid("degenerate network dimensions"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.t_pool() == 0 {
            return Err(Error::invalid("pooling collapses the time axis"));
        }
        Ok(())
    }
}

/// Gradients for every trainable tensor, same shapes as the parameters.
pub struct CnnGrads<S> {
    pub w_time: Array2<S>,
    pub w_spat: Array2<S>,
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub w_dense: Array2<S>,
    pub b_dense: Array1<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    TimeConv,
    SpatConv,
    Gamma,
    Beta,
    DenseW,
    DenseB,
}

#[derive(Clone, Debug)]
pub struct Cnn<S> {
    pub config: CnnConfig,
    // (F × K) temporal filters, shared across channels
    w_time: Array2<S>,
    // (F × F·C) spatial/feature-combining filters
    w_spat: Array2<S>,
    gamma: Array1<S>,
    beta: Array1<S>,
    run_mean: Array1<S>,
    run_var: Array1<S>,
    // (2 × D) readout
    w_dense: Array2<S>,
    b_dense: Array1<S>,
    v_time: Array2<S>,
    v_spat: Array2<S>,
    v_gamma: Array1<S>,
    v_beta: Array1<S>,
    v_dense: Array2<S>,
    v_b: Array1<S>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    /// Weighted mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

fn glorot<S: Scalar>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| S::from_f(rng.gen_range(-limit..limit)))
}

struct ForwardCache<S> {
    cols: Vec<Array2<S>>, // per channel: (B·T1 × K)
    z_comb: Array2<S>,    // (B·T1 × F·C)
    xhat: Array2<S>,      // (B·T1 × F)
    inv_std: Array1<S>,
    relu_mask: Array2<bool>,
    pool_arg: Array2<u32>, // (B·P × F) source row of each pooled value
    dropout_mask: Option<Array2<S>>,
    flat: Array2<S>, // (B × D)
    probs: Array2<S>,
}

impl<S: Scalar + ndarray::LinalgScalar + ndarray::ScalarOperand> Cnn<S> {
    pub fn new(config: &CnnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let f = config.n_filters;
        let k = config.time_kernel;
        let c = config.n_channels;
        let d = config.dense_in();
        let w_time = glorot(f, k, k, f * k, rng);
        let w_spat = glorot(f, f * c, f * c, f, rng);
        let w_dense = glorot(2, d, d, 2, rng);
        Ok(Cnn {
            config: config.clone(),
            w_time,
            w_spat,
            gamma: Array1::from_elem(f, S::one()),
            beta: Array1::zeros(f),
            run_mean: Array1::zeros(f),
            run_var: Array1::from_elem(f, S::one()),
            w_dense,
            b_dense: Array1::zeros(2),
            v_time: Array2::zeros((f, k)),
            v_spat: Array2::zeros((f, f * c)),
            v_gamma: Array1::zeros(f),
            v_beta: Array1::zeros(f),
            v_dense: Array2::zeros((2, d)),
            v_b: Array1::zeros(2),
        })
    }

    fn check_input(&self, x: &ArrayView3<S>) -> Result<()> {
        let (_, c, t) = x.dim();
        if c != self.config.n_channels || t != self.config.input_samples {
            return Err(Error::invalid(format!(
                "input shape ({c} ch × {t} samples) does not match the network"
            )));
        }
        Ok(())
    }

    fn im2col(&self, x: &ArrayView3<S>, channel: usize) -> Array2<S> {
        let b = x.dim().0;
        let t1 = self.config.t_conv();
        let k = self.config.time_kernel;
        let mut m = Array2::zeros((b * t1, k));
        for bi in 0..b {
            for t in 0..t1 {
                for j in 0..k {
                    m[(bi * t1 + t, j)] = x[(bi, channel, t + j)];
                }
            }
        }
        m
    }

    /// Forward pass. `batch_stats` switches batch-norm between batch and
    /// running statistics; `dropout_rng` enables inverted dropout.
    fn forward(
        &self,
        x: &ArrayView3<S>,
        batch_stats: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (ForwardCache<S>, Array1<S>, Array1<S>) {
        let cfg = &self.config;
        let (b, c, _) = x.dim();
        let t1 = cfg.t_conv();
        let p = cfg.t_pool();
        let f = cfg.n_filters;

        let cols: Vec<Array2<S>> = (0..c).map(|ch| self.im2col(x, ch)).collect();
        // temporal conv per channel, interleaved into (B·T1 × F·C)
        let mut z_comb = Array2::zeros((b * t1, f * c));
        for (ch, m) in cols.iter().enumerate() {
            let y = m.dot(&self.w_time.t()); // (B·T1 × F)
            for fi in 0..f {
                let mut dst = z_comb.column_mut(fi * c + ch);
                dst.assign(&y.column(fi));
            }
        }
        let z2 = z_comb.dot(&self.w_spat.t()); // (B·T1 × F)

        // batch norm per feature map
        let rows = S::from_f((b * t1) as f64);
        let (mean, var) = if batch_stats {
            let mean = z2.sum_axis(Axis(0)) / rows;
            let mut var = Array1::zeros(f);
            for fi in 0..f {
                let m = mean[fi];
                let mut acc = S::zero();
                for r in 0..b * t1 {
                    let d = z2[(r, fi)] - m;
                    acc += d * d;
                }
                var[fi] = acc / rows;
            }
            (mean, var)
        } else {
            (self.run_mean.clone(), self.run_var.clone())
        };
        let eps = S::from_f(cfg.bn_epsilon);
        let inv_std: Array1<S> = var.mapv(|v| S::one() / (v + eps).sqrt());
        let mut xhat = z2;
        for fi in 0..f {
            let m = mean[fi];
            let is = inv_std[fi];
            for r in 0..b * t1 {
                xhat[(r, fi)] = (xhat[(r, fi)] - m) * is;
            }
        }
        let mut z3 = xhat.clone();
        for fi in 0..f {
            let g = self.gamma[fi];
            let be = self.beta[fi];
            for r in 0..b * t1 {
                z3[(r, fi)] = z3[(r, fi)] * g + be;
            }
        }

        let relu_mask = z3.mapv(|v| v > S::zero());
        let z4 = z3.mapv(|v| if v > S::zero() { v } else { S::zero() });

        // max pool along time, remembering source rows
        let mut pooled = Array2::zeros((b * p, f));
        let mut pool_arg = Array2::zeros((b * p, f));
        for bi in 0..b {
            for pi in 0..p {
                for fi in 0..f {
                    let base = bi * t1 + pi * cfg.pool;
                    let mut best_r = base;
                    let mut best_v = z4[(base, fi)];
                    for o in 1..cfg.pool {
                        let v = z4[(base + o, fi)];
                        if v > best_v {
                            best_v = v;
                            best_r = base + o;
                        }
                    }
                    pooled[(bi * p + pi, fi)] = best_v;
                    pool_arg[(bi * p + pi, fi)] = best_r as u32;
                }
            }
        }

        let dropout_mask = dropout_rng.as_deref_mut().map(|rng| {
            let keep = 1.0 - cfg.dropout;
            let scale = S::from_f(1.0 / keep);
            Array2::from_shape_fn((b * p, f), |_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    S::zero()
                }
            })
        });
        let dropped = match &dropout_mask {
            Some(m) => &pooled * m,
            None => pooled.clone(),
        };

        // flatten (time-major) and read out
        let d = cfg.dense_in();
        let mut flat = Array2::zeros((b, d));
        for bi in 0..b {
            for pi in 0..p {
                for fi in 0..f {
                    flat[(bi, pi * f + fi)] = dropped[(bi * p + pi, fi)];
                }
            }
        }
        let mut logits = flat.dot(&self.w_dense.t());
        for bi in 0..b {
            for k in 0..2 {
                logits[(bi, k)] += self.b_dense[k];
            }
        }
        let mut probs = logits.clone();
        for bi in 0..b {
            let m = if probs[(bi, 0)] > probs[(bi, 1)] { probs[(bi, 0)] } else { probs[(bi, 1)] };
            let e0 = (probs[(bi, 0)] - m).exp();
            let e1 = (probs[(bi, 1)] - m).exp();
            let z = e0 + e1;
            probs[(bi, 0)] = e0 / z;
            probs[(bi, 1)] = e1 / z;
        }
        (
            ForwardCache { cols, z_comb, xhat, inv_std, relu_mask, pool_arg, dropout_mask, flat, probs },
            mean,
            var,
        )
    }

    /// Weighted cross-entropy of cached probabilities.
    fn loss_of(&self, cache: &ForwardCache<S>, y: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (bi, &t) in y.iter().enumerate() {
            let w = if t { self.config.target_class_weight } else { 1.0 };
            // clamp away from zero, but let a NaN probability poison the
            // loss so divergence is caught rather than silently clamped
            let p = cache.probs[(bi, usize::from(t))].to_f();
            let p = if p.is_nan() { p } else { p.max(1e-300) };
            num += w * (-p.ln());
            den += w;
        }
        num / den
    }

    fn backward(&self, x: &ArrayView3<S>, y: &[bool], cache: &ForwardCache<S>) -> CnnGrads<S> {
        let cfg = &self.config;
        let (b, c, _) = x.dim();
        let t1 = cfg.t_conv();
        let p = cfg.t_pool();
        let f = cfg.n_filters;

        let total_w: f64 = y
            .iter()
            .map(|t| if *t { cfg.target_class_weight } else { 1.0 })
            .sum();
        // d loss / d logits
        let mut dlogits: Array2<S> = cache.probs.clone();
        for (bi, &t) in y.iter().enumerate() {
            let w = if t { cfg.target_class_weight } else { 1.0 };
            let scale = S::from_f(w / total_w);
            dlogits[(bi, usize::from(t))] -= S::one();
            for k in 0..2 {
                dlogits[(bi, k)] = dlogits[(bi, k)] * scale;
            }
        }
        let g_dense = dlogits.t().dot(&cache.flat); // (2 × D)
        let g_b = dlogits.sum_axis(Axis(0));
        let dflat = dlogits.dot(&self.w_dense); // (B × D)

        // unflatten, dropout, unpool
        let mut dpool = Array2::zeros((b * p, f));
        for bi in 0..b {
            for pi in 0..p {
                for fi in 0..f {
                    dpool[(bi * p + pi, fi)] = dflat[(bi, pi * f + fi)];
                }
            }
        }
        if let Some(m) = &cache.dropout_mask {
            dpool = dpool * m;
        }
        let mut dz3 = Array2::zeros((b * t1, f));
        for r in 0..b * p {
            for fi in 0..f {
                let src = cache.pool_arg[(r, fi)] as usize;
                dz3[(src, fi)] += dpool[(r, fi)];
            }
        }
        for r in 0..b * t1 {
            for fi in 0..f {
                if !cache.relu_mask[(r, fi)] {
                    dz3[(r, fi)] = S::zero();
                }
            }
        }

        // batch-norm backward (batch-statistics mode)
        let n_rows = S::from_f((b * t1) as f64);
        let mut g_gamma = Array1::zeros(f);
        let mut g_beta = Array1::zeros(f);
        let mut dz2 = Array2::zeros((b * t1, f));
        for fi in 0..f {
            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            for r in 0..b * t1 {
                let dy = dz3[(r, fi)];
                sum_dy += dy;
                sum_dy_xhat += dy * cache.xhat[(r, fi)];
            }
            g_beta[fi] = sum_dy;
            g_gamma[fi] = sum_dy_xhat;
            let g = self.gamma[fi];
            let is = cache.inv_std[fi];
            for r in 0..b * t1 {
                let dxhat = dz3[(r, fi)] * g;
                dz2[(r, fi)] = is / n_rows
                    * (n_rows * dxhat - sum_dy * g - cache.xhat[(r, fi)] * sum_dy_xhat * g);
            }
        }

        let g_spat = dz2.t().dot(&cache.z_comb); // (F × F·C)
        let dcomb = dz2.dot(&self.w_spat); // (B·T1 × F·C)
        let mut g_time = Array2::zeros((f, cfg.time_kernel));
        for ch in 0..c {
            // gather this channel's columns back into (B·T1 × F)
            let mut dy = Array2::zeros((b * t1, f));
            for fi in 0..f {
                dy.column_mut(fi).assign(&dcomb.column(fi * c + ch));
            }
            g_time = g_time + dy.t().dot(&cache.cols[ch]);
        }

        CnnGrads {
            w_time: g_time,
            w_spat: g_spat,
            gamma: g_gamma,
            beta: g_beta,
            w_dense: g_dense,
            b_dense: g_b,
        }
    }

    /// Loss and exact gradients in batch-statistics mode without dropout or
    /// any state mutation — the reference point for gradient checking.
    pub fn loss_and_grads(&self, x: ArrayView3<S>, y: &[bool]) -> Result<(f64, CnnGrads<S>)> {
        self.check_input(&x)?;
        if x.dim().0 != y.len() || y.is_empty() {
            return Err(Error::invalid("batch/label mismatch"));
        }
        let (cache, _, _) = self.forward(&x, true, None);
        let loss = self.loss_of(&cache, y);
        let grads = self.backward(&x, y, &cache);
        Ok((loss, grads))
    }

    fn sgd_update(&mut self, grads: &CnnGrads<S>) {
        let lr = S::from_f(self.config.learning_rate);
        let mu = S::from_f(self.config.momentum);
        let wd = S::from_f(self.config.weight_decay);
        fn step2<S: Scalar>(theta: &mut Array2<S>, v: &mut Array2<S>, g: &Array2<S>, lr: S, mu: S, wd: S, decay: bool) {
            for ((t, vv), gg) in theta.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                let mut grad = *gg;
                if decay {
                    grad += wd * *t;
                }
                *vv = mu * *vv + grad;
                *t -= lr * (grad + mu * *vv);
            }
        }
        fn step1<S: Scalar>(theta: &mut Array1<S>, v: &mut Array1<S>, g: &Array1<S>, lr: S, mu: S) {
            for ((t, vv), gg) in theta.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vv = mu * *vv + *gg;
                *t -= lr * (*gg + mu * *vv);
            }
        }
        step2(&mut self.w_time, &mut self.v_time, &grads.w_time, lr, mu, wd, true);
        step2(&mut self.w_spat, &mut self.v_spat, &grads.w_spat, lr, mu, wd, true);
        step2(&mut self.w_dense, &mut self.v_dense, &grads.w_dense, lr, mu, wd, true);
        step1(&mut self.gamma, &mut self.v_gamma, &grads.gamma, lr, mu);
        step1(&mut self.beta, &mut self.v_beta, &grads.beta, lr, mu);
        step1(&mut self.b_dense, &mut self.v_b, &grads.b_dense, lr, mu);
    }

    fn update_running(&mut self, mean: &Array1<S>, var: &Array1<S>, batch_rows: usize) {
        let m = S::from_f(self.config.bn_momentum);
        let one_m = S::one() - m;
        // unbiased variance for the running estimate
        let n = batch_rows as f64;
        let corr = S::from_f(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for fi in 0..self.config.n_filters {
            self.run_mean[fi] = one_m * self.run_mean[fi] + m * mean[fi];
            self.run_var[fi] = one_m * self.run_var[fi] + m * var[fi] * corr;
        }
    }

    /// Mini-batch training with Nesterov momentum. Returns per-epoch losses;
    /// fails with a divergence error the moment the loss stops being finite.
    pub fn fit(
        &mut self,
        x: ArrayView3<S>,
        y: &[bool],
        n_epochs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<FitReport> {
        self.check_input(&x)?;
        let n = x.dim().0;
        if n != y.len() || n == 0 {
            return Err(Error::invalid("batch/label mismatch"));
        }
        let bs = self.config.batch_size;
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_losses = Vec::with_capacity(n_epochs);
        let use_dropout = self.config.dropout > 0.0;
        for epoch in 0..n_epochs {
            order.shuffle(rng);
            let mut num = 0.0;
            let mut den = 0.0;
            for (batch_no, chunk) in order.chunks(bs).enumerate() {
                let mut bx = Array3::zeros((chunk.len(), self.config.n_channels, self.config.input_samples));
                let mut by = Vec::with_capacity(chunk.len());
                for (k, &i) in chunk.iter().enumerate() {
                    bx.index_axis_mut(Axis(0), k).assign(&x.index_axis(Axis(0), i));
                    by.push(y[i]);
                }
                let rng_opt = if use_dropout { Some(&mut *rng) } else { None };
                let (cache, mean, var) = self.forward(&bx.view(), true, rng_opt);
                let loss = self.loss_of(&cache, &by);
                if !loss.is_finite() {
                    return Err(Error::TrainingDivergence { epoch, batch: batch_no, loss });
                }
                let grads = self.backward(&bx.view(), &by, &cache);
                self.update_running(&mean, &var, chunk.len() * self.config.t_conv());
                self.sgd_update(&grads);
                let wsum: f64 = by
                    .iter()
                    .map(|t| if *t { self.config.target_class_weight } else { 1.0 })
                    .sum();
                num += loss * wsum;
                den += wsum;
            }
            epoch_losses.push(num / den);
        }
        Ok(FitReport { epoch_losses })
    }

    /// Target-class probability per row, using frozen running statistics.
    /// Independent of batch composition bit for bit.
    pub fn predict_proba(&self, x: ArrayView3<S>) -> Result<Vec<f64>> {
        self.check_input(&x)?;
        let b = x.dim().0;
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let one = x.slice(ndarray::s![bi..bi + 1, .., ..]);
            let (cache, _, _) = self.forward(&one, false, None);
            out.push(cache.probs[(0, 1)].to_f());
        }
        Ok(out)
    }

    // -- parameter access for gradient checking --

    pub fn n_params(&self, g: ParamGroup) -> usize {
        match g {
            ParamGroup::TimeConv => self.w_time.len(),
            ParamGroup::SpatConv => self.w_spat.len(),
            ParamGroup::Gamma => self.gamma.len(),
            ParamGroup::Beta => self.beta.len(),
            ParamGroup::DenseW => self.w_dense.len(),
            ParamGroup::DenseB => self.b_dense.len(),
        }
    }

    pub fn param_mut(&mut self, g: ParamGroup, i: usize) -> &mut S {
        match g {
            ParamGroup::TimeConv => self.w_time.as_slice_mut().unwrap().get_mut(i).unwrap(),
            ParamGroup::SpatConv => self.w_spat.as_slice_mut().unwrap().get_mut(i).unwrap(),
            ParamGroup::Gamma => self.gamma.as_slice_mut().unwrap().get_mut(i).unwrap(),
            ParamGroup::Beta => self.beta.as_slice_mut().unwrap().get_mut(i).unwrap(),
            ParamGroup::DenseW => self.w_dense.as_slice_mut().unwrap().get_mut(i).unwrap(),
            ParamGroup::DenseB => self.b_dense.as_slice_mut().unwrap().get_mut(i).unwrap(),
        }
    }

    pub fn grad_at(grads: &CnnGrads<S>, g: ParamGroup, i: usize) -> S {
        match g {
            ParamGroup::TimeConv => grads.w_time.as_slice().unwrap()[i],
            ParamGroup::SpatConv => grads.w_spat.as_slice().unwrap()[i],
            ParamGroup::Gamma => grads.gamma.as_slice().unwrap()[i],
            ParamGroup::Beta => grads.beta.as_slice().unwrap()[i],
            ParamGroup::DenseW => grads.w_dense.as_slice().unwrap()[i],
            ParamGroup::DenseB => grads.b_dense.as_slice().unwrap()[i],
        }
    }

    // -- serialization --

    pub fn to_json(&self) -> Result<String> {
        let mut tensors = std::collections::BTreeMap::new();
        let mut put1 = |name: &str, a: &Array1<S>| {
            tensors.insert(name.to_string(), encode_tensor(&[a.len()], a.iter().copied()));
        };
        put1("gamma", &self.gamma);
        put1("beta", &self.beta);
        put1("run_mean", &self.run_mean);
        put1("run_var", &self.run_var);
        put1("b_dense", &self.b_dense);
        let mut put2 = |name: &str, a: &Array2<S>| {
            tensors.insert(
                name.to_string(),
                encode_tensor(&[a.nrows(), a.ncols()], a.iter().copied()),
            );
        };
        put2("w_time", &self.w_time);
        put2("w_spat", &self.w_spat);
        put2("w_dense", &self.w_dense);
        let doc = CnnJson { config: self.config.clone(), tensors };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Cnn<S>> {
        let doc: CnnJson = serde_json::from_str(text)?;
        doc.config.validate()?;
        let f = doc.config.n_filters;
        let c = doc.config.n_channels;
        let k = doc.config.time_kernel;
        let d = doc.config.dense_in();
        let t2 = |name: &str, shape: [usize; 2]| -> Result<Array2<S>> {
            let t = doc
                .tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
            let values = decode_tensor::<S>(t, &[shape[0], shape[1]])?;
            Ok(Array2::from_shape_vec(shape, values).expect("shape checked"))
        };
        let t1 = |name: &str, len: usize| -> Result<Array1<S>> {
            let t = doc
                .tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
            Ok(Array1::from_vec(decode_tensor::<S>(t, &[len])?))
        };
        Ok(Cnn {
            w_time: t2("w_time", [f, k])?,
            w_spat: t2("w_spat", [f, f * c])?,
            w_dense: t2("w_dense", [2, d])?,
            gamma: t1("gamma", f)?,
            beta: t1("beta", f)?,
            run_mean: t1("run_mean", f)?,
            run_var: t1("run_var", f)?,
            b_dense: t1("b_dense", 2)?,
            v_time: Array2::zeros((f, k)),
            v_spat: Array2::zeros((f, f * c)),
            v_gamma: Array1::zeros(f),
            v_beta: Array1::zeros(f),
            v_dense: Array2::zeros((2, d)),
            v_b: Array1::zeros(2),
            config: doc.config,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: Vec<usize>,
    /// Little-endian f32 values, base64.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CnnJson {
    config: CnnConfig,
    tensors: std::collections::BTreeMap<String, TensorJson>,
}

fn encode_tensor<S: Scalar>(shape: &[usize], values: impl Iterator<Item = S>) -> TensorJson {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v.to_f() as f32).to_le_bytes());
    }
    TensorJson {
        shape: shape.to_vec(),
        data: base64::engine::general_purpose::STANDARD.encode(bytes),
    }
}

fn decode_tensor<S: Scalar>(t: &TensorJson, expect_shape: &[usize]) -> Result<Vec<S>> {
    if t.shape != expect_shape {
        return Err(Error::invalid(format!(
            "tensor shape {:?} does not match expected {:?}",
            t.shape, expect_shape
        )));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&t.data)
        .map_err(|e| Error::invalid(format!("bad tensor payload: {e}")))?;
    let n: usize = expect_shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::invalid("tensor byte length mismatch"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| S::from_f(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

/// Cut the [0, 700] ms post-onset window (epoch samples 50..400) of the two
/// scalp channels into a network input row.
pub fn epoch_cnn_input<S: Scalar>(epoch: &Epoch) -> Array2<S> {
    let mut m = Array2::zeros((2, 350));
    for (c, ch) in [crate::types::Channel::Cz, crate::types::Channel::Pz]
        .iter()
        .enumerate()
    {
        for (t, v) in epoch.channel(*ch)[50..400].iter().enumerate() {
            m[(c, t)] = S::from_f(*v);
        }
    }
    m
}

/// Stack epochs into a (B × 2 × 350) network input tensor.
pub fn stack_cnn_inputs<S: Scalar>(epochs: &[&Epoch]) -> Array3<S> {
    let mut out = Array3::zeros((epochs.len(), 2, 350));
    for (i, e) in epochs.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&epoch_cnn_input::<S>(e));
    }
    out
}
