//! Hash head (fully connected, batch norm, tanh), the similarity,
//! quantization and alignment losses, and momentum SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{Affine, AffineVars};
use crate::tensor::{Graph, Mat, Rng, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct HashLayer {
    /// bits × feature_dim
    pub fc: Affine,
    pub bn_gain: Mat,
    pub bn_bias: Mat,
    pub running_mean: Mat,
    pub running_var: Mat,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl HashLayer {
    pub fn new(bits: usize, feature_dim: usize, rng: &mut Rng) -> Self {
        HashLayer {
            fc: Affine::uniform(bits, feature_dim, rng),
            bn_gain: Mat::filled(1, bits, 1.0),
            bn_bias: Mat::zeros(1, bits),
            running_mean: Mat::zeros(1, bits),
            running_var: Mat::filled(1, bits, 1.0),
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
        }
    }

    pub fn bits(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.fc.in_dim()
    }

    /// Exponential moving average update; the variance fed in is unbiased.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.bn_momentum;
        for j in 0..self.bits() {
            let rm = self.running_mean.get(0, j);
            let rv = self.running_var.get(0, j);
            self.running_mean
                .set(0, j, (1.0 - m) * rm + m * stats.mean.get(0, j));
            self.running_var
                .set(0, j, (1.0 - m) * rv + m * stats.var_unbiased.get(0, j));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HashVars {
    pub fc: AffineVars,
    pub gain: Var,
    pub bias: Var,
}

impl HashVars {
    pub fn bind(g: &mut Graph, layer: &HashLayer, trainable: bool) -> Self {
        let fc = AffineVars::bind(g, &layer.fc, trainable);
        let (gain, bias) = if trainable {
            (
                g.param(layer.bn_gain.clone()),
                g.param(layer.bn_bias.clone()),
            )
        } else {
            (
                g.constant(layer.bn_gain.clone()),
                g.constant(layer.bn_bias.clone()),
            )
        };
        HashVars { fc, gain, bias }
    }
}

/// Per-bit statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Mat,
    pub var_unbiased: Mat,
}

fn column_stats(z: &Mat) -> BatchStats {
    let n = z.rows() as f64;
    let mean = z.mean_rows();
    let mut var = Mat::zeros(1, z.cols());
    for r in 0..z.rows() {
        for j in 0..z.cols() {
            let d = z.get(r, j) - mean.get(0, j);
            var.set(0, j, var.get(0, j) + d * d);
        }
    }
    BatchStats {
        mean,
        var_unbiased: var.scale(1.0 / (n - 1.0)),
    }
}

pub struct HashOutput {
    /// n × bits, strictly inside (−1, 1).
    pub h: Var,
    /// Present when batch statistics were used; feed to [`HashLayer::update_running`].
    pub stats: Option<BatchStats>,
}

/// FC → batch norm → tanh. Training batches of two or more use batch
/// statistics (biased variance); everything else uses the running ones.
pub fn hash_forward(
    g: &mut Graph,
    features: Var,
    vars: &HashVars,
    layer: &HashLayer,
    training: bool,
) -> Result<HashOutput> {
    let n = g.value(features).rows();
    if n == 0 {
        return Err(Error::Contract("hash_forward on an empty batch".into()));
    }
    let z = vars.fc.apply(g, features)?;
    let (normed, stats) = if training && n >= 2 {
        let stats = column_stats(g.value(z));
        let zt = g.transpose(z);
        let zt = g.normalize_rows(zt, layer.bn_eps)?;
        (g.transpose(zt), Some(stats))
    } else {
        let shift = g.constant(layer.running_mean.scale(-1.0));
        let inv_std = g.constant(layer.running_var.map(|v| 1.0 / (v + layer.bn_eps).sqrt()));
        let centred = g.add_row(z, shift)?;
        (g.mul_row(centred, inv_std)?, None)
    };
    let scaled = g.mul_row(normed, vars.gain)?;
    let shifted = g.add_row(scaled, vars.bias)?;
    Ok(HashOutput {
        h: g.tanh(shifted),
        stats,
    })
}

/// n×n 0/1 matrix: 1 where two samples share at least one label.
/// `labels` is C×n multi-hot (one column per sample).
pub fn similarity_matrix(labels: &Mat) -> Mat {
    let n = labels.cols();
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let shared =
                (0..labels.rows()).any(|c| labels.get(c, i) != 0.0 && labels.get(c, j) != 0.0);
            s.set(i, j, shared as u8 as f64);
        }
    }
    s
}

/// `Σ_{i<j} softplus(θᵢⱼ) − sᵢⱼθᵢⱼ` with `θ = ½ hᵢᵀhⱼ`.
pub fn loss_similarity(g: &mut Graph, h: Var, similarity: &Mat) -> Result<Var> {
    let n = g.value(h).rows();
    if similarity.shape() != (n, n) {
        return Err(Error::shape(
            "loss_similarity",
            format!(
                "{n} samples but a {:?} similarity matrix",
                similarity.shape()
            ),
        ));
    }
    if n < 2 {
        log::warn!("similarity loss on a batch of {n}: no pairs");
        return Ok(g.constant(Mat::scalar(0.0)));
    }
    let mut upper = Mat::zeros(n, n);
    let mut weighted = Mat::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            upper.set(i, j, 1.0);
            weighted.set(i, j, similarity.get(i, j));
        }
    }
    let gram = g.matmul_nt(h, h)?;
    let theta = g.scale(gram, 0.5);
    let sp = g.softplus(theta);
    let mask = g.constant(upper);
    let sp = g.mul(sp, mask)?;
    let s = g.constant(weighted);
    let st = g.mul(theta, s)?;
    let per_pair = g.sub(sp, st)?;
    Ok(g.sum(per_pair))
}

/// `‖H − Bᵀ‖²` where column `i` of `b_cols` is the code of batch row `i`.
pub fn loss_quantization(g: &mut Graph, h: Var, b_cols: &Mat) -> Result<Var> {
    if g.value(h).shape() != (b_cols.cols(), b_cols.rows()) {
        return Err(Error::shape(
            "loss_quantization",
            format!(
                "H is {:?}, codes are {:?}",
                g.value(h).shape(),
                b_cols.shape()
            ),
        ));
    }
    let target = g.constant(b_cols.transpose());
    let diff = g.sub(h, target)?;
    Ok(g.sum_sq(diff))
}

/// `‖Y − TᵀB‖²` with `Y` C×n, `T` b×C and `B` b×n; only `T` is differentiable.
pub fn loss_alignment(g: &mut Graph, y: &Mat, t: Var, b_cols: &Mat) -> Result<Var> {
    let (bits, classes) = g.value(t).shape();
    if y.rows() != classes || b_cols.rows() != bits || y.cols() != b_cols.cols() {
        return Err(Error::shape(
            "loss_alignment",
            format!(
                "Y {:?}, T {:?}, B {:?}",
                y.shape(),
                (bits, classes),
                b_cols.shape()
            ),
        ));
    }
    let tt = g.transpose(t);
    let b = g.constant(b_cols.clone());
    let tb = g.matmul(tt, b)?;
    let y = g.constant(y.clone());
    let diff = g.sub(y, tb)?;
    Ok(g.sum_sq(diff))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 1.0,
            gamma: 3.0,
        }
    }
}

/// `αLa + βLq + γLs`.
pub fn total_loss(g: &mut Graph, w: LossWeights, la: Var, lq: Var, ls: Var) -> Result<Var> {
    if w.alpha < 0.0 || w.beta < 0.0 || w.gamma < 0.0 {
        return Err(Error::Contract("loss weights must be non-negative".into()));
    }
    g.weighted_sum(&[(w.alpha, la), (w.beta, lq), (w.gamma, ls)])
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    velocity: Vec<Mat>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Mat] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "sgd_step",
                "parameter and gradient counts differ",
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Mat::zeros(p.rows(), p.cols()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                "parameter set changed between steps",
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    "gradient shape differs from parameter",
                ));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_many, seeded, softplus};

    fn one_hot_cols(labels: &[usize], c: usize) -> Mat {
        let mut y = Mat::zeros(c, labels.len());
        for (j, &l) in labels.iter().enumerate() {
            y.set(l, j, 1.0);
        }
        y
    }

    #[test]
    fn zero_layer_gives_zero_codes() {
        let mut rng = seeded(0);
        let mut layer = HashLayer::new(4, 3, &mut rng);
        layer.fc = Affine::zeros(4, 3);
        let mut g = Graph::new();
        let x = g.constant(Mat::randn(5, 3, 1.0, &mut rng));
        let vars = HashVars::bind(&mut g, &layer, true);
        let out = hash_forward(&mut g, x, &vars, &layer, true).unwrap();
        assert_eq!(g.value(out.h).max_abs(), 0.0);
        let out = hash_forward(&mut g, x, &vars, &layer, false).unwrap();
        assert_eq!(g.value(out.h).max_abs(), 0.0);
    }

    #[test]
    fn single_sample_uses_running_stats() {
        let mut rng = seeded(1);
        let layer = HashLayer::new(4, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Mat::randn(1, 3, 1.0, &mut rng));
        let vars = HashVars::bind(&mut g, &layer, true);
        let out = hash_forward(&mut g, x, &vars, &layer, true).unwrap();
        assert!(out.stats.is_none());
        let h = g.value(out.h);
        assert!(h.is_finite() && h.max_abs() > 0.0);
        // running mean 0 and var 1: plain tanh of the affine map, up to eps
        let z = layer.fc.apply(g.value(x)).unwrap();
        for j in 0..4 {
            let expect = (z.get(0, j) / (1.0 + BN_EPS).sqrt()).tanh();
            assert!((h.get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_statistics() {
        let mut rng = seeded(2);
        let mut layer = HashLayer::new(3, 5, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Mat::randn(6, 5, 2.0, &mut rng));
        let vars = HashVars::bind(&mut g, &layer, true);
        let out = hash_forward(&mut g, x, &vars, &layer, true).unwrap();
        // tanh⁻¹ of the output is standardized per column
        let pre = g.value(out.h).map(f64::atanh);
        let mean = pre.mean_rows();
        assert!(mean.max_abs() < 1e-9);
        let stats = out.stats.unwrap();
        layer.update_running(&stats);
        assert!((layer.running_mean.get(0, 0) - 0.1 * stats.mean.get(0, 0)).abs() < 1e-15);
        assert!(layer.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let mut rng = seeded(3);
        let layer = HashLayer::new(8, 4, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Mat::randn(8, 4, 1.0, &mut rng));
        let vars = HashVars::bind(&mut g, &layer, false);
        let out = hash_forward(&mut g, x, &vars, &layer, true).unwrap();
        assert!(g.value(out.h).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn hash_forward_gradient() {
        let mut rng = seeded(4);
        for _ in 0..3 {
            let layer = HashLayer::new(3, 4, &mut rng);
            let x = Mat::randn(5, 4, 1.0, &mut rng);
            let points = [
                x,
                layer.fc.weight.clone(),
                layer.fc.bias.clone(),
                Mat::uniform(1, 3, 0.5, 1.5, &mut rng),
                Mat::randn(1, 3, 0.2, &mut rng),
            ];
            let err = grad_check_many(
                |g, v| {
                    let vars = HashVars {
                        fc: AffineVars {
                            weight: v[1],
                            bias: v[2],
                        },
                        gain: v[3],
                        bias: v[4],
                    };
                    let out = hash_forward(g, v[0], &vars, &layer, true)?;
                    let w = g.constant(Mat::randn(5, 3, 1.0, &mut seeded(99)));
                    let p = g.mul(out.h, w)?;
                    Ok(g.sum(p))
                },
                &points,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn similarity_loss_values() {
        let mut g = Graph::new();
        // orthogonal rows, similar pair: log 2
        let h = g.constant(Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let s = similarity_matrix(&one_hot_cols(&[0, 0], 2));
        let l = loss_similarity(&mut g, h, &s).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let s = similarity_matrix(&one_hot_cols(&[0, 1], 2));
        let l = loss_similarity(&mut g, h, &s).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let h = g.constant(Mat::filled(2, 16, 1.0));
        let s = similarity_matrix(&one_hot_cols(&[3, 3], 4));
        let l = loss_similarity(&mut g, h, &s).unwrap();
        let expect = (1.0 + (-8f64).exp()).ln();
        assert!((g.value(l).item() - expect).abs() < 1e-15);
        assert!((g.value(l).item() - 3.354e-4).abs() < 1e-7);

        let one = g.constant(Mat::filled(1, 16, 1.0));
        let l = loss_similarity(&mut g, one, &Mat::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn similarity_uses_shared_labels() {
        let mut y = Mat::zeros(3, 3);
        y.set(0, 0, 1.0);
        y.set(1, 0, 1.0);
        y.set(1, 1, 1.0);
        y.set(2, 2, 1.0);
        let s = similarity_matrix(&y);
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(1, 2), 0.0);
    }

    #[test]
    fn similarity_loss_matches_pair_loop_and_is_permutation_symmetric() {
        let mut rng = seeded(5);
        let h = Mat::uniform(6, 4, -1.0, 1.0, &mut rng);
        let labels = [0, 1, 0, 2, 1, 1];
        let s = similarity_matrix(&one_hot_cols(&labels, 3));
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in i + 1..6 {
                let theta = 0.5 * crate::tensor::dot(h.row(i), h.row(j));
                oracle += softplus(theta) - s.get(i, j) * theta;
            }
        }
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let l = loss_similarity(&mut g, hv, &s).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-12);

        let perm = [3, 0, 5, 1, 4, 2];
        let pl: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
        let ph = g.constant(h.select_rows(&perm));
        let ps = similarity_matrix(&one_hot_cols(&pl, 3));
        let l2 = loss_similarity(&mut g, ph, &ps).unwrap();
        assert!((g.value(l2).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn quantization_loss() {
        let mut rng = seeded(6);
        let b = Mat::uniform(4, 3, -1.0, 1.0, &mut rng).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let mut g = Graph::new();
        let h = g.constant(b.transpose());
        let l = loss_quantization(&mut g, h, &b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let zero = g.constant(Mat::zeros(1, 16));
        let l = loss_quantization(&mut g, zero, &Mat::filled(16, 1, -1.0)).unwrap();
        assert_eq!(g.value(l).item(), 16.0);

        let hm = Mat::uniform(3, 4, -1.0, 1.0, &mut rng);
        let hv = g.constant(hm.clone());
        let l = loss_quantization(&mut g, hv, &b).unwrap();
        let mut oracle = 0.0;
        for i in 0..3 {
            for k in 0..4 {
                oracle += (hm.get(i, k) - b.get(k, i)).powi(2);
            }
        }
        assert!((g.value(l).item() - oracle).abs() < 1e-12);

        // sign(Hᵀ) is the per-entry minimizer
        let best = g.value(l).item();
        let sign_b = hm.transpose().map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let ls = loss_quantization(&mut g, hv, &sign_b).unwrap();
        assert!(g.value(ls).item() <= best);
        assert!(loss_quantization(&mut g, hv, &Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn alignment_loss() {
        let y = one_hot_cols(&[0, 1, 1], 2);
        let b = Mat::from_rows(&[[1.0, -1.0, -1.0], [1.0, 1.0, -1.0]]);
        let mut g = Graph::new();
        let t0 = g.constant(Mat::zeros(2, 2));
        let l = loss_alignment(&mut g, &y, t0, &b).unwrap();
        assert_eq!(g.value(l).item(), 3.0);

        // hand expansion for a 2-bit, 2-class toy
        let tm = Mat::from_rows(&[[0.5, -0.5], [0.25, 0.5]]);
        let t = g.constant(tm.clone());
        let l = loss_alignment(&mut g, &y, t, &b).unwrap();
        let mut oracle = 0.0;
        for c in 0..2 {
            for j in 0..3 {
                let tb = tm.get(0, c) * b.get(0, j) + tm.get(1, c) * b.get(1, j);
                oracle += (y.get(c, j) - tb).powi(2);
            }
        }
        assert!((g.value(l).item() - oracle).abs() < 1e-14);

        let mut rng = seeded(7);
        for _ in 0..3 {
            let err = grad_check(
                |g, t| loss_alignment(g, &y, t, &b),
                &Mat::randn(2, 2, 1.0, &mut rng),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::new();
        let one = g.constant(Mat::scalar(1.0));
        let l = total_loss(&mut g, LossWeights::default(), one, one, one).unwrap();
        assert!((g.value(l).item() - 4.1).abs() < 1e-15);
        let zero_w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let l = total_loss(&mut g, zero_w, one, one, one).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let neg = LossWeights {
            alpha: -1.0,
            ..zero_w
        };
        assert!(total_loss(&mut g, neg, one, one, one).is_err());

        // linear in each weight: f(2w) − f(w) = f(w) − f(0)
        let (a, b, c) = (
            g.constant(Mat::scalar(0.7)),
            g.constant(Mat::scalar(1.9)),
            g.constant(Mat::scalar(0.3)),
        );
        for k in 0..3 {
            let mut at = |s: f64| {
                let mut w = LossWeights::default();
                match k {
                    0 => w.alpha = s,
                    1 => w.beta = s,
                    _ => w.gamma = s,
                }
                let l = total_loss(&mut g, w, a, b, c).unwrap();
                g.value(l).item()
            };
            let (f0, f1, f2) = (at(0.0), at(1.5), at(3.0));
            assert!(((f2 - f1) - (f1 - f0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_cases() {
        let mut p = Mat::from_rows(&[[1.0, -2.0]]);
        let mut opt = Sgd::new(0.1, 0.9, 1e-5);
        opt.step(&mut [&mut p], &[Mat::zeros(1, 2)]).unwrap();
        // only weight decay acts
        assert!((p.get(0, 0) - (1.0 - 0.1 * 1e-5)).abs() < 1e-15);

        let mut p = Mat::from_rows(&[[1.0, -2.0]]);
        let mut plain = Sgd::new(1.0, 0.0, 0.0);
        plain
            .step(&mut [&mut p], &[Mat::from_rows(&[[0.5, 0.25]])])
            .unwrap();
        assert_eq!(p, Mat::from_rows(&[[0.5, -2.25]]));

        // two steps, hand unrolled
        let (lr, m, wd) = (0.01, 0.9, 1e-5);
        let mut p = Mat::scalar(2.0);
        let mut opt = Sgd::new(lr, m, wd);
        let (g1, g2) = (0.3, -0.7);
        opt.step(&mut [&mut p], &[Mat::scalar(g1)]).unwrap();
        opt.step(&mut [&mut p], &[Mat::scalar(g2)]).unwrap();
        let v1 = g1 + wd * 2.0;
        let p1 = 2.0 - lr * v1;
        let v2 = m * v1 + (g2 + wd * p1);
        let p2 = p1 - lr * v2;
        assert!((p.item() - p2).abs() < 1e-15);
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }
}
