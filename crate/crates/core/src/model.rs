//! The full hashing model, its training loop, checkpoints and inference.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureStore;
use crate::encoder::{
    encode_batch, encode_image, AdapterVars, BlockVars, CloraAdapter, CloraContext, FrozenBlock,
    Target,
};
use crate::error::{Error, Result};
use crate::hashing::{
    hash_forward, loss_alignment, loss_quantization, loss_similarity, similarity_matrix,
    total_loss, HashLayer, HashVars, LossWeights, Sgd,
};
use crate::kiddo::{dcc_solve, CodeMatrix, DccProblem, DccRule};
use crate::knowledge::{hash_anchors, project_pool, Affine, AffineVars, KnowledgePool, Selection};
use crate::retrieval::TimingReport;
use crate::tensor::rng::{derive_seed, permutation, seeded};
use crate::tensor::{Graph, Mat, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub rel_tol: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 20,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub bits: usize,
    pub seed: u64,
    pub eta: f64,
    pub rank: usize,
    pub targets: Vec<Target>,
    /// Adapters and the selection projection `F`.
    pub clora: bool,
    /// Alignment loss, projection `G` and the DCC update of the codes.
    pub kiddo: bool,
    pub dcc_sweeps: usize,
    pub dcc_rule: DccRule,
    pub early_stop: Option<EarlyStop>,
    /// Scale multi-hot label columns to unit ℓ1 norm in the alignment terms.
    pub l1_labels: bool,
    /// Average only tokens 1.. for the selection query.
    pub skip_class_token: bool,
    /// Update `F` during training. Off keeps the selection space fixed at
    /// its initial value.
    pub train_f: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 8,
            epochs: 100,
            bits: 16,
            seed: 0,
            eta: 1.0,
            rank: 1,
            targets: vec![Target::K, Target::V],
            clora: true,
            kiddo: true,
            dcc_sweeps: 1,
            dcc_rule: DccRule::Derived,
            early_stop: None,
            l1_labels: false,
            skip_class_token: false,
            train_f: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if w.alpha < 0.0 || w.beta < 0.0 || w.gamma < 0.0 {
            return Err(Error::Contract("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.bits == 0 || self.dcc_sweeps == 0 {
            return Err(Error::Contract(
                "batch size, bits and DCC sweeps must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Contract("optimizer settings out of range".into()));
        }
        if self.clora && self.targets.is_empty() {
            return Err(Error::Contract(
                "adapters enabled with no target projection".into(),
            ));
        }
        Ok(())
    }

    /// Weight of the alignment loss actually used.
    pub fn alpha(&self) -> f64 {
        if self.kiddo {
            self.weights.alpha
        } else {
            0.0
        }
    }
}

/// Frozen block, knowledge pool and every trainable tensor.
#[derive(Clone, Debug)]
pub struct HashModel {
    pub block: FrozenBlock,
    pub pool: KnowledgePool,
    /// Pool projection into adapter space (width × d_t).
    pub f: Affine,
    /// Pool projection into hash space (bits × d_t).
    pub g: Affine,
    pub adapters: Vec<CloraAdapter>,
    pub hash: HashLayer,
    pub rank: usize,
    pub skip_class_token: bool,
    pub train_f: bool,
}

/// A model placed on a graph.
struct Bound {
    block: BlockVars,
    hash: HashVars,
    clora: Option<CloraContext>,
    t: Option<Var>,
    /// Trainable handles, in [`HashModel::params_mut`] order.
    params: Vec<Var>,
}

impl HashModel {
    /// Fresh model: `F` starts as an identity block so that selection at
    /// step 0 compares tokens with the raw pool, every `Q` starts at zero.
    pub fn new(block: FrozenBlock, pool: KnowledgePool, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        block.validate()?;
        let width = block.width();
        let mut rng = seeded(derive_seed(cfg.seed, 20));
        let adapters = if cfg.clora {
            cfg.targets
                .iter()
                .map(|&t| CloraAdapter::new(t, cfg.rank, width, width, cfg.eta))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        if cfg.clora && cfg.rank > pool.classes() {
            return Err(Error::Contract(format!(
                "rank {} exceeds the {} pool classes",
                cfg.rank,
                pool.classes()
            )));
        }
        let g = Affine::uniform(cfg.bits, pool.dim(), &mut rng);
        let hash = HashLayer::new(cfg.bits, block.feature_dim(), &mut rng);
        Ok(HashModel {
            f: Affine::identity(width, pool.dim()),
            g,
            adapters,
            hash,
            rank: cfg.rank,
            skip_class_token: cfg.skip_class_token,
            train_f: cfg.train_f,
            block,
            pool,
        })
    }

    pub fn bits(&self) -> usize {
        self.hash.bits()
    }

    pub fn clora_active(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Trainable tensors: `F` (with adapters), `G` (when `with_g`), each `Q`,
    /// then the hash layer.
    fn params_mut(&mut self, with_g: bool) -> Vec<&mut Mat> {
        let clora = self.clora_active();
        let mut v: Vec<&mut Mat> = Vec::new();
        if clora && self.train_f {
            v.push(&mut self.f.weight);
            v.push(&mut self.f.bias);
        }
        if with_g {
            v.push(&mut self.g.weight);
            v.push(&mut self.g.bias);
        }
        for a in &mut self.adapters {
            v.push(&mut a.q);
        }
        v.push(&mut self.hash.fc.weight);
        v.push(&mut self.hash.fc.bias);
        v.push(&mut self.hash.bn_gain);
        v.push(&mut self.hash.bn_bias);
        v
    }

    fn bind(&self, g: &mut Graph, trainable: bool, with_g: bool, use_clora: bool) -> Result<Bound> {
        let mut params = Vec::new();
        let block = BlockVars::bind(g, &self.block);
        let k = g.constant(self.pool.k.clone());
        let clora_on = use_clora && self.clora_active();
        let f = if clora_on {
            let f = AffineVars::bind(g, &self.f, trainable && self.train_f);
            if self.train_f {
                params.extend([f.weight, f.bias]);
            }
            Some(f)
        } else {
            None
        };
        let t = if with_g {
            let gv = AffineVars::bind(g, &self.g, trainable);
            params.extend([gv.weight, gv.bias]);
            Some(hash_anchors(g, k, &gv)?)
        } else {
            None
        };
        let clora = match f {
            Some(f) => {
                let khat = project_pool(g, k, &f)?;
                let adapters: Vec<AdapterVars> = self
                    .adapters
                    .iter()
                    .map(|a| AdapterVars {
                        target: a.target,
                        q: if trainable {
                            g.param(a.q.clone())
                        } else {
                            g.constant(a.q.clone())
                        },
                        eta: a.eta,
                    })
                    .collect();
                params.extend(adapters.iter().map(|a| a.q));
                Some(CloraContext {
                    khat,
                    adapters,
                    rank: self.rank,
                    skip_class_token: self.skip_class_token,
                })
            }
            None => None,
        };
        let hash = HashVars::bind(g, &self.hash, trainable);
        params.extend([hash.fc.weight, hash.fc.bias, hash.gain, hash.bias]);
        Ok(Bound {
            block,
            hash,
            clora,
            t,
            params,
        })
    }

    /// `T = G(K)ᵀ` (b×C).
    pub fn anchors(&self) -> Result<Mat> {
        Ok(self.g.apply(&self.pool.k)?.transpose())
    }

    /// Hash features of a set of samples with batch-norm batch statistics
    /// over the whole set (running statistics untouched).
    pub fn features_batch_stats(&self, tokens: &[&Mat]) -> Result<Mat> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false, true)?;
        let enc = encode_batch(&mut g, tokens, &bound.block, bound.clora.as_ref())?;
        let out = hash_forward(&mut g, enc.features, &bound.hash, &self.hash, true)?;
        Ok(g.value(out.h).clone())
    }

    /// Inference features (n×b) with running statistics. Samples are
    /// spread over threads; each row is computed independently so the
    /// result does not depend on the thread count.
    pub fn encode(&self, tokens: &[Mat]) -> Result<Mat> {
        let rows: Vec<Result<Vec<f64>>> = tokens
            .par_iter()
            .map_init(
                || Encoder::new(self, true),
                |enc, t| match enc {
                    Ok(e) => e.encode(t).map(|(h, _)| h),
                    Err(e) => Err(Error::Contract(e.to_string())),
                },
            )
            .collect();
        let mut out = Mat::zeros(tokens.len(), self.bits());
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&r?);
        }
        Ok(out)
    }

    /// Writes every trained tensor and the batch-norm running statistics.
    pub fn checkpoint(&self) -> Result<FeatureStore> {
        let mut s = FeatureStore::new();
        s.insert_mat("f.weight", &self.f.weight)?;
        s.insert_mat("f.bias", &self.f.bias)?;
        s.insert_mat("g.weight", &self.g.weight)?;
        s.insert_mat("g.bias", &self.g.bias)?;
        for a in &self.adapters {
            s.insert_mat(format!("adapter/{}.q", a.target.as_str()), &a.q)?;
        }
        s.insert_mat("hash.fc.weight", &self.hash.fc.weight)?;
        s.insert_mat("hash.fc.bias", &self.hash.fc.bias)?;
        s.insert_mat("hash.bn.gain", &self.hash.bn_gain)?;
        s.insert_mat("hash.bn.bias", &self.hash.bn_bias)?;
        s.insert_mat("hash.bn.running_mean", &self.hash.running_mean)?;
        s.insert_mat("hash.bn.running_var", &self.hash.running_var)?;
        Ok(s)
    }

    /// Rebuilds a model from [`HashModel::checkpoint`] output.
    pub fn from_checkpoint(
        block: FrozenBlock,
        pool: KnowledgePool,
        cfg: &TrainConfig,
        ckpt: &FeatureStore,
    ) -> Result<Self> {
        let mut m = HashModel::new(block, pool, cfg)?;
        let load = |name: &str, into: &mut Mat| -> Result<()> {
            let v = ckpt.mat(name)?;
            if v.shape() != into.shape() {
                return Err(Error::shape(
                    "from_checkpoint",
                    format!(
                        "`{name}` is {:?}, model expects {:?}",
                        v.shape(),
                        into.shape()
                    ),
                ));
            }
            *into = v;
            Ok(())
        };
        load("f.weight", &mut m.f.weight)?;
        load("f.bias", &mut m.f.bias)?;
        load("g.weight", &mut m.g.weight)?;
        load("g.bias", &mut m.g.bias)?;
        for a in &mut m.adapters {
            load(&format!("adapter/{}.q", a.target.as_str()), &mut a.q)?;
        }
        load("hash.fc.weight", &mut m.hash.fc.weight)?;
        load("hash.fc.bias", &mut m.hash.fc.bias)?;
        load("hash.bn.gain", &mut m.hash.bn_gain)?;
        load("hash.bn.bias", &mut m.hash.bn_bias)?;
        load("hash.bn.running_mean", &mut m.hash.running_mean)?;
        load("hash.bn.running_var", &mut m.hash.running_var)?;
        Ok(m)
    }
}

/// Single-image inference that reuses the bound weights between calls.
pub struct Encoder<'m> {
    model: &'m HashModel,
    graph: Graph,
    bound: Bound,
    base: usize,
}

impl<'m> Encoder<'m> {
    /// `use_clora = false` runs the plain block even if adapters exist.
    pub fn new(model: &'m HashModel, use_clora: bool) -> Result<Self> {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph, false, false, use_clora)?;
        let base = graph.len();
        Ok(Encoder {
            model,
            graph,
            bound,
            base,
        })
    }

    pub fn encode(&mut self, tokens: &Mat) -> Result<(Vec<f64>, Option<Selection>)> {
        let g = &mut self.graph;
        let result = (|| {
            let (f, sel) = encode_image(g, tokens, &self.bound.block, self.bound.clora.as_ref())?;
            let out = hash_forward(g, f, &self.bound.hash, &self.model.hash, false)?;
            Ok((g.value(out.h).row(0).to_vec(), sel))
        })();
        g.truncate(self.base);
        result
    }
}

/// Training samples: one token matrix per sample and C×N multi-hot labels.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub tokens: Vec<Mat>,
    pub labels: Mat,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn label_columns(&self, idx: &[usize], l1: bool) -> Mat {
        let mut y = self.labels.select_cols(idx);
        if l1 {
            for j in 0..y.cols() {
                let s: f64 = (0..y.rows()).map(|c| y.get(c, j).abs()).sum();
                if s > 0.0 {
                    for c in 0..y.rows() {
                        y.set(c, j, y.get(c, j) / s);
                    }
                }
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-batch loss components.
    pub la: f64,
    pub lq: f64,
    pub ls: f64,
    pub total: f64,
    /// Code entries changed by this epoch's code update.
    pub flips: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// N×b features after the last epoch.
    pub h: Mat,
    pub b: CodeMatrix,
    /// b×C anchors, when the alignment term is active.
    pub t: Option<Mat>,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub sgd: Sgd,
    pub stopped_early: bool,
}

struct BatchLoss {
    la: f64,
    lq: f64,
    ls: f64,
    total: f64,
}

fn train_step(
    model: &mut HashModel,
    data: &TrainData,
    cfg: &TrainConfig,
    codes: &CodeMatrix,
    batch: &[usize],
    sgd: &mut Sgd,
) -> Result<BatchLoss> {
    let with_g = cfg.alpha() > 0.0;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true, with_g, true)?;
    let tokens: Vec<&Mat> = batch.iter().map(|&i| &data.tokens[i]).collect();
    let enc = encode_batch(&mut g, &tokens, &bound.block, bound.clora.as_ref())?;
    let out = hash_forward(&mut g, enc.features, &bound.hash, &model.hash, true)?;

    let b_cols = codes.columns(batch);
    let sim = similarity_matrix(&data.labels.select_cols(batch));
    let ls = loss_similarity(&mut g, out.h, &sim)?;
    let lq = loss_quantization(&mut g, out.h, &b_cols)?;
    let la = match bound.t {
        Some(t) => loss_alignment(
            &mut g,
            &data.label_columns(batch, cfg.l1_labels),
            t,
            &b_cols,
        )?,
        None => g.constant(Mat::scalar(0.0)),
    };
    let weights = LossWeights {
        alpha: cfg.alpha(),
        ..cfg.weights
    };
    let total = total_loss(&mut g, weights, la, lq, ls)?;
    g.backward(total)?;

    let grads: Vec<Mat> = bound.params.iter().map(|&v| g.grad(v)).collect();
    sgd.step(&mut model.params_mut(with_g), &grads)?;
    if let Some(stats) = &out.stats {
        model.hash.update_running(stats);
    }
    Ok(BatchLoss {
        la: g.value(la).item(),
        lq: g.value(lq).item(),
        ls: g.value(ls).item(),
        total: g.value(total).item(),
    })
}

/// Alternating optimization: per epoch, mini-batch SGD on the continuous
/// parameters, then a refresh of `H` on the whole training set and an update
/// of the codes `B` (DCC sweeps with the alignment term, or `sign(Hᵀ)`
/// without it). `on_epoch` sees each epoch's log line.
pub fn train(
    model: &mut HashModel,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    if data.labels.cols() != data.len() || data.labels.rows() != model.pool.classes() {
        return Err(Error::shape(
            "train",
            format!(
                "labels {:?} for {} samples and {} classes",
                data.labels.shape(),
                data.len(),
                model.pool.classes()
            ),
        ));
    }
    if model.bits() != cfg.bits || model.clora_active() != cfg.clora {
        return Err(Error::Contract(
            "model was built from a different configuration".into(),
        ));
    }
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let all_tokens: Vec<&Mat> = data.tokens.iter().collect();
    let mut b = CodeMatrix::random(cfg.bits, n, &mut seeded(derive_seed(cfg.seed, 10)));
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut h = model.features_batch_stats(&all_tokens)?;
    let y_all = data.label_columns(&all, cfg.l1_labels);
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let order = permutation(n, &mut seeded(derive_seed(cfg.seed, 1000 + epoch as u64)));
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let l = train_step(model, data, cfg, &b, batch, &mut sgd)?;
            for (s, v) in sums.iter_mut().zip([l.la, l.lq, l.ls, l.total]) {
                *s += v;
            }
            batches += 1;
        }

        h = model.features_batch_stats(&all_tokens)?;
        let flips = if cfg.alpha() > 0.0 {
            let p = DccProblem::new(
                y_all.clone(),
                model.anchors()?,
                h.clone(),
                cfg.alpha(),
                cfg.weights.beta,
            )?
            .with_rule(cfg.dcc_rule);
            let out = dcc_solve(&p, b, cfg.dcc_sweeps)?;
            b = out.codes;
            out.flips_per_sweep.iter().sum()
        } else {
            let next = CodeMatrix::sign_of_features(&h);
            let f = next.flips(&b);
            b = next;
            f
        };

        let k = batches as f64;
        let log = EpochLog {
            epoch,
            la: sums[0] / k,
            lq: sums[1] / k,
            ls: sums[2] / k,
            total: sums[3] / k,
            flips,
        };
        log::debug!("epoch {epoch}: total {:.6} flips {flips}", log.total);
        on_epoch(&log);
        let total = log.total;
        history.push(log);

        if let Some(es) = &cfg.early_stop {
            if total < best * (1.0 - es.rel_tol) {
                best = total;
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    Ok(TrainState {
        h,
        b,
        t: if cfg.alpha() > 0.0 {
            Some(model.anchors()?)
        } else {
            None
        },
        epoch: history.len(),
        history,
        sgd,
        stopped_early,
    })
}

fn check_timing(tokens: &[Mat], repetitions: usize) -> Result<()> {
    if repetitions < 10 {
        return Err(Error::Contract(
            "timing needs at least 10 repetitions".into(),
        ));
    }
    if tokens.is_empty() {
        return Err(Error::Contract("timing needs at least one sample".into()));
    }
    Ok(())
}

/// Mean milliseconds per image over one pass through `tokens`.
fn timed_pass(enc: &mut Encoder, tokens: &[Mat]) -> Result<f64> {
    let start = Instant::now();
    for t in tokens {
        std::hint::black_box(enc.encode(t)?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / tokens.len() as f64)
}

/// Per-image encode time over `repetitions` timed passes (after 3 warm-up
/// passes). Each pass encodes every sample once; the report carries the
/// mean, sample standard deviation and median of the per-pass means.
pub fn time_encoding(
    model: &HashModel,
    tokens: &[Mat],
    use_clora: bool,
    repetitions: usize,
) -> Result<TimingReport> {
    check_timing(tokens, repetitions)?;
    let mut enc = Encoder::new(model, use_clora)?;
    for _ in 0..3 {
        timed_pass(&mut enc, tokens)?;
    }
    let samples = (0..repetitions)
        .map(|_| timed_pass(&mut enc, tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&samples))
}

/// Like [`time_encoding`] for the adapted and the adapter-free paths, with
/// their passes interleaved so slow drift in machine load hits both alike.
/// Returns `(with, without)`.
pub fn time_encoding_paired(
    model: &HashModel,
    tokens: &[Mat],
    repetitions: usize,
) -> Result<(TimingReport, TimingReport)> {
    check_timing(tokens, repetitions)?;
    let mut with = Encoder::new(model, true)?;
    let mut without = Encoder::new(model, false)?;
    for _ in 0..3 {
        timed_pass(&mut with, tokens)?;
        timed_pass(&mut without, tokens)?;
    }
    let (mut a, mut b) = (
        Vec::with_capacity(repetitions),
        Vec::with_capacity(repetitions),
    );
    for i in 0..repetitions {
        // alternate which path goes first
        if i % 2 == 0 {
            a.push(timed_pass(&mut with, tokens)?);
            b.push(timed_pass(&mut without, tokens)?);
        } else {
            b.push(timed_pass(&mut without, tokens)?);
            a.push(timed_pass(&mut with, tokens)?);
        }
    }
    Ok((summarize(&a), summarize(&b)))
}

pub(crate) fn summarize(samples: &[f64]) -> TimingReport {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    TimingReport {
        mean_ms: mean,
        std_ms: var.sqrt(),
        median_ms: median,
        repetitions: samples.len(),
    }
}
