//! One frozen transformer encoder block with knowledge-anchored low-rank
//! adapters on its attention projections.
//!
//! Each adapted projection computes `x·Wᵀ + b + η·(x·Qᵀ)·K̂ᵥ`, where the `r`
//! rows of `K̂ᵥ` are the projected knowledge vectors selected for the current
//! sample. The rank-`r` update `ΔW = η·K̂ᵥᵀ·Q` is never formed explicitly.

use serde::{Deserialize, Serialize};

use crate::dataio::FeatureStore;
use crate::error::{Error, Result};
use crate::knowledge::{avg_tokens, select_top_r, Affine, AffineVars, Selection};
use crate::tensor::{Graph, Mat, Rng, Var};

/// Attention projection that an adapter modifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    V,
    O,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
        }
    }

    /// Parses a compact target list such as `"kv"` or `"qkvo"`.
    pub fn parse_list(s: &str) -> Result<Vec<Target>> {
        let mut out = Vec::new();
        for ch in s.chars() {
            let t = match ch.to_ascii_lowercase() {
                'q' => Target::Q,
                'k' => Target::K,
                'v' => Target::V,
                'o' => Target::O,
                other => return Err(Error::Contract(format!("unknown adapter target `{other}`"))),
            };
            if !out.contains(&t) {
                out.push(t);
            }
        }
        if out.is_empty() {
            return Err(Error::Contract("empty adapter target list".into()));
        }
        Ok(out)
    }
}

/// How the block output is reduced to one vector per image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Row 0 (CLIP class token).
    ClassToken,
    /// Mean over all output tokens, for inputs without a class token.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Mat,
    pub bias: Mat,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gain: Mat::filled(1, dim, 1.0),
            bias: Mat::zeros(1, dim),
        }
    }
}

/// Weights of the last backbone block plus post-norm and visual projection.
/// Nothing here is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBlock {
    pub heads: usize,
    pub ln_eps: f64,
    pub pooling: Pooling,
    pub ln_1: LayerNormParams,
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub o: Affine,
    pub ln_2: LayerNormParams,
    pub fc: Affine,
    pub proj: Affine,
    pub ln_post: LayerNormParams,
    /// width × feature_dim
    pub visual_proj: Mat,
}

/// Tensor names used for a block inside a feature store, relative to a prefix.
const BLOCK_TENSORS: [&str; 19] = [
    "ln_1.weight",
    "ln_1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln_2.weight",
    "ln_2.bias",
    "mlp.fc.weight",
    "mlp.fc.bias",
    "mlp.proj.weight",
    "mlp.proj.bias",
    "ln_post.weight",
    "ln_post.bias",
    "visual_proj",
];

impl FrozenBlock {
    pub fn width(&self) -> usize {
        self.q.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.visual_proj.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        let square = |a: &Affine, name: &str| -> Result<()> {
            if a.weight.shape() != (d, d) || a.bias.shape() != (1, d) {
                return Err(Error::shape(
                    "FrozenBlock",
                    format!("{name} has shape {:?}, expected {d}x{d}", a.weight.shape()),
                ));
            }
            Ok(())
        };
        square(&self.q, "q")?;
        square(&self.k, "k")?;
        square(&self.v, "v")?;
        square(&self.o, "out")?;
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::shape(
                "FrozenBlock",
                format!("width {d} not divisible into {} heads", self.heads),
            ));
        }
        let hidden = self.fc.out_dim();
        if self.fc.in_dim() != d || self.proj.weight.shape() != (d, hidden) {
            return Err(Error::shape("FrozenBlock", "mlp shapes inconsistent"));
        }
        for ln in [&self.ln_1, &self.ln_2, &self.ln_post] {
            if ln.gain.shape() != (1, d) || ln.bias.shape() != (1, d) {
                return Err(Error::shape("FrozenBlock", "layer norm width mismatch"));
            }
        }
        if self.visual_proj.rows() != d {
            return Err(Error::shape(
                "FrozenBlock",
                "visual projection rows != width",
            ));
        }
        Ok(())
    }

    /// Loads the block stored under `prefix` (e.g. `"block/"`).
    pub fn from_store(
        store: &FeatureStore,
        prefix: &str,
        heads: usize,
        pooling: Pooling,
        ln_eps: f64,
    ) -> Result<Self> {
        let get = |name: &str| store.mat(&format!("{prefix}{name}"));
        let row = |name: &str| -> Result<Mat> {
            let m = get(name)?;
            let n = m.len();
            Mat::from_vec(1, n, m.into_data())
        };
        let affine = |w: &str, b: &str| -> Result<Affine> {
            Ok(Affine {
                weight: get(w)?,
                bias: row(b)?,
            })
        };
        let ln = |w: &str, b: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gain: row(w)?,
                bias: row(b)?,
            })
        };
        let block = FrozenBlock {
            heads,
            ln_eps,
            pooling,
            ln_1: ln(BLOCK_TENSORS[0], BLOCK_TENSORS[1])?,
            q: affine(BLOCK_TENSORS[2], BLOCK_TENSORS[3])?,
            k: affine(BLOCK_TENSORS[4], BLOCK_TENSORS[5])?,
            v: affine(BLOCK_TENSORS[6], BLOCK_TENSORS[7])?,
            o: affine(BLOCK_TENSORS[8], BLOCK_TENSORS[9])?,
            ln_2: ln(BLOCK_TENSORS[10], BLOCK_TENSORS[11])?,
            fc: affine(BLOCK_TENSORS[12], BLOCK_TENSORS[13])?,
            proj: affine(BLOCK_TENSORS[14], BLOCK_TENSORS[15])?,
            ln_post: ln(BLOCK_TENSORS[16], BLOCK_TENSORS[17])?,
            visual_proj: get(BLOCK_TENSORS[18])?,
        };
        block.validate()?;
        Ok(block)
    }

    /// Named tensors in the layout [`FrozenBlock::from_store`] reads.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Mat)> {
        let mats: [&Mat; 19] = [
            &self.ln_1.gain,
            &self.ln_1.bias,
            &self.q.weight,
            &self.q.bias,
            &self.k.weight,
            &self.k.bias,
            &self.v.weight,
            &self.v.bias,
            &self.o.weight,
            &self.o.bias,
            &self.ln_2.gain,
            &self.ln_2.bias,
            &self.fc.weight,
            &self.fc.bias,
            &self.proj.weight,
            &self.proj.bias,
            &self.ln_post.gain,
            &self.ln_post.bias,
            &self.visual_proj,
        ];
        mats.into_iter()
            .enumerate()
            .map(|(i, m)| (format!("{prefix}{}", BLOCK_TENSORS[i]), m))
            .collect()
    }

    /// Random block with roughly unit-gain affine maps, for synthetic data.
    pub fn random(
        width: usize,
        heads: usize,
        hidden: usize,
        feature_dim: usize,
        pooling: Pooling,
        rng: &mut Rng,
    ) -> Result<Self> {
        let aff = |o: usize, i: usize, rng: &mut Rng| Affine {
            weight: Mat::randn(o, i, 1.0 / (i as f64).sqrt(), rng),
            bias: Mat::randn(1, o, 0.02, rng),
        };
        let ln = |rng: &mut Rng| LayerNormParams {
            gain: Mat::uniform(1, width, 0.9, 1.1, rng),
            bias: Mat::randn(1, width, 0.02, rng),
        };
        let block = FrozenBlock {
            heads,
            ln_eps: 1e-5,
            pooling,
            ln_1: ln(rng),
            q: aff(width, width, rng),
            k: aff(width, width, rng),
            v: aff(width, width, rng),
            o: aff(width, width, rng),
            ln_2: ln(rng),
            fc: aff(hidden, width, rng),
            proj: aff(width, hidden, rng),
            ln_post: ln(rng),
            visual_proj: Mat::randn(width, feature_dim, 1.0 / (width as f64).sqrt(), rng),
        };
        block.validate()?;
        Ok(block)
    }

    /// Feature of one image with no adapters (1 × feature_dim).
    pub fn forward(&self, tokens: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let vars = BlockVars::bind(&mut g, self);
        let (f, _) = encode_image(&mut g, tokens, &vars, None)?;
        Ok(g.value(f).clone())
    }

    /// Order-sensitive fingerprint of every weight, for "never changes" checks.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (_, m) in self.tensors("") {
            for v in m.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[derive(Clone, Copy, Debug)]
struct LnVars {
    gain: Var,
    bias: Var,
}

/// A [`FrozenBlock`] placed on a graph as constants.
#[derive(Clone, Debug)]
pub struct BlockVars {
    heads: usize,
    ln_eps: f64,
    pooling: Pooling,
    ln_1: LnVars,
    q: AffineVars,
    k: AffineVars,
    v: AffineVars,
    o: AffineVars,
    ln_2: LnVars,
    fc: AffineVars,
    proj: AffineVars,
    ln_post: LnVars,
    visual_proj: Var,
    width: usize,
}

impl BlockVars {
    pub fn bind(g: &mut Graph, b: &FrozenBlock) -> Self {
        let mut ln = |p: &LayerNormParams| LnVars {
            gain: g.constant(p.gain.clone()),
            bias: g.constant(p.bias.clone()),
        };
        let ln_1 = ln(&b.ln_1);
        let ln_2 = ln(&b.ln_2);
        let ln_post = ln(&b.ln_post);
        BlockVars {
            heads: b.heads,
            ln_eps: b.ln_eps,
            pooling: b.pooling,
            ln_1,
            q: AffineVars::bind(g, &b.q, false),
            k: AffineVars::bind(g, &b.k, false),
            v: AffineVars::bind(g, &b.v, false),
            o: AffineVars::bind(g, &b.o, false),
            ln_2,
            fc: AffineVars::bind(g, &b.fc, false),
            proj: AffineVars::bind(g, &b.proj, false),
            ln_post,
            visual_proj: g.constant(b.visual_proj.clone()),
            width: b.width(),
        }
    }

    /// Every constant this binding placed on the graph.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.ln_1.gain,
            self.ln_1.bias,
            self.ln_2.gain,
            self.ln_2.bias,
            self.ln_post.gain,
            self.ln_post.bias,
            self.visual_proj,
        ];
        for a in [&self.q, &self.k, &self.v, &self.o, &self.fc, &self.proj] {
            v.push(a.weight);
            v.push(a.bias);
        }
        v
    }
}

/// Trainable low-rank factor `Q` (r×k) for one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct CloraAdapter {
    pub target: Target,
    pub q: Mat,
    pub eta: f64,
}

impl CloraAdapter {
    /// Zero-initialized adapter, so the block starts out unchanged.
    pub fn new(
        target: Target,
        rank: usize,
        in_dim: usize,
        out_dim: usize,
        eta: f64,
    ) -> Result<Self> {
        let limit = in_dim.min(out_dim) / 4;
        if rank == 0 || rank > limit {
            return Err(Error::Contract(format!(
                "adapter rank {rank} must lie in 1..={limit} for a {out_dim}x{in_dim} projection"
            )));
        }
        Ok(CloraAdapter {
            target,
            q: Mat::zeros(rank, in_dim),
            eta,
        })
    }

    pub fn rank(&self) -> usize {
        self.q.rows()
    }

    /// Explicit `ΔW = η·Σ k̂ᵢ qᵢᵀ` (d×k). Only for checks; the forward pass never forms it.
    pub fn delta_w(&self, khat_v: &Mat) -> Result<Mat> {
        Ok(khat_v.matmul_tn(&self.q)?.scale(self.eta))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub target: Target,
    pub q: Var,
    pub eta: f64,
}

/// Everything the encoder needs to run with adapters active.
#[derive(Clone, Debug)]
pub struct CloraContext {
    /// Projected pool `K̂` (C×d).
    pub khat: Var,
    pub adapters: Vec<AdapterVars>,
    pub rank: usize,
    /// Leave token 0 out of the selection query.
    pub skip_class_token: bool,
}

impl CloraContext {
    fn adapter(&self, t: Target) -> Option<&AdapterVars> {
        self.adapters.iter().find(|a| a.target == t)
    }
}

/// `x·Wᵀ + b + η·(x·Qᵀ)·K̂ᵥ`; without an adapter this is the plain projection.
pub fn adapted_projection(
    g: &mut Graph,
    x: Var,
    w: &AffineVars,
    adapter: Option<(&AdapterVars, Var)>,
) -> Result<Var> {
    let base = w.apply(g, x)?;
    let Some((adapter, khat_v)) = adapter else {
        return Ok(base);
    };
    let rank = g.value(adapter.q).rows();
    if g.value(khat_v).rows() != rank {
        return Err(Error::shape(
            "adapted_projection",
            format!(
                "adapter rank {rank} but {} knowledge rows",
                g.value(khat_v).rows()
            ),
        ));
    }
    let xq = g.matmul_nt(x, adapter.q)?;
    let low_rank = g.matmul(xq, khat_v)?;
    let low_rank = g.scale(low_rank, adapter.eta);
    g.add(base, low_rank)
}

fn attention(
    g: &mut Graph,
    x: Var,
    block: &BlockVars,
    clora: Option<(&CloraContext, Var)>,
) -> Result<Var> {
    let pick = |t: Target| clora.and_then(|(c, kv)| c.adapter(t).map(|a| (a, kv)));
    let q = adapted_projection(g, x, &block.q, pick(Target::Q))?;
    let k = adapted_projection(g, x, &block.k, pick(Target::K))?;
    let v = adapted_projection(g, x, &block.v, pick(Target::V))?;

    let head_dim = block.width / block.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let start = h * head_dim;
        let qh = g.slice_cols(q, start, head_dim)?;
        let kh = g.slice_cols(k, start, head_dim)?;
        let vh = g.slice_cols(v, start, head_dim)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    adapted_projection(g, merged, &block.o, pick(Target::O))
}

/// Runs one image's tokens (t × width) through the block.
///
/// With adapters, the selection query is the mean of the raw input tokens,
/// compared against `K̂` by cosine similarity.
pub fn encode_image(
    g: &mut Graph,
    tokens: &Mat,
    block: &BlockVars,
    clora: Option<&CloraContext>,
) -> Result<(Var, Option<Selection>)> {
    if tokens.cols() != block.width {
        return Err(Error::shape(
            "encode_image",
            format!(
                "tokens of width {} for a block of width {}",
                tokens.cols(),
                block.width
            ),
        ));
    }
    let (ctx, selection) = match clora {
        Some(c) => {
            let query = if c.skip_class_token && tokens.rows() > 1 {
                avg_tokens(&tokens.select_rows(&(1..tokens.rows()).collect::<Vec<_>>()))?
            } else {
                avg_tokens(tokens)?
            };
            let sel = select_top_r(query.row(0), g.value(c.khat), c.rank)?;
            let khat_v = g.gather_rows(c.khat, &sel.indices)?;
            (Some((c, khat_v)), Some(sel))
        }
        None => (None, None),
    };

    let x = g.constant(tokens.clone());
    let h = g.layer_norm(x, block.ln_1.gain, block.ln_1.bias, block.ln_eps)?;
    let attn = attention(g, h, block, ctx)?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, block.ln_2.gain, block.ln_2.bias, block.ln_eps)?;
    let h = block.fc.apply(g, h)?;
    let h = g.gelu(h);
    let h = block.proj.apply(g, h)?;
    let x = g.add(x, h)?;

    let pooled = match block.pooling {
        Pooling::ClassToken => g.gather_rows(x, &[0])?,
        Pooling::Mean => g.mean_rows(x),
    };
    let pooled = g.layer_norm(pooled, block.ln_post.gain, block.ln_post.bias, block.ln_eps)?;
    let feature = g.matmul(pooled, block.visual_proj)?;
    Ok((feature, selection))
}

/// Features of a batch (n × feature_dim) with one selection per sample.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub features: Var,
    pub selections: Vec<Option<Selection>>,
}

pub fn encode_batch(
    g: &mut Graph,
    batch: &[&Mat],
    block: &BlockVars,
    clora: Option<&CloraContext>,
) -> Result<EncodedBatch> {
    let Some(first) = batch.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    if batch.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::shape(
            "encode_batch",
            "samples differ in token shape",
        ));
    }
    let mut rows = Vec::with_capacity(batch.len());
    let mut selections = Vec::with_capacity(batch.len());
    for tokens in batch {
        let (f, s) = encode_image(g, tokens, block, clora)?;
        rows.push(f);
        selections.push(s);
    }
    let features = if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(&rows)?
    };
    Ok(EncodedBatch {
        features,
        selections,
    })
}
