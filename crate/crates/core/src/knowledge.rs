//! Class-level knowledge pool and the projections that map it into adapter
//! space (`F`) and hash space (`G`).

use serde::{Deserialize, Serialize};

use crate::dataio::FeatureStore;
use crate::error::{Error, Result};
use crate::tensor::{dot, Graph, Mat, Rng, Var};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a [CATEGORY].";

/// Text embeddings of one prompt per class; row `i` belongs to label `i`.
#[derive(Clone, Debug)]
pub struct KnowledgePool {
    pub k: Mat,
    pub class_names: Vec<String>,
    pub prompt_template: String,
}

impl KnowledgePool {
    pub fn new(
        k: Mat,
        class_names: Vec<String>,
        prompt_template: impl Into<String>,
    ) -> Result<Self> {
        if k.rows() != class_names.len() {
            return Err(Error::Format(format!(
                "knowledge pool has {} rows but {} class names",
                k.rows(),
                class_names.len()
            )));
        }
        if k.rows() < 2 {
            return Err(Error::Format(
                "knowledge pool needs at least two classes".into(),
            ));
        }
        if !k.is_finite() {
            return Err(Error::Format(
                "knowledge pool contains non-finite values".into(),
            ));
        }
        Ok(KnowledgePool {
            k,
            class_names,
            prompt_template: prompt_template.into(),
        })
    }

    /// Reads the pool tensor `name` from a store.
    pub fn from_store(
        store: &FeatureStore,
        name: &str,
        class_names: Vec<String>,
        prompt_template: impl Into<String>,
    ) -> Result<Self> {
        let k = store.mat(name)?;
        Self::new(k, class_names, prompt_template)
    }

    pub fn classes(&self) -> usize {
        self.k.rows()
    }

    pub fn dim(&self) -> usize {
        self.k.cols()
    }

    /// The prompt used to embed class `i`.
    pub fn prompt(&self, i: usize) -> String {
        self.prompt_template
            .replace("[CATEGORY]", &self.class_names[i])
    }
}

/// Affine map `x · weightᵀ + bias`, weight stored out×in, bias as a 1×out row.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Mat,
    pub bias: Mat,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: Mat::zeros(out_dim, in_dim),
            bias: Mat::zeros(1, out_dim),
        }
    }

    /// Identity block with zero bias.
    pub fn identity(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: Mat::eye(out_dim, in_dim),
            bias: Mat::zeros(1, out_dim),
        }
    }

    /// Uniform(−1/√in, 1/√in) weights and bias.
    pub fn uniform(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Affine {
            weight: Mat::uniform(out_dim, in_dim, -bound, bound, rng),
            bias: Mat::uniform(1, out_dim, -bound, bound, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        let mut y = x.matmul_nt(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(self.bias.row(0)) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// Graph handles of a bound [`Affine`].
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

impl AffineVars {
    pub fn bind(g: &mut Graph, a: &Affine, trainable: bool) -> Self {
        if trainable {
            AffineVars {
                weight: g.param(a.weight.clone()),
                bias: g.param(a.bias.clone()),
            }
        } else {
            AffineVars {
                weight: g.constant(a.weight.clone()),
                bias: g.constant(a.bias.clone()),
            }
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }
}

/// `K̂ = F(K)`, one projected row per class (C×d).
pub fn project_pool(g: &mut Graph, k: Var, f: &AffineVars) -> Result<Var> {
    f.apply(g, k)
}

/// `T = G(K)ᵀ`, the b×C class anchors in hash space.
pub fn hash_anchors(g: &mut Graph, k: Var, proj: &AffineVars) -> Result<Var> {
    let t = proj.apply(g, k)?;
    Ok(g.transpose(t))
}

/// Classes chosen for one sample, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Picks the `r` rows of `khat` with the largest cosine similarity to `query`.
///
/// Ties go to the lower class index; a zero query scores 0 against every row.
pub fn select_top_r(query: &[f64], khat: &Mat, r: usize) -> Result<Selection> {
    if query.len() != khat.cols() {
        return Err(Error::shape(
            "select_top_r",
            format!(
                "query of width {} against rows of width {}",
                query.len(),
                khat.cols()
            ),
        ));
    }
    if r == 0 || r > khat.rows() {
        return Err(Error::Contract(format!(
            "rank {r} must lie in 1..={} classes",
            khat.rows()
        )));
    }
    let qn = dot(query, query).sqrt();
    // best-first top-r kept by insertion; rows arrive in index order, so a
    // later row only displaces an earlier one with a strictly higher score
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(r + 1);
    for i in 0..khat.rows() {
        let row = khat.row(i);
        let rn = dot(row, row).sqrt();
        let score = if qn == 0.0 || rn == 0.0 {
            0.0
        } else {
            dot(query, row) / (qn * rn)
        };
        if scored.len() == r && score.total_cmp(&scored[r - 1].1).is_le() {
            continue;
        }
        let at = scored.partition_point(|s| s.1.total_cmp(&score).is_ge());
        scored.insert(at, (i, score));
        scored.truncate(r);
    }
    Ok(Selection {
        indices: scored.iter().map(|s| s.0).collect(),
        scores: scored.iter().map(|s| s.1).collect(),
    })
}

/// Mean over all tokens (rows), class token included.
pub fn avg_tokens(tokens: &Mat) -> Result<Mat> {
    if tokens.rows() == 0 {
        return Err(Error::Contract(
            "cannot average an empty token matrix".into(),
        ));
    }
    Ok(tokens.mean_rows())
}
