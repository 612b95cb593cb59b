//! Synthetic datasets: a random frozen block, a knowledge pool, and token
//! matrices clustered around per-class centres tied to the pool.

use serde::{Deserialize, Serialize};

use crate::dataio::manifest::{BlockConfig, Record};
use crate::dataio::{FeatureStore, Manifest, Split};
use crate::encoder::{FrozenBlock, Pooling};
use crate::error::{Error, Result};
use crate::knowledge::DEFAULT_PROMPT_TEMPLATE;
use crate::tensor::rng::{derive_seed, seeded};
use crate::tensor::{Mat, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub knowledge_dim: usize,
    pub tokens: usize,
    pub token_dim: usize,
    /// Norm of the per-sample offset from the class centre (centres have norm 1).
    pub spread: f64,
    /// Per-token noise, relative to `spread`.
    pub token_noise: f64,
    /// Norm of the shared zero-mean positional pattern per token.
    pub positional: f64,
    pub query_per_class: usize,
    pub database_per_class: usize,
    pub heads: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            knowledge_dim: 32,
            tokens: 8,
            token_dim: 32,
            spread: 0.1,
            token_noise: 1.0,
            positional: 0.5,
            query_per_class: 5,
            database_per_class: 21,
            heads: 4,
            hidden: 64,
            feature_dim: 32,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Contract(
                "synthetic data needs at least two classes".into(),
            ));
        }
        if !(self.spread > 0.0) || self.token_noise < 0.0 || self.positional < 0.0 {
            return Err(Error::Contract(
                "spread must be positive, noise scales non-negative".into(),
            ));
        }
        if self.tokens == 0 || self.token_dim == 0 || self.knowledge_dim == 0 {
            return Err(Error::Contract("dimensions must be positive".into()));
        }
        if self.query_per_class + self.database_per_class == 0 {
            return Err(Error::Contract("no samples requested".into()));
        }
        Ok(())
    }

    pub fn samples_per_class(&self) -> usize {
        self.query_per_class + self.database_per_class
    }
}

fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    unit_rows_of(&Mat::randn(rows, cols, 1.0, rng))
}

/// Gaussian vector whose expected norm is `scale`.
fn noise(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Mat {
    Mat::randn(rows, cols, scale / (cols as f64).sqrt(), rng)
}

/// Builds the store and manifest. Reference features are computed from the
/// f32-rounded block and tokens as they will be read back.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(FeatureStore, Manifest)> {
    spec.validate()?;
    let mut rng_block = seeded(derive_seed(spec.seed, 1));
    let mut rng_pool = seeded(derive_seed(spec.seed, 2));
    let mut rng_tok = seeded(derive_seed(spec.seed, 3));

    let block = FrozenBlock::random(
        spec.token_dim,
        spec.heads,
        spec.hidden,
        spec.feature_dim,
        Pooling::Mean,
        &mut rng_block,
    )?;
    let knowledge = unit_rows(spec.classes, spec.knowledge_dim, &mut rng_pool);
    // class centres live in token space; when the widths agree they are the
    // knowledge rows themselves
    let centres = if spec.knowledge_dim == spec.token_dim {
        knowledge.clone()
    } else {
        let map = Mat::randn(spec.knowledge_dim, spec.token_dim, 1.0, &mut rng_pool);
        let c = knowledge.matmul(&map)?;
        unit_rows_of(&c)
    };
    let mut positional = noise(spec.tokens, spec.token_dim, spec.positional, &mut rng_pool);
    let mean = positional.mean_rows();
    for r in 0..spec.tokens {
        for (v, m) in positional.row_mut(r).iter_mut().zip(mean.row(0)) {
            *v -= m;
        }
    }

    let mut store = FeatureStore::new();
    for (name, m) in block.tensors("block/") {
        store.insert_mat(name, m)?;
    }
    store.insert_mat("knowledge", &knowledge)?;

    let mut records = Vec::new();
    for c in 0..spec.classes {
        for s in 0..spec.samples_per_class() {
            let id = format!("c{c:02}_{s:03}");
            let offset = noise(1, spec.token_dim, spec.spread, &mut rng_tok);
            let jitter = noise(
                spec.tokens,
                spec.token_dim,
                spec.spread * spec.token_noise,
                &mut rng_tok,
            );
            let mut tokens = Mat::zeros(spec.tokens, spec.token_dim);
            for t in 0..spec.tokens {
                for j in 0..spec.token_dim {
                    tokens.set(
                        t,
                        j,
                        centres.get(c, j)
                            + positional.get(t, j)
                            + offset.get(0, j)
                            + jitter.get(t, j),
                    );
                }
            }
            let tensor = format!("tokens/{id}");
            store.insert_mat(&tensor, &tokens)?;
            records.push(Record {
                id: id.clone(),
                labels: (0..spec.classes).map(|k| (k == c) as u8).collect(),
                tensor,
                reference: Some(format!("reference/{id}")),
                split: if s < spec.query_per_class {
                    Split::Query
                } else {
                    Split::Database
                },
            });
        }
    }

    let stored_block =
        FrozenBlock::from_store(&store, "block/", spec.heads, Pooling::Mean, block.ln_eps)?;
    for r in &records {
        let feature = stored_block.forward(&store.mat(&r.tensor)?)?;
        store.insert_mat(r.reference.clone().unwrap(), &feature)?;
    }

    let manifest = Manifest {
        dataset: "synthetic".into(),
        class_names: (0..spec.classes).map(|c| format!("class_{c}")).collect(),
        prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
        multi_label: false,
        map_k: None,
        knowledge_tensor: "knowledge".into(),
        block: BlockConfig {
            prefix: "block/".into(),
            heads: spec.heads,
            pooling: Pooling::Mean,
            ln_eps: block.ln_eps,
        },
        records,
    };
    manifest.validate()?;
    Ok((store, manifest))
}

fn unit_rows_of(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let n = m
            .row(r)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    out
}
