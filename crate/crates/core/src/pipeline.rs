//! Glue from files to metrics: dataset loading, the train → encode → eval
//! round trip used by the CLI and the ablation harness.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{make_shot_split, read_verified, FeatureStore, Manifest, ShotSplit};
use crate::encoder::{FrozenBlock, Pooling};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgePool;
use crate::model::{
    time_encoding_paired, train, EpochLog, HashModel, TrainConfig, TrainData, TrainState,
};
use crate::retrieval::{
    map_at_k, pr_curve, silhouette, Labels, MetricReport, PackedCodes, RetrievalIndex, TimingReport,
};
use crate::tensor::rng::{derive_seed, seeded};
use crate::tensor::Mat;

/// A store together with the manifest describing it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub store: FeatureStore,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn new(store: FeatureStore, manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        manifest.check_store(&store)?;
        Ok(Dataset { store, manifest })
    }

    /// Reads both files, verifying the store's sidecar checksums if present.
    pub fn load(store: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_verified(store)?, Manifest::read(manifest)?)
    }

    pub fn block(&self) -> Result<FrozenBlock> {
        let b = &self.manifest.block;
        FrozenBlock::from_store(&self.store, &b.prefix, b.heads, b.pooling, b.ln_eps)
    }

    pub fn pool(&self) -> Result<KnowledgePool> {
        KnowledgePool::from_store(
            &self.store,
            &self.manifest.knowledge_tensor,
            self.manifest.class_names.clone(),
            &self.manifest.prompt_template,
        )
    }

    pub fn tokens(&self, ids: &[String]) -> Result<Vec<Mat>> {
        self.manifest
            .positions(ids)?
            .into_iter()
            .map(|p| self.store.mat(&self.manifest.records[p].tensor))
            .collect()
    }

    /// C×n multi-hot label columns.
    pub fn label_matrix(&self, ids: &[String]) -> Result<Mat> {
        Ok(self.manifest.label_matrix(&self.manifest.positions(ids)?))
    }

    pub fn labels(&self, ids: &[String]) -> Result<Labels> {
        self.manifest.labels(ids)
    }

    pub fn train_data(&self, ids: &[String]) -> Result<TrainData> {
        Ok(TrainData {
            tokens: self.tokens(ids)?,
            labels: self.label_matrix(ids)?,
        })
    }

    /// mAP cut-off: the manifest's value, or the whole gallery.
    pub fn map_k(&self, gallery: usize) -> usize {
        self.manifest.map_k.unwrap_or(gallery).max(1)
    }
}

pub fn train_on_split(
    ds: &Dataset,
    split: &ShotSplit,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(HashModel, TrainState)> {
    let mut model = HashModel::new(ds.block()?, ds.pool()?, cfg)?;
    let data = ds.train_data(&split.train_ids)?;
    let state = train(&mut model, &data, cfg, on_epoch)?;
    Ok((model, state))
}

/// Which codes the Silhouette score is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteOn {
    #[default]
    Query,
    Gallery,
    None,
}

/// mAP@k, the PR curve and (for single-label data) the Silhouette score.
/// Only the labels are needed, so this works from a manifest alone.
pub fn evaluate(
    manifest: &Manifest,
    query_ids: &[String],
    query_codes: &PackedCodes,
    gallery_ids: &[String],
    gallery_codes: &PackedCodes,
    k: usize,
    silhouette_on: SilhouetteOn,
) -> Result<MetricReport> {
    if query_codes.len() != query_ids.len() || gallery_codes.len() != gallery_ids.len() {
        return Err(Error::Contract("code count does not match id count".into()));
    }
    let qlabels = manifest.labels(query_ids)?;
    let index = RetrievalIndex::new(
        gallery_codes.clone(),
        manifest.labels(gallery_ids)?,
        gallery_ids.to_vec(),
    )?;
    let map = map_at_k(&index, query_codes, &qlabels, k)?;
    let pr = pr_curve(&index, query_codes, &qlabels)?;
    let sil = if manifest.multi_label {
        None
    } else {
        let single = |ids: &[String]| -> Result<Vec<usize>> {
            Ok(manifest
                .positions(ids)?
                .into_iter()
                .map(|p| manifest.records[p].label_indices()[0])
                .collect())
        };
        match silhouette_on {
            SilhouetteOn::Query => Some(silhouette(query_codes, &single(query_ids)?)?),
            SilhouetteOn::Gallery => Some(silhouette(gallery_codes, &single(gallery_ids)?)?),
            SilhouetteOn::None => None,
        }
    };
    Ok(MetricReport {
        map_at_k: map,
        k,
        pr_curve: pr,
        silhouette_0_100: sil,
        timing: None,
        queries: query_codes.len(),
        gallery: gallery_codes.len(),
        bits: query_codes.bits(),
    })
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub split: ShotSplit,
    pub model: HashModel,
    pub state: TrainState,
    pub report: MetricReport,
}

/// Split, train, encode the query and gallery sets, and score them.
pub fn run_experiment(
    ds: &Dataset,
    shots: usize,
    split_seed: u64,
    cfg: &TrainConfig,
) -> Result<Experiment> {
    let split = make_shot_split(&ds.manifest, shots, split_seed)?;
    if split.query_ids.is_empty() || split.gallery_ids.is_empty() {
        return Err(Error::Contract(
            "split leaves no queries or no gallery".into(),
        ));
    }
    let (model, state) = train_on_split(ds, &split, cfg, |_| {})?;
    let q = PackedCodes::from_signs(&model.encode(&ds.tokens(&split.query_ids)?)?);
    let g = PackedCodes::from_signs(&model.encode(&ds.tokens(&split.gallery_ids)?)?);
    let report = evaluate(
        &ds.manifest,
        &split.query_ids,
        &q,
        &split.gallery_ids,
        &g,
        ds.map_k(split.gallery_ids.len()),
        SilhouetteOn::Query,
    )?;
    Ok(Experiment {
        split,
        model,
        state,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shots: usize,
    /// On the 0–100 scale.
    pub map_mean: f64,
    pub map_std: f64,
    pub runs: usize,
}

/// One experiment per (shots, seed); seed `s` drives both the split and
/// the model. The standard deviation is the sample one.
pub fn sweep(
    ds: &Dataset,
    shots: &[usize],
    seeds: usize,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if seeds == 0 {
        return Err(Error::Contract("sweep needs at least one seed".into()));
    }
    shots
        .iter()
        .map(|&n| {
            let maps = (0..seeds as u64)
                .map(|s| {
                    let cfg = TrainConfig {
                        seed: s,
                        ..cfg.clone()
                    };
                    Ok(run_experiment(ds, n, s, &cfg)?.report.map_at_k * 100.0)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = maps.iter().sum::<f64>() / maps.len() as f64;
            let var = if maps.len() > 1 {
                maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (maps.len() - 1) as f64
            } else {
                0.0
            };
            Ok(SweepRow {
                shots: n,
                map_mean: mean,
                map_std: var.sqrt(),
                runs: maps.len(),
            })
        })
        .collect()
}

/// Shape of a timing run. Defaults mirror a small ViT block: 50 tokens of
/// width 128.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSetup {
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub knowledge_dim: usize,
    pub pool: usize,
    pub samples: usize,
    pub repetitions: usize,
    pub bits: usize,
    pub seed: u64,
}

impl Default for TimingSetup {
    fn default() -> Self {
        TimingSetup {
            tokens: 50,
            width: 128,
            heads: 4,
            knowledge_dim: 64,
            pool: 1000,
            samples: 32,
            repetitions: 10,
            bits: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub setup: TimingSetup,
    pub with_adapters: TimingReport,
    pub without_adapters: TimingReport,
    /// Relative increase of the median per-image time.
    pub overhead: f64,
}

/// Random block, pool and inputs of the requested shape, with non-zero
/// adapter weights so the adapted path does real work.
pub fn timing_fixture(setup: &TimingSetup) -> Result<(HashModel, Vec<Mat>)> {
    let mut rng = seeded(derive_seed(setup.seed, 30));
    let block = FrozenBlock::random(
        setup.width,
        setup.heads,
        4 * setup.width,
        setup.width,
        Pooling::ClassToken,
        &mut rng,
    )?;
    let names = (0..setup.pool).map(|i| format!("class_{i}")).collect();
    let k = Mat::randn(setup.pool, setup.knowledge_dim, 1.0, &mut rng);
    let pool = KnowledgePool::new(k, names, crate::knowledge::DEFAULT_PROMPT_TEMPLATE)?;
    let cfg = TrainConfig {
        bits: setup.bits,
        seed: setup.seed,
        ..TrainConfig::default()
    };
    let mut model = HashModel::new(block, pool, &cfg)?;
    for a in &mut model.adapters {
        a.q = Mat::randn(a.q.rows(), a.q.cols(), 0.1, &mut rng);
    }
    let tokens = (0..setup.samples)
        .map(|_| Mat::randn(setup.tokens, setup.width, 1.0, &mut rng))
        .collect();
    Ok((model, tokens))
}

/// Encode time with adapters against the same model with them removed.
pub fn measure_overhead(setup: &TimingSetup) -> Result<OverheadReport> {
    let (model, tokens) = timing_fixture(setup)?;
    let (with_adapters, without_adapters) =
        time_encoding_paired(&model, &tokens, setup.repetitions)?;
    Ok(OverheadReport {
        setup: setup.clone(),
        overhead: with_adapters.median_ms / without_adapters.median_ms - 1.0,
        with_adapters,
        without_adapters,
    })
}
