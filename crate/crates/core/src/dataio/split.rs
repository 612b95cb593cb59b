//! Seeded N-shot training splits drawn from the database records.

use serde::{Deserialize, Serialize};

use crate::dataio::{Manifest, Split};
use crate::error::{Error, Result};
use crate::tensor::rng::{derive_seed, permutation, seeded};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSplit {
    pub shots: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    /// Database records not drawn for training, in manifest order.
    pub gallery_ids: Vec<String>,
    pub query_ids: Vec<String>,
}

/// Draws `shots` training samples per class from the database records.
///
/// Single-label data: uniform sampling without replacement within each
/// class. Multi-label data: one seeded permutation of the database is
/// scanned and a sample is taken whenever some class it carries still has
/// quota left; it then counts toward every class it carries.
pub fn make_shot_split(manifest: &Manifest, shots: usize, seed: u64) -> Result<ShotSplit> {
    if shots == 0 {
        return Err(Error::Contract("shots must be at least 1".into()));
    }
    let c = manifest.classes();
    let database: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Database)
        .collect();
    let mut chosen = vec![false; manifest.records.len()];
    let mut train = Vec::new();

    if manifest.multi_label {
        let mut quota = vec![shots; c];
        let mut rng = seeded(seed);
        for p in permutation(database.len(), &mut rng) {
            let rec = database[p];
            let labels = manifest.records[rec].label_indices();
            if labels.iter().any(|&l| quota[l] > 0) {
                for &l in &labels {
                    quota[l] = quota[l].saturating_sub(1);
                }
                chosen[rec] = true;
                train.push(rec);
                if quota.iter().all(|&q| q == 0) {
                    break;
                }
            }
        }
        let short: Vec<usize> = (0..c).filter(|&l| quota[l] > 0).collect();
        if !short.is_empty() {
            return Err(Error::InsufficientSamples {
                classes: short,
                needed: shots,
            });
        }
    } else {
        let mut by_class = vec![Vec::new(); c];
        for &rec in &database {
            by_class[manifest.records[rec].label_indices()[0]].push(rec);
        }
        let short: Vec<usize> = (0..c).filter(|&l| by_class[l].len() < shots).collect();
        if !short.is_empty() {
            return Err(Error::InsufficientSamples {
                classes: short,
                needed: shots,
            });
        }
        for (class, members) in by_class.iter().enumerate() {
            let mut rng = seeded(derive_seed(seed, class as u64));
            for p in permutation(members.len(), &mut rng).into_iter().take(shots) {
                chosen[members[p]] = true;
                train.push(members[p]);
            }
        }
    }

    let ids = |v: &mut dyn Iterator<Item = usize>| -> Vec<String> {
        v.map(|i| manifest.records[i].id.clone()).collect()
    };
    Ok(ShotSplit {
        shots,
        seed,
        train_ids: ids(&mut train.into_iter()),
        gallery_ids: ids(&mut database.into_iter().filter(|&i| !chosen[i])),
        query_ids: manifest.ids_in(Split::Query),
    })
}
