//! Files in and out: the feature store, manifests, shot splits and
//! synthetic data.

pub mod codes;
pub mod manifest;
pub mod split;
pub mod store;
pub mod synth;

pub use codes::CodesFile;
pub use manifest::{BlockConfig, Manifest, Record, Split};
pub use split::{make_shot_split, ShotSplit};
pub use store::{read_verified, write_with_sidecar, Checksums, FeatureStore, Tensor};
pub use synth::{generate_synthetic, SynthSpec};
