use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_cifar10, load_mnist, synthetic_splits, Dataset, Split};
use crate::error::{Error, Result};
use crate::seeds;

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "DDI_DATA_ROOT";

pub const PRESETS: [&str; 4] = ["synthetic", "synthetic-small", "mnist-5k", "cifar-5k"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecord {
    pub preset: String,
    pub seed: u64,
    pub source: Option<PathBuf>,
    pub train_count: usize,
    pub test_count: usize,
    /// FNV-1a digest of the selected source indices, in order.
    pub train_fingerprint: String,
    pub test_fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
    pub record: SubsetRecord,
}

fn fingerprint(indices: &[usize]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &i in indices {
        for b in (i as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{:016x}", h)
}

fn sample(ds: &Dataset, k: usize, seed: u64, stream: &str) -> (Dataset, Vec<usize>) {
    let mut idx = rand::seq::index::sample(&mut seeds::stream(seed, stream), ds.len(), k.min(ds.len())).into_vec();
    idx.sort_unstable();
    (ds.subset(&idx), idx)
}

/// Resolves the dataset root: an explicit path, then the environment
/// variable, then `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads a named preset. Real-data subsets are drawn by seeded sampling
/// from the full splits under `<root>/mnist` or `<root>/cifar-10-batches-bin`.
pub fn load_preset(name: &str, seed: u64, root: Option<&Path>) -> Result<DataSplits> {
    let (train, test, source, ti, si) = match name {
        "synthetic" | "synthetic-small" => {
            let (a, b) = if name == "synthetic" { (4000, 1000) } else { (1000, 400) };
            let (train, test) = synthetic_splits(a, b, seed)?;
            let (ti, si) = ((0..a).collect::<Vec<_>>(), (0..b).collect::<Vec<_>>());
            (train, test, None, ti, si)
        }
        "mnist-5k" | "cifar-5k" => {
            let dir = data_root(root).join(if name == "mnist-5k" { "mnist" } else { "cifar-10-batches-bin" });
            let load = |split| if name == "mnist-5k" { load_mnist(&dir, split) } else { load_cifar10(&dir, split) };
            let (train, ti) = sample(&load(Split::Train)?, 5000, seed, "subset.train");
            let (test, si) = sample(&load(Split::Test)?, 1000, seed, "subset.test");
            (train, test, Some(dir), ti, si)
        }
        other => {
            return Err(Error::Config(format!("unknown dataset preset `{}` (expected one of {})", other, PRESETS.join(", "))))
        }
    };
    let record = SubsetRecord {
        preset: name.to_string(),
        seed,
        source,
        train_count: train.len(),
        test_count: test.len(),
        train_fingerprint: fingerprint(&ti),
        test_fingerprint: fingerprint(&si),
    };
    Ok(DataSplits { train, test, record })
}
