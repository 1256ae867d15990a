use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IngestError, Trajectory};

/// Train / validation / test partition of the trips, 90 / 5 / 5.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub seed: u64,
}

/// Trip ids per split, the on-disk form of a [`DatasetSplit`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn ids(&self) -> SplitIds {
        let ids = |v: &[Trajectory]| v.iter().map(|t| t.id.clone()).collect();
        SplitIds {
            seed: self.seed,
            train: ids(&self.train),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }

    /// Rebuilds a split from stored ids. Trips not named in `ids` are ignored.
    pub fn from_ids(trips: Vec<Trajectory>, ids: &SplitIds) -> Self {
        use std::collections::HashMap;
        let mut by_id: HashMap<String, Trajectory> =
            trips.into_iter().map(|t| (t.id.clone(), t)).collect();
        let mut take = |names: &[String]| names.iter().filter_map(|n| by_id.remove(n)).collect();
        DatasetSplit {
            train: take(&ids.train),
            validation: take(&ids.validation),
            test: take(&ids.test),
            seed: ids.seed,
        }
    }
}

/// Seeded shuffle, then a 90 / 5 / 5 cut. Input order does not matter: trips
/// are canonicalized by id before shuffling.
pub fn split_dataset(mut trips: Vec<Trajectory>, seed: u64) -> Result<DatasetSplit, IngestError> {
    let n = trips.len();
    if n < 20 {
        return Err(IngestError::TooFewTrips(n));
    }
    trips.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trips.shuffle(&mut rng);
    let n_val = (n as f64 * 0.05).round() as usize;
    let n_test = n_val;
    let test = trips.split_off(n - n_test);
    let validation = trips.split_off(n - n_test - n_val);
    Ok(DatasetSplit {
        train: trips,
        validation,
        test,
        seed,
    })
}
