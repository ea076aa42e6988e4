//! Deterministic validation/test user sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetSplit, UserHistory};

/// Sample `n_val` validation and `n_test` test users. A pure function of the
/// uid set, the counts, and the seed: map iteration order cannot leak in
/// because uids are sorted before the seeded shuffle.
pub fn split_users(
    histories: &BTreeMap<u32, UserHistory>,
    n_val: usize,
    n_test: usize,
    seed: u64,
    horizon_day: u32,
) -> Result<DatasetSplit, DataError> {
    let mut uids: Vec<u32> = histories.keys().copied().collect();
    if n_val + n_test > uids.len() {
        return Err(DataError::Config(format!(
            "need {} val + {} test users but only {} available",
            n_val,
            n_test,
            uids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uids.shuffle(&mut rng);
    let mut val: Vec<u32> = uids[..n_val].to_vec();
    let mut test: Vec<u32> = uids[n_val..n_val + n_test].to_vec();
    let mut train: Vec<u32> = uids[n_val + n_test..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(DatasetSplit { train, val, test, horizon_day })
}
