//! Fixed synthetic benchmarks shared by the acceptance suite and the CLI.

use crate::data::{generate_center, make_semi_split, split_dataset, CenterSpec, Dataset};
use crate::error::Result;

/// Labeled/unlabeled training data with validation and test sets.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// One center, 64x64: 100 training cases split at `labeled_ratio`,
/// 10 validation and 20 test cases.
pub fn single_center(labeled_ratio: f64, seed: u64) -> Result<Benchmark> {
    let ds = generate_center(&CenterSpec::default_c1(130, seed))?;
    let (train, val, test) = split_dataset(&ds, 10, 20, seed)?;
    let (labeled, unlabeled) = make_semi_split(&train, labeled_ratio, seed)?;
    Ok(Benchmark {
        labeled,
        unlabeled,
        val,
        test,
    })
}

/// Two centers: 100 labeled C1 cases, 60 unlabeled C2 cases, 10 C1
/// validation cases and 20 labeled C2 test cases.
pub fn two_center(seed: u64) -> Result<Benchmark> {
    let c1 = generate_center(&CenterSpec::default_c1(110, seed))?;
    let c2 = generate_center(&CenterSpec::default_c2(80, seed.wrapping_add(1)))?;
    let (labeled, val, _) = split_dataset(&c1, 10, 0, seed)?;
    let (unlabeled, _, test) = split_dataset(&c2, 0, 20, seed)?;
    Ok(Benchmark {
        labeled,
        unlabeled: unlabeled.strip_masks(),
        val,
        test,
    })
}
