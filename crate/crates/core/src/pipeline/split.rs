use super::{LabeledDataset, PipelineError};
use crate::chem::{murcko_scaffold, ScaffoldKey};
use crate::molgraph::parse_smiles;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitMethod {
    #[default]
    Scaffold,
    Random,
}

impl std::fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMethod::Scaffold => "scaffold",
            SplitMethod::Random => "random",
        })
    }
}

impl std::str::FromStr for SplitMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scaffold" => Ok(SplitMethod::Scaffold),
            "random" => Ok(SplitMethod::Random),
            other => Err(format!("unknown split method {other:?} (expected scaffold or random)")),
        }
    }
}


#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, valid or test)")),
        }
    }
}

fn check_fractions(fractions: [f64; 3]) -> Result<(), PipelineError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(PipelineError::InvalidFractions(fractions));
    }
    Ok(())
}

/// Scaffold key per SMILES; records are assumed parseable.
pub fn scaffold_keys(smiles: &[String]) -> Vec<ScaffoldKey> {
    smiles
        .iter()
        .map(|s| murcko_scaffold(&parse_smiles(s).expect("dataset records parse")))
        .collect()
}

/// Whole scaffold groups, largest first (ties by key), each go to the split
/// with the largest shortfall against its target size (ties to the earlier
/// split). The seed is recorded but the assignment does not depend on it.
pub fn scaffold_split(ds: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment, PipelineError> {
    check_fractions(fractions)?;
    let keys = scaffold_keys(&ds.smiles());
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k.0.as_str()).or_default().push(i);
    }
    if groups.len() < 3 {
        return Err(PipelineError::TooFewScaffolds { groups: groups.len() });
    }
    let mut ordered: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    ordered.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(b.0)));
    let n = ds.len() as f64;
    let mut bins: [Vec<usize>; 3] = Default::default();
    for (_, members) in ordered {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (s, bin) in bins.iter().enumerate() {
            let deficit = fractions[s] * n - bin.len() as f64;
            if deficit > best_deficit {
                best = s;
                best_deficit = deficit;
            }
        }
        bins[best].extend(members);
    }
    let [mut train, mut valid, mut test] = bins;
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment { train, valid, test, fractions, seed })
}

pub fn split_dataset(
    ds: &LabeledDataset,
    method: SplitMethod,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment, PipelineError> {
    match method {
        SplitMethod::Scaffold => scaffold_split(ds, fractions, seed),
        SplitMethod::Random => random_split(ds.len(), fractions, seed),
    }
}

/// Seeded shuffle cut at the fraction boundaries.
pub fn random_split(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment, PipelineError> {
    check_fractions(fractions)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_valid = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut train = idx[..n_train].to_vec();
    let mut valid = idx[n_train..n_train + n_valid].to_vec();
    let mut test = idx[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment { train, valid, test, fractions, seed })
}
