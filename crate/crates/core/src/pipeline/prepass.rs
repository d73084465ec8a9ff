use super::{LabeledDataset, PipelineError, Record, SplitAssignment, TrainConfig};
use crate::chem::{morgan_fingerprint, sample_demos, stable_hash, ChemError, PoolEntry, DEFAULT_NBITS, DEFAULT_RADIUS};
use crate::llm::{build_icl_prompt_within, parse_predictions, LlmClient, LlmError, PromptBundle};
use crate::molgraph::{parse_smiles, MoleculeGraph};
use std::fmt;

/// Sampler seed for one query molecule, fixed by the run seed and the SMILES.
pub fn molecule_seed(seed: u64, smiles: &str) -> u64 {
    let mut words = vec![seed, smiles.len() as u64];
    words.extend(smiles.as_bytes().chunks(8).map(|c| {
        let mut b = [0u8; 8];
        b[..c.len()].copy_from_slice(c);
        u64::from_le_bytes(b)
    }));
    stable_hash(&words)
}

pub(crate) fn build_pool(records: &[Record], indices: &[usize]) -> Vec<PoolEntry> {
    indices
        .iter()
        .map(|&i| {
            let r = &records[i];
            let g = parse_smiles(&r.smiles).expect("dataset records parse");
            PoolEntry {
                smiles: r.smiles.clone(),
                targets: r.targets.clone(),
                fingerprint: morgan_fingerprint(&g, DEFAULT_RADIUS, DEFAULT_NBITS).expect("default fingerprint size"),
            }
        })
        .collect()
}

/// The few-shot request for `smiles`, with `k` clamped to the pool entries
/// that are not the query itself.
pub(crate) fn icl_bundle(
    smiles: &str,
    graph: &MoleculeGraph,
    pool: &[PoolEntry],
    cfg: &TrainConfig,
) -> Result<PromptBundle, ChemError> {
    let fp = morgan_fingerprint(graph, DEFAULT_RADIUS, DEFAULT_NBITS)?;
    let eligible = pool.iter().filter(|p| p.smiles != smiles).count();
    let k = cfg.icl_k.min(eligible);
    let demos = sample_demos(smiles, &fp, pool, k, cfg.icl_strategy, molecule_seed(cfg.seed, smiles))?;
    let pairs: Vec<(String, Vec<f64>)> = demos.into_iter().map(|d| (d.smiles, d.targets)).collect();
    Ok(build_icl_prompt_within(smiles, &pairs, &cfg.instruction, cfg.prompt_budget))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclOutcome {
    pub prediction: Vec<f64>,
    pub demos: usize,
    pub truncated: usize,
    /// False when the response held too few numbers and `fallback` was used.
    pub parsed: bool,
}

fn finish(bundle: &PromptBundle, response: String, c: usize, fallback: &[f64]) -> IclOutcome {
    let (prediction, parsed) = match parse_predictions(&response, c) {
        Ok(p) if p.iter().all(|v| v.is_finite()) => (p, true),
        _ => (fallback.to_vec(), false),
    };
    IclOutcome { prediction, demos: bundle.demo_count(), truncated: bundle.dropped, parsed }
}

/// Few-shot prediction for one molecule outside the dataset.
pub fn icl_prediction(
    smiles: &str,
    pool: &[PoolEntry],
    cfg: &TrainConfig,
    client: &LlmClient,
    fallback: &[f64],
) -> Result<IclOutcome, PipelineError> {
    let g = parse_smiles(smiles)
        .map_err(|e| PipelineError::InvalidSmiles { smiles: smiles.to_string(), message: e.to_string() })?;
    let bundle = icl_bundle(smiles, &g, pool, cfg).map_err(|source| PipelineError::Sampling { index: 0, source })?;
    let text = client.complete(&bundle).map_err(|source| PipelineError::Provider { index: 0, source })?;
    Ok(finish(&bundle, text, fallback.len(), fallback))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptStats {
    pub molecules: usize,
    pub descriptions: usize,
    pub icl_prompts: usize,
    pub demos_min: usize,
    pub demos_max: usize,
    pub demos_total: usize,
    pub truncated: usize,
    pub parse_failures: usize,
}

impl PromptStats {
    fn record(&mut self, o: &IclOutcome) {
        if self.icl_prompts == 0 {
            self.demos_min = o.demos;
        }
        self.icl_prompts += 1;
        self.demos_min = self.demos_min.min(o.demos);
        self.demos_max = self.demos_max.max(o.demos);
        self.demos_total += o.demos;
        self.truncated += o.truncated;
        self.parse_failures += usize::from(!o.parsed);
    }

    pub fn demos_mean(&self) -> f64 {
        if self.icl_prompts == 0 {
            0.0
        } else {
            self.demos_total as f64 / self.icl_prompts as f64
        }
    }
}

impl fmt::Display for PromptStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "prompt_stats molecules={} descriptions={} icl_prompts={} demos_min={} demos_max={} demos_mean={:.2} truncated_demos={} parse_failures={}",
            self.molecules,
            self.descriptions,
            self.icl_prompts,
            self.demos_min,
            self.demos_max,
            self.demos_mean(),
            self.truncated,
            self.parse_failures
        )
    }
}

fn train_mean(ds: &LabeledDataset, train: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; ds.targets()];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&ds.records[i].targets) {
            *m += v / train.len() as f64;
        }
    }
    mean
}

/// Fills in descriptions and few-shot predictions for every record that the
/// active ablations use. Demonstrations come from the training split only;
/// a molecule is never its own demonstration. Unparseable responses fall back
/// to the training mean and are counted.
pub fn enrich(
    ds: &mut LabeledDataset,
    splits: &SplitAssignment,
    cfg: &TrainConfig,
    client: &LlmClient,
    log: &mut dyn FnMut(&str),
) -> Result<PromptStats, PipelineError> {
    if splits.train.is_empty() {
        return Err(PipelineError::EmptySplit("train"));
    }
    let pool = build_pool(&ds.records, &splits.train);
    let fallback = train_mean(ds, &splits.train);
    enrich_with_pool(ds, &pool, &fallback, cfg, client, log)
}

/// [`enrich`] with an explicit demonstration pool.
pub fn enrich_with_pool(
    ds: &mut LabeledDataset,
    pool: &[PoolEntry],
    fallback: &[f64],
    cfg: &TrainConfig,
    client: &LlmClient,
    log: &mut dyn FnMut(&str),
) -> Result<PromptStats, PipelineError> {
    let mut stats = PromptStats { molecules: ds.len(), ..Default::default() };
    if !cfg.ablations.seg_off {
        let missing: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].description.is_none()).collect();
        let smiles: Vec<String> = missing.iter().map(|&i| ds.records[i].smiles.clone()).collect();
        for (&i, text) in missing.iter().zip(client.describe_all(&smiles, cfg.max_in_flight)) {
            ds.records[i].description = Some(text.map_err(|source| PipelineError::Provider { index: i, source })?);
        }
        stats.descriptions = ds.len();
    }
    if !cfg.ablations.peg_off {
        let bundles = ds
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let g = parse_smiles(&r.smiles).expect("dataset records parse");
                icl_bundle(&r.smiles, &g, pool, cfg).map_err(|source| PipelineError::Sampling { index: i, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let responses = client.complete_all(&bundles, cfg.max_in_flight);
        for (i, (bundle, text)) in bundles.iter().zip(responses).enumerate() {
            let text = text.map_err(|source: LlmError| PipelineError::Provider { index: i, source })?;
            let outcome = finish(bundle, text, ds.targets(), fallback);
            stats.record(&outcome);
            ds.records[i].h_pred = Some(outcome.prediction);
        }
    }
    log(&stats.to_string());
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ProviderConfig;
    use crate::pipeline::random_split;

    fn dataset(n: usize) -> LabeledDataset {
        let pairs = crate::synth::affine_dataset(n, 6, 0.0, 11);
        LabeledDataset::from_pairs(pairs, vec!["y".into()], None).unwrap()
    }

    #[test]
    fn demo_counts_follow_k_and_clamp() {
        let mut ds = dataset(30);
        let splits = random_split(ds.len(), [0.8, 0.1, 0.1], 0).unwrap();
        let client = LlmClient::new(ProviderConfig::default(), None);
        let mut lines = Vec::new();
        for k in [4, 16] {
            let cfg = TrainConfig { icl_k: k, ..TrainConfig::default() };
            let stats = enrich(&mut ds, &splits, &cfg, &client, &mut |l| lines.push(l.to_string())).unwrap();
            assert_eq!((stats.demos_min, stats.demos_max), (k, k));
            assert_eq!(stats.parse_failures, 0);
        }
        let cfg = TrainConfig { icl_k: 100, ..TrainConfig::default() };
        let stats = enrich(&mut ds, &splits, &cfg, &client, &mut |_| {}).unwrap();
        // 24 train molecules: train queries see 23, the others all 24.
        assert_eq!((stats.demos_min, stats.demos_max), (23, 24));
        assert!(lines[0].contains("demos_min=4 demos_max=4"));
        assert!(ds.records.iter().all(|r| r.description.is_some() && r.h_pred.is_some()));
    }

    #[test]
    fn ablations_skip_requests() {
        let mut ds = dataset(12);
        let splits = random_split(ds.len(), [0.8, 0.1, 0.1], 0).unwrap();
        let client = LlmClient::new(ProviderConfig::default(), None);
        let cfg = TrainConfig { ablations: "seg,peg".parse().unwrap(), ..TrainConfig::default() };
        enrich(&mut ds, &splits, &cfg, &client, &mut |_| {}).unwrap();
        assert_eq!(client.stats().provider_calls, 0);
        assert!(ds.records.iter().all(|r| r.description.is_none() && r.h_pred.is_none()));
    }

    #[test]
    fn seeds_differ_by_smiles() {
        assert_ne!(molecule_seed(0, "CCO"), molecule_seed(0, "OCC"));
        assert_ne!(molecule_seed(0, "CCO"), molecule_seed(1, "CCO"));
        assert_eq!(molecule_seed(5, "c1ccccc1"), molecule_seed(5, "c1ccccc1"));
    }
}
