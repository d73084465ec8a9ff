use super::prepass::{build_pool, enrich_with_pool, icl_prediction};
use super::{
    LabeledDataset, MetricsReport, PipelineError, PromptStats, Record, SplitAssignment, SplitMethod, Standardizer, Task,
    DEFAULT_FRACTIONS,
};
use crate::chem::{PoolEntry, SamplingStrategy};
use crate::llm::{LlmClient, DEFAULT_INSTRUCTION, DEFAULT_PROMPT_BUDGET};
use crate::model::{mse_and_grad, Ablations, ModelConfig, MolFusionModel, Sample};
use crate::molgraph::parse_smiles;
use crate::numerics::{adam_step, AdamState, Matrix};
use crate::textenc::{tokenize, Vocabulary, DEFAULT_MAX_TOKENS, UNKNOWN_ID};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub d: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    pub cheb_order: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub set2set_steps: usize,
    pub icl_k: usize,
    pub icl_strategy: SamplingStrategy,
    pub ablations: Ablations,
    pub seed: u64,
    pub max_tokens: usize,
    pub split: SplitMethod,
    pub fractions: [f64; 3],
    pub instruction: String,
    /// Character budget of one few-shot prompt.
    pub prompt_budget: usize,
    /// Concurrent provider requests during the pre-pass.
    pub max_in_flight: usize,
    /// Return the best-validation parameters; otherwise the last epoch's.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 50,
            d: 128,
            lr: 1e-3,
            plateau_patience: 7,
            lr_factor: 0.5,
            early_stop_patience: 15,
            cheb_order: 3,
            heads: 4,
            head_dim: 32,
            set2set_steps: 3,
            icl_k: 16,
            icl_strategy: SamplingStrategy::Scaffold,
            ablations: Ablations::default(),
            seed: 0,
            max_tokens: DEFAULT_MAX_TOKENS,
            split: SplitMethod::Scaffold,
            fractions: DEFAULT_FRACTIONS,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            max_in_flight: 4,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("d", self.d),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("cheb_order", self.cheb_order),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("set2set_steps", self.set2set_steps),
            ("icl_k", self.icl_k),
            ("max_tokens", self.max_tokens),
            ("prompt_budget", self.prompt_budget),
            ("max_in_flight", self.max_in_flight),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(PipelineError::Config(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PipelineError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(PipelineError::Config(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor)));
        }
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(PipelineError::InvalidFractions(self.fractions));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, targets: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            cheb_order: self.cheb_order,
            s2s_steps: self.set2set_steps,
            heads: self.heads,
            head_dim: self.head_dim,
            vocab_size,
            max_tokens: self.max_tokens,
            targets,
            ablations: self.ablations,
        }
    }
}

/// Halves the rate after `patience` epochs without a strictly lower
/// validation loss and stops after `early_stop` such epochs since the best.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    early_stop: usize,
    best: f64,
    since_best: usize,
    since_cut: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerStep {
    pub improved: bool,
    pub lr_cut: bool,
    pub stop: bool,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, early_stop: usize) -> Self {
        Self { lr, factor, patience, early_stop, best: f64::INFINITY, since_best: 0, since_cut: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, valid_loss: f64) -> SchedulerStep {
        if valid_loss < self.best {
            self.best = valid_loss;
            self.since_best = 0;
            self.since_cut = 0;
            return SchedulerStep { improved: true, lr_cut: false, stop: false };
        }
        self.since_best += 1;
        self.since_cut += 1;
        let lr_cut = self.since_cut >= self.patience;
        if lr_cut {
            self.lr *= self.factor;
            self.since_cut = 0;
        }
        SchedulerStep { improved: false, lr_cut, stop: self.since_best >= self.early_stop }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Rate used during the epoch.
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.9e} valid_loss={:.9e} lr={:e}",
            self.epoch, self.train_loss, self.valid_loss, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }
}

/// Model inputs for the given records. Losses are computed on standardized
/// targets, so the cached few-shot predictions are standardized the same way.
pub fn build_samples(
    records: &[&Record],
    cfg: &TrainConfig,
    vocab: Option<&Vocabulary>,
    standardizer: &Standardizer,
) -> Result<Vec<Sample>, PipelineError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let g = parse_smiles(&r.smiles)
                .map_err(|e| PipelineError::InvalidSmiles { smiles: r.smiles.clone(), message: e.to_string() })?;
            let tokens = match vocab {
                Some(v) => {
                    let text = r.description.as_deref().ok_or(PipelineError::MissingEnrichment { index: i, what: "description" })?;
                    let t = tokenize(text, v);
                    if t.is_empty() {
                        vec![UNKNOWN_ID]
                    } else {
                        t
                    }
                }
                None => Vec::new(),
            };
            let h_pred = if cfg.ablations.peg_off {
                Vec::new()
            } else {
                let p = r.h_pred.as_deref().ok_or(PipelineError::MissingEnrichment { index: i, what: "few-shot prediction" })?;
                standardizer.standardize(p)
            };
            Ok(Sample::from_graph(&g, cfg.cheb_order, tokens, h_pred))
        })
        .collect()
}

fn mean_loss(model: &MolFusionModel, samples: &[Sample], targets: &[Vec<f64>]) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for (s, t) in samples.iter().zip(targets) {
        total += mse_and_grad(&model.predict(s)?, t).0;
    }
    Ok(total / samples.len() as f64)
}

/// Trains on `splits.train`, selecting the epoch with the lowest loss on
/// `splits.valid`. The dataset must already carry the descriptions and
/// few-shot predictions that the active ablations need.
pub fn train(
    ds: &LabeledDataset,
    splits: &SplitAssignment,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<(TrainedModel, TrainLog), PipelineError> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(PipelineError::EmptySplit("train"));
    }
    if splits.valid.is_empty() {
        return Err(PipelineError::EmptySplit("valid"));
    }
    let c = ds.targets();
    let train_records: Vec<&Record> = splits.train.iter().map(|&i| &ds.records[i]).collect();
    let valid_records: Vec<&Record> = splits.valid.iter().map(|&i| &ds.records[i]).collect();
    let standardizer = match ds.task {
        Task::Regression => Standardizer::fit(train_records.iter().map(|r| r.targets.as_slice()), c)?,
        Task::Classification => Standardizer::identity(c),
    };
    let vocab = if cfg.ablations.seg_off {
        None
    } else {
        let corpus = train_records
            .iter()
            .zip(&splits.train)
            .map(|(r, &i)| r.description.as_deref().ok_or(PipelineError::MissingEnrichment { index: i, what: "description" }))
            .collect::<Result<Vec<_>, _>>()?;
        Some(Vocabulary::build(&corpus, cfg.max_tokens))
    };
    let train_samples = build_samples(&train_records, cfg, vocab.as_ref(), &standardizer)?;
    let valid_samples = build_samples(&valid_records, cfg, vocab.as_ref(), &standardizer)?;
    let train_targets: Vec<Vec<f64>> = train_records.iter().map(|r| standardizer.standardize(&r.targets)).collect();
    let valid_targets: Vec<Vec<f64>> = valid_records.iter().map(|r| standardizer.standardize(&r.targets)).collect();

    let vocab_size = vocab.as_ref().map_or(1, Vocabulary::size);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MolFusionModel::new(cfg.model_config(vocab_size, c), &mut init_rng);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut adam = AdamState::new(cfg.lr);
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.plateau_patience, cfg.early_stop_patience);
    let mut best: Option<Vec<Matrix>> = None;
    let mut history = TrainLog::default();
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    log(&format!(
        "train molecules={} valid={} params={} ablations={}",
        train_samples.len(),
        valid_samples.len(),
        model.param_count(),
        cfg.ablations
    ));
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = scheduler.lr();
        adam.lr = lr;
        let mut epoch_total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_total = 0.0;
            for &j in chunk {
                let (y, cache) = model.forward(&train_samples[j])?;
                let (loss, mut dy) = mse_and_grad(&y, &train_targets[j]);
                batch_total += loss;
                dy.iter_mut().for_each(|g| *g *= scale);
                model.backward(&cache, &dy);
            }
            if !batch_total.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch, batch });
            }
            epoch_total += batch_total;
            adam_step(model.params_mut(), &mut adam);
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_total / train_samples.len() as f64,
            valid_loss: mean_loss(&model, &valid_samples, &valid_targets)?,
            lr,
        };
        log(&record.to_string());
        let step = scheduler.observe(record.valid_loss);
        history.epochs.push(record);
        if step.improved {
            best = Some(model.snapshot());
            history.best_epoch = epoch;
        }
        if step.stop {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    if cfg.restore_best {
        if let Some(values) = &best {
            model.restore(values);
        }
    }
    if let Some(b) = history.best() {
        log(&format!("best epoch={} valid_loss={:.9e} restored={}", b.epoch, b.valid_loss, cfg.restore_best));
    }
    let pool = splits.train.iter().map(|&i| (ds.records[i].smiles.clone(), ds.records[i].targets.clone())).collect();
    Ok((
        TrainedModel {
            model,
            vocab,
            standardizer,
            task: ds.task,
            target_names: ds.target_names.clone(),
            pool,
            config: cfg.clone(),
        },
        history,
    ))
}

/// Everything needed to predict for a new molecule.
pub struct TrainedModel {
    pub model: MolFusionModel,
    pub vocab: Option<Vocabulary>,
    pub standardizer: Standardizer,
    pub task: Task,
    pub target_names: Vec<String>,
    /// Training molecules and original-unit targets, the demonstration pool.
    pub pool: Vec<(String, Vec<f64>)>,
    pub config: TrainConfig,
}

impl TrainedModel {
    /// Destandardized predictions for enriched records.
    pub fn predict_records(&self, records: &[&Record]) -> Result<Vec<Vec<f64>>, PipelineError> {
        let samples = build_samples(records, &self.config, self.vocab.as_ref(), &self.standardizer)?;
        samples
            .iter()
            .map(|s| Ok(self.standardizer.destandardize(&self.model.predict(s)?)))
            .collect()
    }

    pub fn pool_entries(&self) -> Vec<PoolEntry> {
        let records: Vec<Record> = self
            .pool
            .iter()
            .map(|(s, t)| Record { smiles: s.clone(), targets: t.clone(), description: None, h_pred: None })
            .collect();
        build_pool(&records, &(0..records.len()).collect::<Vec<_>>())
    }

    /// Mean pool target, used when a few-shot response cannot be parsed.
    pub fn fallback_prediction(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.target_names.len()];
        for (_, t) in &self.pool {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v / self.pool.len() as f64;
            }
        }
        mean
    }

    /// Fetches descriptions and few-shot predictions for `ds`, drawing
    /// demonstrations from this model's training pool.
    pub fn enrich(
        &self,
        ds: &mut LabeledDataset,
        client: &LlmClient,
        log: &mut dyn FnMut(&str),
    ) -> Result<PromptStats, PipelineError> {
        enrich_with_pool(ds, &self.pool_entries(), &self.fallback_prediction(), &self.config, client, log)
    }

    /// Queries the provider for whatever the model consumes, then predicts.
    pub fn predict_smiles(&self, smiles: &str, client: &LlmClient) -> Result<Vec<f64>, PipelineError> {
        parse_smiles(smiles)
            .map_err(|e| PipelineError::InvalidSmiles { smiles: smiles.to_string(), message: e.to_string() })?;
        let mut record = Record { smiles: smiles.to_string(), targets: Vec::new(), description: None, h_pred: None };
        if !self.config.ablations.seg_off {
            record.description =
                Some(client.describe(smiles).map_err(|source| PipelineError::Provider { index: 0, source })?);
        }
        if !self.config.ablations.peg_off {
            let fallback = self.fallback_prediction();
            let outcome = icl_prediction(smiles, &self.pool_entries(), &self.config, client, &fallback)?;
            record.h_pred = Some(outcome.prediction);
        }
        Ok(self.predict_records(&[&record])?.remove(0))
    }

    /// Metrics in original target units over `indices` of `ds`.
    pub fn evaluate(&self, ds: &LabeledDataset, indices: &[usize], split: &'static str) -> Result<MetricsReport, PipelineError> {
        if indices.is_empty() {
            return Err(PipelineError::EmptySplit(split));
        }
        let records: Vec<&Record> = indices.iter().map(|&i| &ds.records[i]).collect();
        let predictions = self.predict_records(&records)?;
        let targets: Vec<Vec<f64>> = records.iter().map(|r| r.targets.clone()).collect();
        Ok(MetricsReport::compute(self.task, split, &self.target_names, &predictions, &targets))
    }

    /// Mean squared error over `indices` in standardized units, the quantity
    /// the optimizer minimizes.
    pub fn standardized_mse(&self, ds: &LabeledDataset, indices: &[usize]) -> Result<f64, PipelineError> {
        let records: Vec<&Record> = indices.iter().map(|&i| &ds.records[i]).collect();
        let samples = build_samples(&records, &self.config, self.vocab.as_ref(), &self.standardizer)?;
        let targets: Vec<Vec<f64>> = records.iter().map(|r| self.standardizer.standardize(&r.targets)).collect();
        mean_loss(&self.model, &samples, &targets)
    }
}
