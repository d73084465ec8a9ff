//! Finite-difference verification of every trainable parameter of the full
//! model on random small molecules.

use crate::model::{mse_and_grad, Ablations, ModelConfig, MolFusionModel, Sample};
use crate::molgraph::parse_smiles;
use crate::numerics::{finite_diff_grad, max_relative_error, Matrix};
use crate::synth::random_smiles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Random molecules checked per model variant.
    pub trials: usize,
    pub seed: u64,
    pub max_atoms: usize,
    pub eps: f64,
    pub floor: f64,
    /// Targets are drawn within this distance of the model output. Central
    /// differences carry round-off of about `ulp(y) / eps` times the residual,
    /// so small residuals keep that noise below the absolute floor.
    pub residual: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 3,
            seed: 0,
            max_atoms: 6,
            eps: 1e-5,
            floor: 1e-8,
            residual: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResult {
    pub family: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub families: Vec<FamilyResult>,
    pub molecules: Vec<String>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.families.iter().map(|f| f.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.families.iter().all(|f| f.max_rel_error < tolerance)
    }
}

/// Groups per-head and per-order tensors: `fusion.head2.w_q_g` becomes
/// `fusion.w_q_g`, `gnn.cheb.theta.1` becomes `gnn.cheb.theta`.
pub fn family_of(name: &str) -> String {
    let parts: Vec<&str> = name
        .split('.')
        .filter(|p| !(p.starts_with("head") && p[4..].chars().all(|c| c.is_ascii_digit()) && p.len() > 4))
        .filter(|p| !p.chars().all(|c| c.is_ascii_digit()))
        .collect();
    parts.join(".")
}

const VARIANTS: [&str; 2] = ["none", "moe"];

pub fn run_gradcheck(opts: &GradcheckOptions) -> GradcheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut molecules = Vec::new();
    for variant in VARIANTS {
        let ablations: Ablations = variant.parse().expect("built-in variant");
        for _ in 0..opts.trials {
            let smiles = random_smiles(&mut rng, opts.max_atoms);
            let (model, sample, target) = random_problem(&smiles, ablations, opts.residual, &mut rng);
            for (name, err, n) in check_model(model, &sample, &target, opts) {
                let e = worst.entry(family_of(&name)).or_insert((0.0, 0));
                e.0 = e.0.max(err);
                e.1 += n;
            }
            molecules.push(smiles);
        }
    }
    GradcheckReport {
        families: worst
            .into_iter()
            .map(|(family, (max_rel_error, entries))| FamilyResult { family, max_rel_error, entries })
            .collect(),
        molecules,
        elapsed: start.elapsed(),
    }
}

fn random_problem<R: Rng>(
    smiles: &str,
    ablations: Ablations,
    residual: f64,
    rng: &mut R,
) -> (MolFusionModel, Sample, Vec<f64>) {
    let cfg = ModelConfig {
        d: 8,
        cheb_order: 3,
        s2s_steps: 3,
        heads: 2,
        head_dim: 4,
        vocab_size: 12,
        max_tokens: 10,
        targets: 2,
        ablations,
    };
    let mut model = MolFusionModel::new(cfg.clone(), rng);
    // Zero-initialised biases and pooling vectors would hide gradient paths.
    for p in model.params_mut() {
        if p.value.as_slice().iter().all(|&v| v == 0.0) {
            let (r, c) = p.shape();
            p.value = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .expect("shape matches length");
        }
    }
    let g = parse_smiles(smiles).expect("generator emits valid SMILES");
    let m = rng.gen_range(1..=cfg.max_tokens);
    let tokens = (0..m).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let h_pred = (0..cfg.targets).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sample = Sample::from_graph(&g, cfg.cheb_order, tokens, h_pred);
    let y = model.predict(&sample).expect("consistent shapes");
    let target = y.iter().map(|v| v + rng.gen_range(-residual..=residual)).collect();
    (model, sample, target)
}

fn check_model(mut model: MolFusionModel, sample: &Sample, target: &[f64], opts: &GradcheckOptions) -> Vec<(String, f64, usize)> {
    model.zero_grad();
    let (y, cache) = model.forward(sample).expect("consistent shapes");
    let (_, dy) = mse_and_grad(&y, target);
    model.backward(&cache, &dy);
    let analytic: Vec<(String, Matrix, Matrix)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone(), p.grad.clone()))
        .collect();
    let mut out = Vec::with_capacity(analytic.len());
    for (idx, (name, value, grad)) in analytic.into_iter().enumerate() {
        let numeric = finite_diff_grad(&value, opts.eps, |m| {
            model.params_mut()[idx].value = m.clone();
            let y = model.predict(sample).expect("consistent shapes");
            mse_and_grad(&y, target).0
        })
        .expect("finite loss near a random point");
        model.params_mut()[idx].value = value;
        let n = grad.as_slice().len();
        out.push((name, max_relative_error(&grad, &numeric, opts.floor), n));
    }
    out
}
