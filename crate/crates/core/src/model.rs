//! The assembled property model and its ablation variants.

use crate::fusion::{CrossModalParams, FusionCache, FusionError};
use crate::gnn::{cheb_basis, EncoderCache, GnnError, GraphEncoder};
use crate::llm::{encode_prediction, LlmError, PredictionEmbeddingParams};
use crate::molgraph::{edge_to_node, spectral_operator, MoleculeGraph, EDGE_FEATURES, NODE_FEATURES};
use crate::moe::{ConcatHead, GateCache, GateParams, MoeError};
use crate::numerics::{Matrix, ParamTensor};
use crate::textenc::{TextCache, TextEncoderParams, TextError};
use rand::Rng;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("graph encoder: {0}")]
    Graph(#[from] GnnError),
    #[error("text encoder: {0}")]
    Text(#[from] TextError),
    #[error("fusion: {0}")]
    Fusion(#[from] FusionError),
    #[error("gate: {0}")]
    Gate(#[from] MoeError),
    #[error("prediction embedding: expected {expected} values, got {got}")]
    Prediction { expected: usize, got: usize },
}

/// Components switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Drop the description branch; the graph vector stands in for the fused one.
    pub seg_off: bool,
    /// Drop the prediction embedding; its input to the head is zero.
    pub peg_off: bool,
    /// Replace the gate with a linear map of the concatenated inputs.
    pub moe_off: bool,
}

impl Ablations {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.seg_off {
            v.push("seg");
        }
        if self.peg_off {
            v.push("peg");
        }
        if self.moe_off {
            v.push("moe");
        }
        v
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.names();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for Ablations {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut a = Ablations::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "seg" => a.seg_off = true,
                "peg" => a.peg_off = true,
                "moe" => a.moe_off = true,
                other => return Err(format!("unknown ablation {other:?} (expected seg, peg, moe or none)")),
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub cheb_order: usize,
    pub s2s_steps: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub targets: usize,
    pub ablations: Ablations,
}

/// One molecule, preprocessed for the model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub xv: Matrix,
    pub xe: Matrix,
    pub basis: Vec<Matrix>,
    pub tokens: Vec<usize>,
    /// Parsed few-shot prediction, in the same units as the training targets.
    pub h_pred: Vec<f64>,
}

impl Sample {
    pub fn from_graph(g: &MoleculeGraph, cheb_order: usize, tokens: Vec<usize>, h_pred: Vec<f64>) -> Self {
        Self {
            xv: g.node_features.clone(),
            xe: edge_to_node(g),
            basis: cheb_basis(&spectral_operator(g), cheb_order),
            tokens,
            h_pred,
        }
    }
}

pub struct TextBranch {
    pub encoder: TextEncoderParams,
    pub fusion: CrossModalParams,
}

pub enum Head {
    Gate(GateParams),
    Concat(ConcatHead),
}

pub struct MolFusionModel {
    cfg: ModelConfig,
    pub graph: GraphEncoder,
    pub text: Option<TextBranch>,
    pub icl: Option<PredictionEmbeddingParams>,
    pub head: Head,
}

enum HeadCache {
    Gate(GateCache),
    Concat(Vec<f64>),
}

pub struct ModelCache {
    graph: EncoderCache,
    text: Option<(TextCache, FusionCache)>,
    h_pred: Vec<f64>,
    head: HeadCache,
}

impl ModelCache {
    /// Gate values, when the gated head is in use.
    pub fn gate(&self) -> Option<&[f64]> {
        match &self.head {
            HeadCache::Gate(c) => Some(c.gate()),
            HeadCache::Concat(_) => None,
        }
    }
}

impl MolFusionModel {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let a = cfg.ablations;
        let graph = GraphEncoder::new(d, NODE_FEATURES, EDGE_FEATURES, cfg.cheb_order, cfg.s2s_steps, rng);
        let text = (!a.seg_off).then(|| TextBranch {
            encoder: TextEncoderParams::new(cfg.vocab_size, cfg.max_tokens, d, rng),
            fusion: CrossModalParams::new(d, cfg.heads, cfg.head_dim, rng),
        });
        let icl = (!a.peg_off).then(|| PredictionEmbeddingParams::new(d, cfg.targets, rng));
        let head = if a.moe_off {
            let inputs = if a.peg_off { 1 } else { 2 };
            Head::Concat(ConcatHead::new(inputs * d, cfg.targets, rng))
        } else {
            Head::Gate(GateParams::new(d, cfg.targets, !a.peg_off, rng))
        };
        Self { cfg, graph, text, icl, head }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut v = self.graph.params();
        if let Some(t) = &self.text {
            v.extend(t.encoder.params());
            v.extend(t.fusion.params());
        }
        if let Some(icl) = &self.icl {
            v.extend(icl.params());
        }
        match &self.head {
            Head::Gate(g) => v.extend(g.params()),
            Head::Concat(c) => v.extend(c.params()),
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.graph.params_mut();
        if let Some(t) = &mut self.text {
            v.extend(t.encoder.params_mut());
            v.extend(t.fusion.params_mut());
        }
        if let Some(icl) = &mut self.icl {
            v.extend(icl.params_mut());
        }
        match &mut self.head {
            Head::Gate(g) => v.extend(g.params_mut()),
            Head::Concat(c) => v.extend(c.params_mut()),
        }
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.as_slice().len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn forward(&self, s: &Sample) -> Result<(Vec<f64>, ModelCache), ModelError> {
        let (h_g, graph) = self.graph.forward(&s.xv, &s.xe, &s.basis)?;
        let (h_f, text) = match &self.text {
            Some(t) => {
                let (h_text, tc) = t.encoder.forward(&s.tokens)?;
                let (h_f, fc) = t.fusion.forward(&h_g, &h_text)?;
                (h_f, Some((tc, fc)))
            }
            None => (h_g, None),
        };
        let h_icl = match &self.icl {
            Some(p) => encode_prediction(&s.h_pred, p).map_err(|e| match e {
                LlmError::ShapeMismatch { expected, got } => ModelError::Prediction { expected, got },
                other => unreachable!("encode_prediction only reports shapes: {other}"),
            })?,
            None => Vec::new(),
        };
        let (y, head) = match &self.head {
            Head::Gate(g) => {
                let gc = g.gate_fuse(&h_f, &h_icl)?;
                (g.predict(gc.h_u())?, HeadCache::Gate(gc))
            }
            Head::Concat(c) => {
                let x = [h_f.as_slice(), h_icl.as_slice()].concat();
                (c.forward(&x)?, HeadCache::Concat(x))
            }
        };
        Ok((
            y,
            ModelCache {
                graph,
                text,
                h_pred: s.h_pred.clone(),
                head,
            },
        ))
    }

    pub fn predict(&self, s: &Sample) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(s)?.0)
    }

    /// Accumulates gradients of a loss whose gradient at the output is `dy`.
    pub fn backward(&mut self, cache: &ModelCache, dy: &[f64]) {
        let d = self.cfg.d;
        let (dh_f, dh_icl) = match (&mut self.head, &cache.head) {
            (Head::Gate(g), HeadCache::Gate(gc)) => g.backward(gc, dy),
            (Head::Concat(c), HeadCache::Concat(x)) => {
                let dx = c.backward(x, dy);
                let (a, b) = dx.split_at(d);
                (a.to_vec(), b.to_vec())
            }
            _ => unreachable!("cache produced by a different head"),
        };
        if let Some(icl) = &mut self.icl {
            icl.backward(&cache.h_pred, &dh_icl);
        }
        let dh_g = match (&mut self.text, &cache.text) {
            (Some(t), Some((tc, fc))) => {
                let (dg, dt) = t.fusion.backward(fc, &dh_f);
                t.encoder.backward(tc, &dt);
                dg
            }
            _ => dh_f,
        };
        self.graph.backward(&cache.graph, &dh_g);
    }

    /// Copies of all parameter values, in `params()` order.
    pub fn snapshot(&self) -> Vec<Matrix> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Matrix]) {
        for (p, v) in self.params_mut().into_iter().zip(values) {
            p.value = v.clone();
        }
    }
}

/// Mean squared error over the `c` outputs and its gradient.
pub fn mse_and_grad(y: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let c = y.len() as f64;
    let loss = y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c;
    let grad = y.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / c).collect();
    (loss, grad)
}
