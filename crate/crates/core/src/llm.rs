//! Prompt construction, the text-completion client with its on-disk cache,
//! response parsing, and the linear prediction embedding.

use crate::molgraph::{parse_smiles, BondOrder, Element, MoleculeGraph};
use crate::numerics::{Matrix, ParamTensor};
use rand::Rng;
use regex::Regex;
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::Duration;
use thiserror::Error;

pub const DEFAULT_INSTRUCTION: &str = "Below are the input-output examples (SMILES strings-molecular properties pairs) for property prediction task. Predict the molecular properties for the query SMILES strings.";

/// Characters allowed in one prompt; roughly 4096 tokens at 4 characters each.
pub const DEFAULT_PROMPT_BUDGET: usize = 16_384;

/// Separator line placed between the responses of one molecule's description.
pub const RESPONSE_SEPARATOR: &str = "\n---\n";

const COT_QUESTIONS: [&str; 13] = [
    "What are the physical properties of this molecule such as its boiling point, melting point, and density?",
    "What is the solubility behavior of this molecule? In which solvents does it dissolve and which does it not?",
    "What is the chemical reactivity of this molecule? How does it interact with various reagents?",
    "Are there any common reactions that this molecule is known to undergo? Could you describe them?",
    "What is the mechanism of these reactions? Could you describe the various steps involved?",
    "Does this molecule exhibit any unique optical, electrical, or magnetic properties?",
    "Is this molecule chiral? If yes, how does its chirality influence its behavior or properties?",
    "Does this molecule form part of any important biological processes or pathways?",
    "Is this molecule synthesized industrially or in the laboratory? If yes, could you explain the process?",
    "Is this molecule found naturally? If yes, in what sources is it most commonly found?",
    "Are there any notable uses or applications for this molecule in medicine, industry, or other fields?",
    "What safety measures should be taken when handling this molecule?",
    "Are there any environmental impacts associated with the production, use, or disposal of this molecule?",
];

pub const COT_PROMPT_COUNT: usize = COT_QUESTIONS.len() + 1;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("API key variable {var} is not set")]
    AuthMissing { var: String },
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("request failed after {attempts} attempt(s): {message}")]
    NetworkFailure { attempts: usize, message: String },
    #[error("cannot write cache entry {path}: {message}")]
    CacheWriteFailure { path: PathBuf, message: String },
    #[error("found {found} number(s), needed {needed}")]
    TooFewNumbers { found: usize, needed: usize },
    #[error("prediction vector: expected length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

impl LlmError {
    /// True for faults in the transport rather than in configuration.
    pub fn is_transport(&self) -> bool {
        matches!(self, LlmError::NetworkFailure { .. })
    }
}

/// Every prompt after the first repeats the molecule so each request stands
/// on its own.
pub fn build_cot_prompts(smiles: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(COT_PROMPT_COUNT);
    out.push(format!(
        "What is the molecular structure of this organic molecule in SMILES notation \"{smiles}\". Could you describe its atoms, bonds, functional groups, and overall arrangement?"
    ));
    out.extend(COT_QUESTIONS.iter().map(|q| format!("{q} (SMILES: \"{smiles}\")")));
    out
}

/// `%g`-style formatting with six significant digits.
pub fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string().to_lowercase();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), exp.abs())
    } else {
        trim_zeros(&format!("{v:.*}", (5 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn format_vector(v: &[f64]) -> String {
    v.iter().map(|x| format_value(*x)).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Cot,
    Icl,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::Cot => "cot",
            PromptKind::Icl => "icl",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub text: String,
    pub demos: Vec<(String, Vec<f64>)>,
    /// Demos removed to fit the character budget.
    pub dropped: usize,
}

impl PromptBundle {
    pub fn cot(text: impl Into<String>) -> Self {
        Self {
            kind: PromptKind::Cot,
            text: text.into(),
            demos: Vec::new(),
            dropped: 0,
        }
    }

    pub fn demo_count(&self) -> usize {
        self.demos.len()
    }

    pub fn cache_key(&self, cfg: &ProviderConfig) -> String {
        cache_key(&cfg.provider.to_string(), &cfg.model, &self.text)
    }
}

/// Demos are expected most-similar first; see [`build_icl_prompt_within`].
pub fn build_icl_prompt(query_smiles: &str, demos: &[(String, Vec<f64>)], instruction: &str) -> PromptBundle {
    let mut text = String::with_capacity(instruction.len() + 64 * (demos.len() + 1));
    text.push_str(instruction);
    text.push('\n');
    for (smiles, targets) in demos {
        text.push_str(smiles);
        text.push_str(" -> ");
        text.push_str(&format_vector(targets));
        text.push('\n');
    }
    text.push_str("QUERY: ");
    text.push_str(query_smiles);
    text.push_str(" ->");
    PromptBundle {
        kind: PromptKind::Icl,
        text,
        demos: demos.to_vec(),
        dropped: 0,
    }
}

/// Like [`build_icl_prompt`], dropping demos from the end (least similar)
/// until the text fits in `budget` characters.
pub fn build_icl_prompt_within(
    query_smiles: &str,
    demos: &[(String, Vec<f64>)],
    instruction: &str,
    budget: usize,
) -> PromptBundle {
    let mut keep = demos.len();
    loop {
        let mut bundle = build_icl_prompt(query_smiles, &demos[..keep], instruction);
        if keep == 0 || bundle.text.chars().count() <= budget {
            bundle.dropped = demos.len() - keep;
            return bundle;
        }
        keep -= 1;
    }
}

/// Content hash of a request; fields are length-prefixed so distinct
/// triples never share a preimage.
pub fn cache_key(provider: &str, model: &str, text: &str) -> String {
    let mut h = Sha256::new();
    for part in [provider, model, text] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex"))
}

/// Reads `c` numbers: a leading JSON array if present, otherwise the first
/// `c` numeric tokens in reading order.
pub fn parse_predictions(text: &str, c: usize) -> Result<Vec<f64>, LlmError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        if let Some(end) = trimmed.find(']') {
            if let Ok(values) = serde_json::from_str::<Vec<f64>>(&trimmed[..=end]) {
                if values.len() >= c {
                    return Ok(values[..c].to_vec());
                }
            }
        }
    }
    let found: Vec<f64> = number_regex()
        .find_iter(text)
        .filter_map(|m| m.as_str().parse().ok())
        .take(c)
        .collect();
    if found.len() < c {
        return Err(LlmError::TooFewNumbers { found: found.len(), needed: c });
    }
    Ok(found)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Mock,
    Http,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Mock => "mock",
            ProviderKind::Http => "http",
        })
    }
}

impl FromStr for ProviderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mock" => Ok(ProviderKind::Mock),
            "http" => Ok(ProviderKind::Http),
            other => Err(format!("unknown provider {other:?} (expected mock or http)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub provider: ProviderKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout: Duration,
    /// Extra attempts after the first failure.
    pub retries: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            endpoint: None,
            model: "mock-1".into(),
            api_key_env: None,
            top_p: 1.0,
            temperature: 0.0,
            max_tokens: 512,
            timeout: Duration::from_secs(60),
            retries: 2,
        }
    }
}

/// Write-once response store: one UTF-8 file per key.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.dir.join(key)).ok()
    }

    pub fn put(&self, key: &str, text: &str) -> Result<(), LlmError> {
        let path = self.dir.join(key);
        let fail = |e: std::io::Error| LlmError::CacheWriteFailure {
            path: path.clone(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(&self.dir).map_err(fail)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(fail)?;
        tmp.write_all(text.as_bytes()).map_err(fail)?;
        tmp.persist(&path).map_err(|e| fail(e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub provider_calls: usize,
    pub cache_hits: usize,
}

pub struct LlmClient {
    cfg: ProviderConfig,
    cache: Option<ResponseCache>,
    calls: AtomicUsize,
    hits: AtomicUsize,
}

impl LlmClient {
    pub fn new(cfg: ProviderConfig, cache_dir: Option<PathBuf>) -> Self {
        Self {
            cfg,
            cache: cache_dir.map(ResponseCache::new),
            calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            provider_calls: self.calls.load(Ordering::Relaxed),
            cache_hits: self.hits.load(Ordering::Relaxed),
        }
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<String, LlmError> {
        let key = bundle.cache_key(&self.cfg);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        let text = match self.cfg.provider {
            ProviderKind::Mock => mock_complete(bundle),
            ProviderKind::Http => http_complete(&bundle.text, &self.cfg)?,
        };
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(cache) = &self.cache {
            cache.put(&key, &text)?;
        }
        Ok(text)
    }

    /// All 14 responses for one molecule, joined by [`RESPONSE_SEPARATOR`].
    pub fn describe(&self, smiles: &str) -> Result<String, LlmError> {
        let parts = build_cot_prompts(smiles)
            .into_iter()
            .map(|p| self.complete(&PromptBundle::cot(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.join(RESPONSE_SEPARATOR))
    }

    /// Describes many molecules with at most `max_in_flight` requests in
    /// flight. Results keep input order.
    pub fn describe_all(&self, smiles: &[String], max_in_flight: usize) -> Vec<Result<String, LlmError>> {
        let bundles: Vec<PromptBundle> = smiles
            .iter()
            .flat_map(|s| build_cot_prompts(s).into_iter().map(PromptBundle::cot))
            .collect();
        let mut responses = self.complete_all(&bundles, max_in_flight).into_iter();
        smiles
            .iter()
            .map(|_| {
                let parts: Result<Vec<String>, LlmError> = responses.by_ref().take(COT_PROMPT_COUNT).collect();
                parts.map(|p| p.join(RESPONSE_SEPARATOR))
            })
            .collect()
    }

    /// Completes every bundle using at most `max_in_flight` worker threads.
    /// Results keep input order.
    pub fn complete_all(&self, bundles: &[PromptBundle], max_in_flight: usize) -> Vec<Result<String, LlmError>> {
        let workers = max_in_flight.clamp(1, bundles.len().max(1));
        let next = AtomicUsize::new(0);
        let done: Vec<Vec<(usize, Result<String, LlmError>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut out = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= bundles.len() {
                                break out;
                            }
                            out.push((i, self.complete(&bundles[i])));
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("completion worker panicked")).collect()
        });
        let mut slots: Vec<Option<Result<String, LlmError>>> = (0..bundles.len()).map(|_| None).collect();
        for (i, r) in done.into_iter().flatten() {
            slots[i] = Some(r);
        }
        slots.into_iter().map(|r| r.expect("every index visited")).collect()
    }
}

/// Convenience wrapper for a single request.
pub fn complete(bundle: &PromptBundle, cfg: &ProviderConfig, cache_dir: &Path) -> Result<String, LlmError> {
    LlmClient::new(cfg.clone(), Some(cache_dir.to_path_buf())).complete(bundle)
}

fn http_complete(prompt: &str, cfg: &ProviderConfig) -> Result<String, LlmError> {
    let var = cfg
        .api_key_env
        .as_deref()
        .ok_or_else(|| LlmError::Config("http provider needs an API key variable name".into()))?;
    let key = std::env::var(var).map_err(|_| LlmError::AuthMissing { var: var.to_string() })?;
    let endpoint = cfg
        .endpoint
        .as_deref()
        .ok_or_else(|| LlmError::Config("http provider needs an endpoint".into()))?;
    let body = serde_json::json!({
        "model": cfg.model,
        "prompt": prompt,
        "top_p": cfg.top_p,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    })
    .to_string();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .http_status_as_error(true)
        .build()
        .into();
    let attempts = cfg.retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(100 * attempt as u64));
        }
        let result = agent
            .post(endpoint)
            .header("Authorization", format!("Bearer {key}"))
            .content_type("application/json")
            .send(body.as_str())
            .and_then(|resp| resp.into_body().read_to_string());
        match result {
            Ok(text) => return Ok(text),
            Err(e) => last = e.to_string(),
        }
    }
    Err(LlmError::NetworkFailure { attempts, message: last })
}

/// Deterministic offline provider.
pub fn mock_complete(bundle: &PromptBundle) -> String {
    match bundle.kind {
        PromptKind::Cot => mock_description(&bundle.text),
        PromptKind::Icl => mock_icl(&bundle.text),
    }
}

fn mock_description(prompt: &str) -> String {
    let smiles = prompt.split('"').nth(1).unwrap_or("");
    match parse_smiles(smiles) {
        Ok(g) => describe_graph(smiles, &g),
        Err(_) => format!("The string \"{smiles}\" could not be interpreted as a molecule."),
    }
}

/// Fixed layout: every element is listed, and the SMILES comes last, so a
/// count always sits at the same token position for a given element.
fn describe_graph(smiles: &str, g: &MoleculeGraph) -> String {
    let mut counts = [0usize; Element::ALL.len()];
    let mut hydrogens = 0usize;
    let mut aromatic = 0usize;
    for a in &g.atoms {
        counts[a.element.index()] += 1;
        hydrogens += a.explicit_h as usize;
        aromatic += a.aromatic as usize;
    }
    let ring_bonds = g.bonds.iter().filter(|b| b.in_ring).count();
    let multiple = g
        .bonds
        .iter()
        .filter(|b| matches!(b.order, BondOrder::Double | BondOrder::Triple))
        .count();
    let elements: Vec<String> = Element::ALL
        .iter()
        .map(|e| format!("{} {}", e.symbol(), counts[e.index()]))
        .collect();
    format!(
        "Heavy atoms: {}. Bonds: {}, {ring_bonds} in rings and {multiple} multiple. Element counts: {}. Aromatic atoms: {aromatic}. Hydrogens: {hydrogens}. Molecule: \"{smiles}\".",
        g.atom_count(),
        g.bond_count(),
        elements.join(", "),
    )
}

fn mock_icl(prompt: &str) -> String {
    let mut sums: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for line in prompt.lines() {
        if line.starts_with("QUERY:") {
            continue;
        }
        let Some((_, values)) = line.rsplit_once(" -> ") else {
            continue;
        };
        let parsed: Result<Vec<f64>, _> = values.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let Ok(parsed) = parsed else { continue };
        if sums.is_empty() {
            sums = vec![0.0; parsed.len()];
        }
        if parsed.len() != sums.len() {
            continue;
        }
        for (s, v) in sums.iter_mut().zip(&parsed) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return "No examples were provided, so no prediction can be made.".into();
    }
    sums.iter()
        .map(|s| format_value(s / n as f64))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Affine map from the `c` parsed predictions into the embedding space.
pub struct PredictionEmbeddingParams {
    /// `d x c`.
    pub w: ParamTensor,
    /// `1 x d`.
    pub bias: ParamTensor,
}

impl PredictionEmbeddingParams {
    pub fn new<R: Rng + ?Sized>(d: usize, c: usize, rng: &mut R) -> Self {
        Self {
            w: ParamTensor::xavier("icl.w", d, c, rng),
            bias: ParamTensor::zeros("icl.bias", 1, d),
        }
    }

    pub fn width(&self) -> usize {
        self.w.value.rows()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.w, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w, &mut self.bias]
    }

    pub fn backward(&mut self, h_pred: &[f64], d_out: &[f64]) {
        self.w.grad.add_outer(d_out, h_pred);
        for (g, d) in self.bias.grad.as_mut_slice().iter_mut().zip(d_out) {
            *g += d;
        }
    }
}

pub fn encode_prediction(h_pred: &[f64], params: &PredictionEmbeddingParams) -> Result<Vec<f64>, LlmError> {
    let c = params.w.value.cols();
    if h_pred.len() != c {
        return Err(LlmError::ShapeMismatch { expected: c, got: h_pred.len() });
    }
    let mut out = params.w.value.matvec(h_pred);
    for (o, b) in out.iter_mut().zip(params.bias.value.as_slice()) {
        *o += b;
    }
    Ok(out)
}

/// Zero-weight helper used by ablations and tests.
pub fn zero_prediction_params(d: usize, c: usize) -> PredictionEmbeddingParams {
    PredictionEmbeddingParams {
        w: ParamTensor::new("icl.w", Matrix::zeros(d, c)),
        bias: ParamTensor::zeros("icl.bias", 1, d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn cot_prompts() {
        let p = build_cot_prompts("CC(=O)C");
        assert_eq!(p.len(), 14);
        assert!(p[0].starts_with("What is the molecular structure"));
        assert!(p[0].contains("\"CC(=O)C\""));
        assert!(p[12].contains("safety measures"));
        assert!(p.iter().all(|q| q.contains("CC(=O)C")));
    }

    #[test]
    fn icl_prompt_layout() {
        let none = build_icl_prompt("CCO", &[], "Predict.");
        assert_eq!(none.text, "Predict.\nQUERY: CCO ->");
        let demos = vec![("CC".to_string(), vec![1.5, -2.0]), ("CN".to_string(), vec![0.1234567, 1e-7])];
        let two = build_icl_prompt("CCO", &demos, DEFAULT_INSTRUCTION);
        let lines: Vec<&str> = two.text.lines().collect();
        assert_eq!(lines, vec![DEFAULT_INSTRUCTION, "CC -> 1.5,-2", "CN -> 0.123457,1e-07", "QUERY: CCO ->"]);
        assert_eq!(two.demo_count(), 2);
        assert_eq!(two, build_icl_prompt("CCO", &demos, DEFAULT_INSTRUCTION));
    }

    #[test]
    fn budget_drops_trailing_demos() {
        let demos: Vec<(String, Vec<f64>)> = (0..10).map(|i| (format!("C{}", "C".repeat(i)), vec![i as f64])).collect();
        let full = build_icl_prompt("O", &demos, "I");
        let b = build_icl_prompt_within("O", &demos, "I", full.text.len() - 1);
        assert_eq!(b.dropped, 1);
        assert_eq!(b.demos, demos[..9].to_vec());
        let tiny = build_icl_prompt_within("O", &demos, "I", 1);
        assert_eq!((tiny.demo_count(), tiny.dropped), (0, 10));
    }

    #[test]
    fn value_formatting() {
        let cases = [
            (0.0, "0"),
            (2.0, "2"),
            (-2.5, "-2.5"),
            (0.1234567, "0.123457"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (999999.5, "1e+06"),
        ];
        for (v, s) in cases {
            assert_eq!(format_value(v), s, "{v}");
        }
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(v in proptest::num::f64::NORMAL) {
            let back = parse_predictions(&format_value(v), 1).unwrap()[0];
            let rel = ((back - v) / v).abs();
            prop_assert!(rel <= 5e-6, "{} -> {} ({})", v, back, format_value(v));
        }
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_predictions("[0.12, -3.4]", 2).unwrap(), vec![0.12, -3.4]);
        assert_eq!(parse_predictions("the values are 1.0 and 2.0 approximately", 2).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(parse_predictions("no idea", 1), Err(LlmError::TooFewNumbers { found: 0, needed: 1 })));
        assert_eq!(parse_predictions("[1, 2, 3] trailing 9", 2).unwrap(), vec![1.0, 2.0]);
        assert_eq!(parse_predictions("[1] then 2", 2).unwrap(), vec![1.0, 2.0]);
        assert_eq!(parse_predictions("2, 3", 2).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn mock_icl_mean() {
        let demos = vec![("CC".to_string(), vec![1.0, 2.0]), ("CO".to_string(), vec![3.0, 4.0])];
        let b = build_icl_prompt("CCC", &demos, DEFAULT_INSTRUCTION);
        assert_eq!(mock_complete(&b), "2, 3");
        assert!(parse_predictions(&mock_complete(&build_icl_prompt("C", &[], "I")), 1).is_err());
    }

    #[test]
    fn mock_description_counts() {
        let b = PromptBundle::cot(build_cot_prompts("CC(=O)C").remove(0));
        let text = mock_complete(&b);
        assert!(text.starts_with("Heavy atoms: 4. Bonds: 3,"), "{text}");
        assert!(text.contains("B 0, C 3, N 0, O 1, F 0"), "{text}");
        assert!(text.contains("Hydrogens: 6"), "{text}");
    }

    #[test]
    fn cache_keys_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = HashSet::new();
        for _ in 0..100_000 {
            let len = rng.gen_range(1..24);
            let text: String = (0..len).map(|_| rng.gen_range(b'!'..=b'~') as char).collect();
            seen.insert((text.clone(), cache_key("mock", "m", &text)));
        }
        let keys: HashSet<&String> = seen.iter().map(|(_, k)| k).collect();
        assert_eq!(keys.len(), seen.len());
        assert_ne!(cache_key("ab", "c", "x"), cache_key("a", "bc", "x"));
    }

    #[test]
    fn prediction_embedding() {
        let zero = zero_prediction_params(4, 2);
        assert_eq!(encode_prediction(&[1.0, 2.0], &zero).unwrap(), vec![0.0; 4]);

        let mut p = zero_prediction_params(3, 1);
        p.w.value[(0, 0)] = 2.0;
        p.bias.value = Matrix::row_vector(&[0.1, 0.2, 0.3]);
        assert_eq!(encode_prediction(&[3.0], &p).unwrap(), vec![6.1, 0.2, 0.3]);
        assert!(matches!(encode_prediction(&[1.0, 2.0], &p), Err(LlmError::ShapeMismatch { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PredictionEmbeddingParams::new(4, 2, &mut rng);
        p.bias.value = Matrix::xavier_uniform(1, 4, &mut rng);
        let (a, b) = ([0.3, -1.0], [2.0, 0.5]);
        let sum = encode_prediction(&[a[0] + b[0], a[1] + b[1]], &p).unwrap();
        let ea = encode_prediction(&a, &p).unwrap();
        let eb = encode_prediction(&b, &p).unwrap();
        for i in 0..4 {
            assert!((sum[i] - (ea[i] + eb[i] - p.bias.value.as_slice()[i])).abs() < 1e-14);
        }
    }
}
