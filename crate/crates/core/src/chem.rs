//! Circular fingerprints, Tanimoto similarity, ring-skeleton scaffold keys and
//! the demonstration samplers that feed few-shot prompts.

use crate::molgraph::{BondOrder, MoleculeGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_RADIUS: u32 = 2;
pub const DEFAULT_NBITS: usize = 2048;

const HASH_SEED: u64 = 0x6d6f_6c66_7573_696f;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChemError {
    #[error("fingerprint length must be positive")]
    ZeroBits,
    #[error("fingerprint length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot fingerprint an empty graph")]
    EmptyGraph,
    #[error("requested {requested} demonstrations but only {available} are eligible")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("class {class} needs {needed} demonstrations but only {available} are eligible")]
    ClassExhausted {
        class: u8,
        needed: usize,
        available: usize,
    },
}

/// Fixed-length bit vector fingerprint.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitFingerprint {
    words: Vec<u64>,
    nbits: usize,
    radius: u32,
}

impl BitFingerprint {
    pub fn new(nbits: usize, radius: u32) -> Result<Self, ChemError> {
        if nbits == 0 {
            return Err(ChemError::ZeroBits);
        }
        Ok(Self {
            words: vec![0; nbits.div_ceil(64)],
            nbits,
            radius,
        })
    }

    /// Builds a fingerprint with the given bit indices set (taken modulo `nbits`).
    pub fn from_bits(nbits: usize, bits: impl IntoIterator<Item = usize>) -> Result<Self, ChemError> {
        let mut fp = Self::new(nbits, 0)?;
        for b in bits {
            fp.set(b % nbits);
        }
        Ok(fp)
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] & (1 << (bit % 64)) != 0
    }

    pub fn popcount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn set_bits(&self) -> Vec<usize> {
        (0..self.nbits).filter(|&b| self.get(b)).collect()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Platform-independent 64-bit hash of a word sequence.
pub fn stable_hash(words: &[u64]) -> u64 {
    let mut h = splitmix64(HASH_SEED ^ words.len() as u64);
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

fn initial_invariants(graph: &MoleculeGraph) -> Vec<u64> {
    graph
        .atoms
        .iter()
        .map(|a| {
            stable_hash(&[
                a.element.index() as u64,
                a.degree as u64,
                (a.formal_charge as i64) as u64,
                a.explicit_h as u64,
                a.aromatic as u64,
            ])
        })
        .collect()
}

/// One refinement round: each atom hashes its own invariant with the sorted
/// (bond order, neighbor invariant) pairs.
fn refine(graph: &MoleculeGraph, nbrs: &[Vec<(usize, usize)>], inv: &[u64]) -> Vec<u64> {
    (0..inv.len())
        .map(|v| {
            let mut pairs: Vec<(u64, u64)> = nbrs[v]
                .iter()
                .map(|&(u, k)| (graph.bonds[k].order.index() as u64, inv[u]))
                .collect();
            pairs.sort_unstable();
            let mut words = Vec::with_capacity(1 + 2 * pairs.len());
            words.push(inv[v]);
            for (o, n) in pairs {
                words.push(o);
                words.push(n);
            }
            stable_hash(&words)
        })
        .collect()
}

/// Morgan-style circular fingerprint.
pub fn morgan_fingerprint(
    graph: &MoleculeGraph,
    radius: u32,
    nbits: usize,
) -> Result<BitFingerprint, ChemError> {
    let mut fp = BitFingerprint::new(nbits, radius)?;
    if graph.atoms.is_empty() {
        return Err(ChemError::EmptyGraph);
    }
    let nbrs = graph.neighbors();
    let mut inv = initial_invariants(graph);
    for r in 0..=radius {
        if r > 0 {
            inv = refine(graph, &nbrs, &inv);
        }
        for &h in &inv {
            fp.set((h % nbits as u64) as usize);
        }
    }
    Ok(fp)
}

/// `|a & b| / |a | b|`, with two empty fingerprints defined as identical.
pub fn tanimoto(a: &BitFingerprint, b: &BitFingerprint) -> Result<f64, ChemError> {
    if a.nbits != b.nbits {
        return Err(ChemError::LengthMismatch(a.nbits, b.nbits));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Canonical key of a molecule's ring-and-linker skeleton. Empty for acyclic
/// molecules.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScaffoldKey(pub String);

impl ScaffoldKey {
    pub fn is_acyclic(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn murcko_scaffold(graph: &MoleculeGraph) -> ScaffoldKey {
    let n = graph.atom_count();
    let mut in_ring = vec![false; n];
    for b in &graph.bonds {
        if b.in_ring {
            in_ring[b.begin] = true;
            in_ring[b.end] = true;
        }
    }
    if !in_ring.iter().any(|&r| r) {
        return ScaffoldKey(String::new());
    }

    let nbrs = graph.neighbors();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = nbrs.iter().map(Vec::len).collect();
    loop {
        let prune: Vec<usize> = (0..n)
            .filter(|&v| alive[v] && !in_ring[v] && degree[v] <= 1)
            .collect();
        if prune.is_empty() {
            break;
        }
        for v in prune {
            alive[v] = false;
            for &(u, _) in &nbrs[v] {
                if alive[u] {
                    degree[u] -= 1;
                }
            }
        }
    }

    let kept_bonds: Vec<usize> = (0..graph.bonds.len())
        .filter(|&k| alive[graph.bonds[k].begin] && alive[graph.bonds[k].end])
        .collect();
    let sub_nbrs: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|v| nbrs[v].iter().copied().filter(|&(u, _)| alive[v] && alive[u]).collect())
        .collect();

    let mut atom_desc: Vec<String> = (0..n)
        .filter(|&v| alive[v])
        .map(|v| {
            let a = &graph.atoms[v];
            let mut orders: Vec<usize> = sub_nbrs[v]
                .iter()
                .map(|&(_, k)| graph.bonds[k].order.index())
                .collect();
            orders.sort_unstable();
            let orders: Vec<String> = orders.iter().map(usize::to_string).collect();
            format!(
                "{}{}[{}]",
                a.element.symbol(),
                if a.aromatic { "a" } else { "" },
                orders.join("")
            )
        })
        .collect();
    atom_desc.sort();

    let mut bond_desc: Vec<String> = kept_bonds
        .iter()
        .map(|&k| {
            let b = &graph.bonds[k];
            let mut pair = [graph.atoms[b.begin].element.symbol(), graph.atoms[b.end].element.symbol()];
            pair.sort();
            format!("{}{}{}", pair[0], bond_symbol(b.order), pair[1])
        })
        .collect();
    bond_desc.sort();

    let mut ring_sizes: Vec<usize> = kept_bonds
        .iter()
        .filter(|&&k| graph.bonds[k].in_ring)
        .filter_map(|&k| smallest_cycle_through(&sub_nbrs, k, graph.bonds[k].begin, graph.bonds[k].end))
        .collect();
    ring_sizes.sort_unstable();
    let ring_sizes: Vec<String> = ring_sizes.iter().map(usize::to_string).collect();

    // Weisfeiler-Lehman style digest of the skeleton for extra discrimination.
    let base: Vec<u64> = (0..n)
        .map(|v| {
            let a = &graph.atoms[v];
            stable_hash(&[a.element.index() as u64, a.aromatic as u64, sub_nbrs[v].len() as u64])
        })
        .collect();
    let mut inv = base;
    for _ in 0..3 {
        inv = (0..n)
            .map(|v| {
                let mut pairs: Vec<(u64, u64)> = sub_nbrs[v]
                    .iter()
                    .map(|&(u, k)| (graph.bonds[k].order.index() as u64, inv[u]))
                    .collect();
                pairs.sort_unstable();
                let mut words = vec![inv[v]];
                words.extend(pairs.into_iter().flat_map(|(o, h)| [o, h]));
                stable_hash(&words)
            })
            .collect();
    }
    let mut alive_inv: Vec<u64> = (0..n).filter(|&v| alive[v]).map(|v| inv[v]).collect();
    alive_inv.sort_unstable();

    ScaffoldKey(format!(
        "{};{};{};{:016x}",
        atom_desc.join(","),
        bond_desc.join(","),
        ring_sizes.join(","),
        stable_hash(&alive_inv)
    ))
}

fn bond_symbol(order: BondOrder) -> &'static str {
    match order {
        BondOrder::Single => "-",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic => ":",
    }
}

/// Length of the shortest cycle containing bond `skip` (BFS without it).
fn smallest_cycle_through(
    nbrs: &[Vec<(usize, usize)>],
    skip: usize,
    from: usize,
    to: usize,
) -> Option<usize> {
    let mut dist = vec![usize::MAX; nbrs.len()];
    let mut queue = std::collections::VecDeque::from([from]);
    dist[from] = 0;
    while let Some(v) = queue.pop_front() {
        if v == to {
            return Some(dist[v] + 1);
        }
        for &(u, k) in &nbrs[v] {
            if k != skip && dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    None
}

/// A labeled molecule available as a few-shot demonstration.
#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub smiles: String,
    pub targets: Vec<f64>,
    pub fingerprint: BitFingerprint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub pool_index: usize,
    pub smiles: String,
    pub targets: Vec<f64>,
    pub similarity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingStrategy {
    Random,
    Scaffold,
    /// Scaffold ranking under a 3:2 majority-to-minority class quota.
    Balanced,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "scaffold" => Ok(Self::Scaffold),
            "balanced" => Ok(Self::Balanced),
            other => Err(format!("unknown sampling strategy '{other}'")),
        }
    }
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Scaffold => "scaffold",
            Self::Balanced => "balanced",
        })
    }
}

fn ranked(query: &BitFingerprint, query_smiles: &str, pool: &[PoolEntry]) -> Result<Vec<Demo>, ChemError> {
    let mut out = Vec::with_capacity(pool.len());
    for (i, e) in pool.iter().enumerate() {
        if e.smiles == query_smiles {
            continue;
        }
        out.push(Demo {
            pool_index: i,
            smiles: e.smiles.clone(),
            targets: e.targets.clone(),
            similarity: tanimoto(query, &e.fingerprint)?,
        });
    }
    // stable sort keeps ascending pool index among equal similarities
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    Ok(out)
}

/// Picks `k` demonstrations for a query. Entries whose SMILES string equals the
/// query's are never returned.
pub fn sample_demos(
    query_smiles: &str,
    query: &BitFingerprint,
    pool: &[PoolEntry],
    k: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<Vec<Demo>, ChemError> {
    match strategy {
        SamplingStrategy::Scaffold => {
            let mut ranked = ranked(query, query_smiles, pool)?;
            if k > ranked.len() {
                return Err(ChemError::PoolTooSmall {
                    requested: k,
                    available: ranked.len(),
                });
            }
            ranked.truncate(k);
            Ok(ranked)
        }
        SamplingStrategy::Random => {
            let eligible: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].smiles != query_smiles).collect();
            if k > eligible.len() {
                return Err(ChemError::PoolTooSmall {
                    requested: k,
                    available: eligible.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, eligible.len(), k)
                .into_iter()
                .map(|j| {
                    let i = eligible[j];
                    Ok(Demo {
                        pool_index: i,
                        smiles: pool[i].smiles.clone(),
                        targets: pool[i].targets.clone(),
                        similarity: tanimoto(query, &pool[i].fingerprint)?,
                    })
                })
                .collect()
        }
        SamplingStrategy::Balanced => balanced_sample_demos(query_smiles, query, pool, k),
    }
}

/// Number of majority-class demonstrations out of `k` under the 3:2 quota.
pub fn majority_quota(k: usize) -> usize {
    (3.0 * k as f64 / 5.0).round() as usize
}

/// Most-similar demonstrations with exactly `round(3k/5)` drawn from the
/// majority class. The class label is the first target (>= 0.5 is class 1).
pub fn balanced_sample_demos(
    query_smiles: &str,
    query: &BitFingerprint,
    pool: &[PoolEntry],
    k: usize,
) -> Result<Vec<Demo>, ChemError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let ranked = ranked(query, query_smiles, pool)?;
    let class_of = |d: &Demo| u8::from(d.targets.first().copied().unwrap_or(0.0) >= 0.5);
    let mut by_class: BTreeMap<u8, Vec<Demo>> = BTreeMap::from([(0, Vec::new()), (1, Vec::new())]);
    for d in ranked {
        by_class.entry(class_of(&d)).or_default().push(d);
    }
    let (n0, n1) = (by_class[&0].len(), by_class[&1].len());
    let majority: u8 = if n1 > n0 { 1 } else { 0 };
    let minority = 1 - majority;
    let need_major = majority_quota(k);
    let need_minor = k - need_major;
    for (class, need) in [(majority, need_major), (minority, need_minor)] {
        let available = by_class[&class].len();
        if need > available {
            return Err(ChemError::ClassExhausted {
                class,
                needed: need,
                available,
            });
        }
    }
    let mut out: Vec<Demo> = by_class.remove(&majority).unwrap().into_iter().take(need_major).collect();
    out.extend(by_class.remove(&minority).unwrap().into_iter().take(need_minor));
    out.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.pool_index.cmp(&b.pool_index))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;
    use proptest::prelude::*;

    fn fp(s: &str) -> BitFingerprint {
        morgan_fingerprint(&parse_smiles(s).unwrap(), DEFAULT_RADIUS, DEFAULT_NBITS).unwrap()
    }

    fn entry(s: &str, t: &[f64]) -> PoolEntry {
        PoolEntry {
            smiles: s.into(),
            targets: t.to_vec(),
            fingerprint: fp(s),
        }
    }

    #[test]
    fn fingerprint_determinism_and_isomorphism() {
        assert_eq!(fp("CC(=O)O"), fp("CC(=O)O"));
        assert_eq!(fp("CCO"), fp("OCC"));
        assert_eq!(fp("c1ccccc1O"), fp("Oc1ccccc1"));
        let c = fp("C");
        let o = fp("O");
        assert!(c.set_bits() != o.set_bits());
        assert!(c.popcount() >= 1 && c.popcount() <= 3);
    }

    #[test]
    fn fingerprint_zero_bits() {
        let g = parse_smiles("C").unwrap();
        assert_eq!(morgan_fingerprint(&g, 2, 0), Err(ChemError::ZeroBits));
    }

    #[test]
    fn radius_zero_depends_on_initial_invariant_multiset() {
        // propanol isomers share the multiset of atom environments at radius 0
        let a = parse_smiles("CCCO").unwrap();
        let b = parse_smiles("OCCC").unwrap();
        assert_eq!(morgan_fingerprint(&a, 0, 1024), morgan_fingerprint(&b, 0, 1024));
        // different multiset: isopropanol has a degree-3 carbon
        let c = parse_smiles("CC(C)O").unwrap();
        assert_ne!(morgan_fingerprint(&a, 0, 1024), morgan_fingerprint(&c, 0, 1024));
    }

    #[test]
    fn tanimoto_examples() {
        let a = BitFingerprint::from_bits(16, [1, 2, 3]).unwrap();
        let b = BitFingerprint::from_bits(16, [2, 3, 4]).unwrap();
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.5);
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        let c = BitFingerprint::from_bits(16, [7, 8]).unwrap();
        assert_eq!(tanimoto(&a, &c).unwrap(), 0.0);
        let e = BitFingerprint::new(16, 0).unwrap();
        assert_eq!(tanimoto(&e, &e).unwrap(), 1.0);
        let long = BitFingerprint::new(32, 0).unwrap();
        assert_eq!(tanimoto(&a, &long), Err(ChemError::LengthMismatch(16, 32)));
    }

    proptest! {
        #[test]
        fn tanimoto_symmetric_bounded(
            a in prop::collection::vec(0usize..128, 0..40),
            b in prop::collection::vec(0usize..128, 0..40),
        ) {
            let fa = BitFingerprint::from_bits(128, a).unwrap();
            let fb = BitFingerprint::from_bits(128, b).unwrap();
            let ab = tanimoto(&fa, &fb).unwrap();
            prop_assert_eq!(ab, tanimoto(&fb, &fa).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(tanimoto(&fa, &fa).unwrap(), 1.0);
        }
    }

    #[test]
    fn scaffold_examples() {
        let key = |s: &str| murcko_scaffold(&parse_smiles(s).unwrap());
        assert!(key("CCCC").is_acyclic());
        assert_eq!(key("C1CC1"), key("CC1CC1"));
        assert!(!key("C1CC1").is_acyclic());
        assert_ne!(key("c1ccccc1"), key("C1CCCCC1"));
        // linker between rings is kept, side chains are not
        assert_eq!(key("c1ccccc1CCc1ccccc1"), key("CCc1ccc(CCc2ccccc2)cc1"));
        assert_ne!(key("c1ccccc1Cc1ccccc1"), key("c1ccccc1CCc1ccccc1"));
        assert_eq!(key("OC1CCCC1"), key("C1CCCC1N"));
        // spelling invariance
        assert_eq!(key("C1CCC(CC1)c1ccncc1"), key("c1cc(ccn1)C1CCCCC1"));
    }

    #[test]
    fn scaffold_sampler_excludes_query_and_sorts() {
        let pool = vec![
            entry("CCO", &[1.0]),
            entry("OCC", &[2.0]),
            entry("CCCC", &[3.0]),
            entry("c1ccccc1", &[4.0]),
        ];
        let q = fp("CCO");
        let demos = sample_demos("CCO", &q, &pool, 3, SamplingStrategy::Scaffold, 0).unwrap();
        assert_eq!(demos[0].smiles, "OCC");
        assert_eq!(demos[0].similarity, 1.0);
        assert!(demos.iter().all(|d| d.smiles != "CCO"));
        assert!(demos.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert_eq!(
            sample_demos("CCO", &q, &pool, 4, SamplingStrategy::Scaffold, 0),
            Err(ChemError::PoolTooSmall { requested: 4, available: 3 })
        );
    }

    #[test]
    fn random_sampler_is_seeded() {
        let pool: Vec<PoolEntry> = ["C", "CC", "CCC", "CCCC", "CCCCC", "CO", "CN"]
            .iter()
            .map(|s| entry(s, &[0.0]))
            .collect();
        let q = fp("CCO");
        let a = sample_demos("CCO", &q, &pool, 4, SamplingStrategy::Random, 9).unwrap();
        let b = sample_demos("CCO", &q, &pool, 4, SamplingStrategy::Random, 9).unwrap();
        assert_eq!(a, b);
        let mut idx: Vec<usize> = a.iter().map(|d| d.pool_index).collect();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 4);
    }

    #[test]
    fn balanced_sampler_quota() {
        let mut pool = Vec::new();
        for s in ["C", "CC", "CCC", "CCCC", "CCCCC", "CCCCCC", "CO"] {
            pool.push(entry(s, &[0.0]));
        }
        for s in ["CN", "CCN", "CCCN"] {
            pool.push(entry(s, &[1.0]));
        }
        let q = fp("CCCO");
        let demos = balanced_sample_demos("CCCO", &q, &pool, 5).unwrap();
        let ones = demos.iter().filter(|d| d.targets[0] == 1.0).count();
        assert_eq!((demos.len() - ones, ones), (3, 2));
        assert!(demos.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert!(balanced_sample_demos("CCCO", &q, &pool, 0).unwrap().is_empty());
        assert_eq!(
            balanced_sample_demos("CCCO", &q, &pool, 10),
            Err(ChemError::ClassExhausted { class: 1, needed: 4, available: 3 })
        );
    }

    #[test]
    fn quota_values() {
        assert_eq!(majority_quota(5), 3);
        assert_eq!(majority_quota(16), 10);
        assert_eq!(majority_quota(4), 2);
        assert_eq!(majority_quota(1), 1);
    }
}
