//! Random small molecules and synthetic labelled sets for tests and
//! self-checks.

use crate::molgraph::{parse_smiles, Element};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashSet;

const ELEMENTS: [(&str, u8, f64); 3] = [("C", 4, 0.6), ("N", 3, 0.2), ("O", 2, 0.2)];

struct Draft {
    symbols: Vec<&'static str>,
    spare: Vec<u8>,
    children: Vec<Vec<(usize, bool)>>,
    rings: Vec<Vec<(usize, u32)>>,
}

/// A random valid SMILES over C, N and O with 1..=`max_atoms` heavy atoms,
/// possibly with one ring closure and some double bonds.
pub fn random_smiles<R: Rng + ?Sized>(rng: &mut R, max_atoms: usize) -> String {
    let n = rng.gen_range(1..=max_atoms.max(1));
    let mut d = Draft {
        symbols: Vec::with_capacity(n),
        spare: Vec::with_capacity(n),
        children: vec![Vec::new(); n],
        rings: vec![Vec::new(); n],
    };
    let mut parent = vec![usize::MAX; n];
    for i in 0..n {
        let (sym, val, _) = *ELEMENTS
            .choose_weighted(rng, |e| e.2)
            .expect("non-empty weights");
        d.symbols.push(sym);
        d.spare.push(val);
        if i > 0 {
            let open: Vec<usize> = (0..i).filter(|&j| d.spare[j] > 0).collect();
            let p = *open.choose(rng).expect("a tree leaf always has spare valence");
            parent[i] = p;
            d.spare[p] -= 1;
            d.spare[i] -= 1;
            d.children[p].push((i, false));
        }
    }
    if n >= 3 && rng.gen_bool(0.5) {
        let candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| parent[b] != a && parent[a] != b && d.spare[a] > 0 && d.spare[b] > 0)
            .collect();
        if let Some(&(a, b)) = candidates.choose(rng) {
            d.spare[a] -= 1;
            d.spare[b] -= 1;
            d.rings[a].push((b, 1));
            d.rings[b].push((a, 1));
        }
    }
    for p in 0..n {
        for k in 0..d.children[p].len() {
            let c = d.children[p][k].0;
            if d.spare[p] > 0 && d.spare[c] > 0 && rng.gen_bool(0.2) {
                d.spare[p] -= 1;
                d.spare[c] -= 1;
                d.children[p][k].1 = true;
            }
        }
    }
    let mut out = String::new();
    write_atom(&d, 0, &mut out);
    out
}

fn write_atom(d: &Draft, i: usize, out: &mut String) {
    out.push_str(d.symbols[i]);
    for &(_, label) in &d.rings[i] {
        out.push_str(&label.to_string());
    }
    let kids = &d.children[i];
    for (k, &(c, double)) in kids.iter().enumerate() {
        let last = k + 1 == kids.len();
        if !last {
            out.push('(');
        }
        if double {
            out.push('=');
        }
        write_atom(d, c, out);
        if !last {
            out.push(')');
        }
    }
}

/// Heavy-atom counts of C, N and O.
pub fn atom_counts(smiles: &str) -> Option<[usize; 3]> {
    let g = parse_smiles(smiles).ok()?;
    let mut c = [0usize; 3];
    for a in &g.atoms {
        match a.element {
            Element::C => c[0] += 1,
            Element::N => c[1] += 1,
            Element::O => c[2] += 1,
            _ => {}
        }
    }
    Some(c)
}

pub const AFFINE_INTERCEPT: f64 = 0.5;
pub const AFFINE_WEIGHTS: [f64; 3] = [1.0, 2.0, -1.5];

/// `n` distinct molecules whose single target is an affine function of the
/// C/N/O counts plus Gaussian noise of standard deviation `noise`.
pub fn affine_dataset(n: usize, max_atoms: usize, noise: f64, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).expect("finite noise level");
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        assert!(attempts < 1000 * (n + 1), "cannot draw {n} distinct molecules of at most {max_atoms} atoms");
        let s = random_smiles(&mut rng, max_atoms);
        if !seen.insert(s.clone()) {
            continue;
        }
        let counts = atom_counts(&s).expect("generator emits valid SMILES");
        let y = AFFINE_INTERCEPT
            + counts.iter().zip(AFFINE_WEIGHTS).map(|(c, w)| *c as f64 * w).sum::<f64>()
            + normal.sample(&mut rng);
        out.push((s, vec![y]));
    }
    out
}

/// Renders records as CSV with header `smiles,<names...>`.
pub fn to_csv(records: &[(String, Vec<f64>)], names: &[&str]) -> String {
    let mut s = String::from("smiles");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (smiles, t) in records {
        s.push_str(smiles);
        for v in t {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}
