//! SMILES parsing into heavy-atom molecular graphs, the fixed feature schema,
//! and the self-loop normalized adjacency operator consumed by the graph
//! encoder.
//!
//! Supported input: organic-subset atoms, bracket atoms with isotope,
//! chirality, explicit H count, charge and atom class, branches, ring closures
//! (`1`-`9` and `%nn`), bond symbols `-`, `=`, `#`, `:`, `/`, `\` and `.`
//! fragment separators. Stereo markers and isotopes are read and discarded.
//! Hydrogens never become nodes; they are folded into per-atom counts.

use crate::numerics::Matrix;
use thiserror::Error;

/// Width of a node feature row.
pub const NODE_FEATURES: usize = 28;
/// Width of an edge feature row.
pub const EDGE_FEATURES: usize = 5;

const DEGREE_SLOTS: usize = 6;
const CHARGE_SLOTS: usize = 5;
const HCOUNT_SLOTS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmilesError {
    #[error("empty SMILES input")]
    EmptyInput,
    #[error("non-ASCII character at position {pos}")]
    NonAscii { pos: usize },
    #[error("unbalanced bracket at position {pos}")]
    UnbalancedBracket { pos: usize },
    #[error("unclosed branch opened at position {pos}")]
    UnclosedBranch { pos: usize },
    #[error("ring bond {label} opened at position {pos} is never closed")]
    UnclosedRing { pos: usize, label: u32 },
    #[error("unknown atom symbol '{symbol}' at position {pos}")]
    UnknownAtomSymbol { pos: usize, symbol: String },
    #[error("unexpected character '{ch}' at position {pos}")]
    UnexpectedChar { pos: usize, ch: char },
    #[error("bond symbol at position {pos} is not followed by an atom")]
    DanglingBond { pos: usize },
    #[error("ring closure at position {pos} bonds an atom to itself or repeats an existing bond")]
    InvalidRingBond { pos: usize },
}

/// Element categories of the node feature schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    B,
    C,
    N,
    O,
    F,
    P,
    S,
    Cl,
    Br,
    I,
    Other,
}

impl Element {
    pub const ALL: [Element; 11] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::P,
        Element::S,
        Element::Cl,
        Element::Br,
        Element::I,
        Element::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
            Element::Other => "*",
        }
    }

    fn from_symbol(sym: &str) -> Element {
        match sym {
            "B" => Element::B,
            "C" => Element::C,
            "N" => Element::N,
            "O" => Element::O,
            "F" => Element::F,
            "P" => Element::P,
            "S" => Element::S,
            "Cl" => Element::Cl,
            "Br" => Element::Br,
            "I" => Element::I,
            _ => Element::Other,
        }
    }

    /// Allowed valences for implicit-hydrogen assignment, ascending.
    fn default_valences(self) -> &'static [u32] {
        match self {
            Element::B => &[3],
            Element::C => &[4],
            Element::N => &[3, 5],
            Element::O => &[2],
            Element::P => &[3, 5],
            Element::S => &[2, 4, 6],
            Element::F | Element::Cl | Element::Br | Element::I => &[1],
            Element::Other => &[],
        }
    }
}

#[rustfmt::skip]
const ELEMENT_SYMBOLS: &[&str] = &[
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

const AROMATIC_BRACKET: &[&str] = &["se", "as", "te", "b", "c", "n", "o", "p", "s"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Contribution to an atom's valence sum (aromatic counted as 1, with the
    /// extra pi electron handled per atom).
    fn valence(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AtomRecord {
    pub element: Element,
    pub aromatic: bool,
    /// Clamped to [-2, 2].
    pub formal_charge: i8,
    /// Total attached hydrogens (implicit or written).
    pub explicit_h: u8,
    pub degree: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondRecord {
    pub begin: usize,
    pub end: usize,
    pub order: BondOrder,
    pub in_ring: bool,
}

impl BondRecord {
    pub fn other(&self, atom: usize) -> usize {
        if self.begin == atom {
            self.end
        } else {
            self.begin
        }
    }
}

/// A featurized heavy-atom molecular graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeGraph {
    pub atoms: Vec<AtomRecord>,
    pub bonds: Vec<BondRecord>,
    /// Binary, symmetric, zero diagonal.
    pub adjacency: Matrix,
    pub node_features: Matrix,
    pub edge_features: Matrix,
}

impl MoleculeGraph {
    /// Assembles a graph from atom and bond lists, recomputing degrees, ring
    /// membership, adjacency and features.
    pub fn from_parts(mut atoms: Vec<AtomRecord>, mut bonds: Vec<BondRecord>) -> Self {
        let n = atoms.len();
        let mut adjacency = Matrix::zeros(n, n);
        for a in atoms.iter_mut() {
            a.degree = 0;
        }
        for b in &bonds {
            adjacency[(b.begin, b.end)] = 1.0;
            adjacency[(b.end, b.begin)] = 1.0;
            atoms[b.begin].degree += 1;
            atoms[b.end].degree += 1;
        }
        let ring = ring_bonds(n, &bonds);
        for (b, r) in bonds.iter_mut().zip(ring) {
            b.in_ring = r;
        }
        let mut g = MoleculeGraph {
            atoms,
            bonds,
            adjacency,
            node_features: Matrix::zeros(0, NODE_FEATURES),
            edge_features: Matrix::zeros(0, EDGE_FEATURES),
        };
        let (nf, ef) = featurize(&g);
        g.node_features = nf;
        g.edge_features = ef;
        g
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    /// Neighbor list `(neighbor, bond index)` per atom.
    pub fn neighbors(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (k, b) in self.bonds.iter().enumerate() {
            adj[b.begin].push((b.end, k));
            adj[b.end].push((b.begin, k));
        }
        adj
    }

    /// Applies a node relabelling: atom `i` of `self` becomes atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MoleculeGraph {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = self.atoms.clone();
        for (i, a) in self.atoms.iter().enumerate() {
            atoms[perm[i]] = a.clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| BondRecord {
                begin: perm[b.begin],
                end: perm[b.end],
                ..b.clone()
            })
            .collect();
        MoleculeGraph::from_parts(atoms, bonds)
    }
}

/// The operator `D^-1/2 (A + S) D^-1/2` where `S` puts a self-loop of weight
/// `max(deg, 1)` on every atom and `D` is the degree matrix of `A + S`.
/// `A + S` is diagonally dominant, so the spectrum lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralOperator {
    pub matrix: Matrix,
}

impl SpectralOperator {
    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn permuted(&self, perm: &[usize]) -> SpectralOperator {
        let n = self.size();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(perm[i], perm[j])] = self.matrix[(i, j)];
            }
        }
        SpectralOperator { matrix: m }
    }
}

/// Parses a SMILES string into a featurized graph.
pub fn parse_smiles(text: &str) -> Result<MoleculeGraph, SmilesError> {
    Parser::new(text)?.parse()
}

/// Builds the fixed-schema node and edge feature matrices.
///
/// Node row: element one-hot (11) | degree one-hot 0..=5 | aromatic flag |
/// charge one-hot -2..=2 | hydrogen-count one-hot 0..=4. Edge row: bond order
/// one-hot (single, double, triple, aromatic) | in-ring flag.
pub fn featurize(graph: &MoleculeGraph) -> (Matrix, Matrix) {
    let mut nodes = Matrix::zeros(graph.atoms.len(), NODE_FEATURES);
    for (i, a) in graph.atoms.iter().enumerate() {
        let row = nodes.row_mut(i);
        let mut off = 0;
        row[off + a.element.index()] = 1.0;
        off += Element::ALL.len();
        row[off + (a.degree as usize).min(DEGREE_SLOTS - 1)] = 1.0;
        off += DEGREE_SLOTS;
        row[off] = if a.aromatic { 1.0 } else { 0.0 };
        off += 1;
        row[off + (a.formal_charge.clamp(-2, 2) + 2) as usize] = 1.0;
        off += CHARGE_SLOTS;
        row[off + (a.explicit_h as usize).min(HCOUNT_SLOTS - 1)] = 1.0;
    }
    let mut edges = Matrix::zeros(graph.bonds.len(), EDGE_FEATURES);
    for (k, b) in graph.bonds.iter().enumerate() {
        let row = edges.row_mut(k);
        row[b.order.index()] = 1.0;
        row[4] = if b.in_ring { 1.0 } else { 0.0 };
    }
    (nodes, edges)
}

pub fn spectral_operator(graph: &MoleculeGraph) -> SpectralOperator {
    let n = graph.atom_count();
    let mut a_hat = graph.adjacency.clone();
    for i in 0..n {
        let degree: f64 = graph.adjacency.row(i).iter().sum();
        a_hat[(i, i)] += degree.max(1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a_hat.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a_hat[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    SpectralOperator { matrix: a_hat }
}

/// Sums the edge feature rows of the bonds incident to each atom.
pub fn edge_to_node(graph: &MoleculeGraph) -> Matrix {
    let mut out = Matrix::zeros(graph.atom_count(), EDGE_FEATURES);
    for (k, b) in graph.bonds.iter().enumerate() {
        let e = graph.edge_features.row(k).to_vec();
        for atom in [b.begin, b.end] {
            for (o, v) in out.row_mut(atom).iter_mut().zip(&e) {
                *o += v;
            }
        }
    }
    out
}

/// A bond lies on a ring iff its endpoints stay connected without it.
fn ring_bonds(n: usize, bonds: &[BondRecord]) -> Vec<bool> {
    let mut adj = vec![Vec::new(); n];
    for (k, b) in bonds.iter().enumerate() {
        adj[b.begin].push((b.end, k));
        adj[b.end].push((b.begin, k));
    }
    bonds
        .iter()
        .enumerate()
        .map(|(skip, b)| {
            let mut seen = vec![false; n];
            let mut stack = vec![b.begin];
            seen[b.begin] = true;
            while let Some(v) = stack.pop() {
                for &(u, k) in &adj[v] {
                    if k != skip && !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
            seen[b.end]
        })
        .collect()
}

struct RawAtom {
    element: Element,
    is_hydrogen: bool,
    aromatic: bool,
    charge: i32,
    /// `Some` for bracket atoms (hydrogen count as written).
    bracket_h: Option<u32>,
}

struct RawBond {
    a: usize,
    b: usize,
    order: Option<BondOrder>,
}

struct Parser {
    chars: Vec<(usize, u8)>,
    pos: usize,
    atoms: Vec<RawAtom>,
    bonds: Vec<RawBond>,
}

impl Parser {
    fn new(text: &str) -> Result<Self, SmilesError> {
        let mut chars = Vec::with_capacity(text.len());
        for (pos, ch) in text.chars().enumerate() {
            if !ch.is_ascii() {
                return Err(SmilesError::NonAscii { pos });
            }
            if !ch.is_ascii_whitespace() {
                chars.push((pos, ch as u8));
            }
        }
        if chars.is_empty() {
            return Err(SmilesError::EmptyInput);
        }
        Ok(Self {
            chars,
            pos: 0,
            atoms: Vec::new(),
            bonds: Vec::new(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn peek_at(&self, offset: usize) -> Option<u8> {
        self.chars.get(self.pos + offset).map(|&(_, c)| c)
    }

    /// Original character position of the cursor (or end of input).
    fn here(&self) -> usize {
        self.chars
            .get(self.pos)
            .map_or_else(|| self.chars.last().map_or(0, |&(p, _)| p + 1), |&(p, _)| p)
    }

    fn parse(mut self) -> Result<MoleculeGraph, SmilesError> {
        // (atom, open position) for pending branches
        let mut branch_stack: Vec<(usize, usize)> = Vec::new();
        // label -> (atom, bond order, position)
        let mut open_rings: std::collections::BTreeMap<u32, (usize, Option<BondOrder>, usize)> =
            Default::default();
        let mut prev: Option<usize> = None;
        let mut pending_bond: Option<(Option<BondOrder>, usize)> = None;

        while let Some(c) = self.peek() {
            let at = self.here();
            match c {
                b'(' => {
                    let Some(p) = prev else {
                        return Err(SmilesError::UnexpectedChar { pos: at, ch: '(' });
                    };
                    if pending_bond.is_some() {
                        return Err(SmilesError::UnexpectedChar { pos: at, ch: '(' });
                    }
                    branch_stack.push((p, at));
                    self.pos += 1;
                }
                b')' => {
                    let Some((p, _)) = branch_stack.pop() else {
                        return Err(SmilesError::UnexpectedChar { pos: at, ch: ')' });
                    };
                    if let Some((_, bpos)) = pending_bond {
                        return Err(SmilesError::DanglingBond { pos: bpos });
                    }
                    prev = Some(p);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if prev.is_none() || pending_bond.is_some() {
                        return Err(SmilesError::UnexpectedChar { pos: at, ch: c as char });
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        _ => BondOrder::Single,
                    };
                    pending_bond = Some((Some(order), at));
                    self.pos += 1;
                }
                b'.' => {
                    if let Some((_, bpos)) = pending_bond {
                        return Err(SmilesError::DanglingBond { pos: bpos });
                    }
                    if prev.is_none() {
                        return Err(SmilesError::UnexpectedChar { pos: at, ch: '.' });
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(p) = prev else {
                        return Err(SmilesError::UnexpectedChar { pos: at, ch: c as char });
                    };
                    let label = self.ring_label()?;
                    let order = pending_bond.take().and_then(|(o, _)| o);
                    if let Some((q, open_order, _)) = open_rings.remove(&label) {
                        if q == p || self.bonded(p, q) {
                            return Err(SmilesError::InvalidRingBond { pos: at });
                        }
                        self.bonds.push(RawBond {
                            a: q,
                            b: p,
                            order: order.or(open_order),
                        });
                    } else {
                        open_rings.insert(label, (p, order, at));
                    }
                }
                b'[' => {
                    let idx = self.bracket_atom()?;
                    self.attach(idx, &mut prev, &mut pending_bond);
                }
                b']' => return Err(SmilesError::UnbalancedBracket { pos: at }),
                _ => {
                    let idx = self.organic_atom()?;
                    self.attach(idx, &mut prev, &mut pending_bond);
                }
            }
        }
        if let Some((_, bpos)) = pending_bond {
            return Err(SmilesError::DanglingBond { pos: bpos });
        }
        if let Some(&(_, open_pos)) = branch_stack.last() {
            return Err(SmilesError::UnclosedBranch { pos: open_pos });
        }
        if let Some((&label, &(_, _, pos))) = open_rings.iter().next() {
            return Err(SmilesError::UnclosedRing { pos, label });
        }
        Ok(self.finish())
    }

    fn bonded(&self, a: usize, b: usize) -> bool {
        self.bonds
            .iter()
            .any(|r| (r.a == a && r.b == b) || (r.a == b && r.b == a))
    }

    fn attach(
        &mut self,
        idx: usize,
        prev: &mut Option<usize>,
        pending: &mut Option<(Option<BondOrder>, usize)>,
    ) {
        if let Some(p) = *prev {
            let order = pending.take().and_then(|(o, _)| o);
            self.bonds.push(RawBond { a: p, b: idx, order });
        }
        *pending = None;
        *prev = Some(idx);
    }

    fn ring_label(&mut self) -> Result<u32, SmilesError> {
        let at = self.here();
        match self.peek() {
            Some(b'%') => {
                let (d1, d2) = (self.peek_at(1), self.peek_at(2));
                match (d1, d2) {
                    (Some(a @ b'0'..=b'9'), Some(b @ b'0'..=b'9')) => {
                        self.pos += 3;
                        Ok(((a - b'0') * 10 + (b - b'0')) as u32)
                    }
                    _ => Err(SmilesError::UnexpectedChar { pos: at, ch: '%' }),
                }
            }
            Some(d) => {
                self.pos += 1;
                Ok((d - b'0') as u32)
            }
            None => unreachable!("ring_label called at end of input"),
        }
    }

    fn organic_atom(&mut self) -> Result<usize, SmilesError> {
        let at = self.here();
        let c = self.peek().expect("organic_atom called at end of input");
        let (symbol, aromatic, len) = match (c, self.peek_at(1)) {
            (b'C', Some(b'l')) => ("Cl", false, 2),
            (b'B', Some(b'r')) => ("Br", false, 2),
            (b'B', _) => ("B", false, 1),
            (b'C', _) => ("C", false, 1),
            (b'N', _) => ("N", false, 1),
            (b'O', _) => ("O", false, 1),
            (b'P', _) => ("P", false, 1),
            (b'S', _) => ("S", false, 1),
            (b'F', _) => ("F", false, 1),
            (b'I', _) => ("I", false, 1),
            (b'b', _) => ("B", true, 1),
            (b'c', _) => ("C", true, 1),
            (b'n', _) => ("N", true, 1),
            (b'o', _) => ("O", true, 1),
            (b'p', _) => ("P", true, 1),
            (b's', _) => ("S", true, 1),
            _ => {
                let symbol = if c.is_ascii_alphabetic() || c == b'*' {
                    (c as char).to_string()
                } else {
                    return Err(SmilesError::UnexpectedChar { pos: at, ch: c as char });
                };
                return Err(SmilesError::UnknownAtomSymbol { pos: at, symbol });
            }
        };
        self.pos += len;
        self.atoms.push(RawAtom {
            element: Element::from_symbol(symbol),
            is_hydrogen: false,
            aromatic,
            charge: 0,
            bracket_h: None,
        });
        Ok(self.atoms.len() - 1)
    }

    fn bracket_atom(&mut self) -> Result<usize, SmilesError> {
        let open = self.here();
        self.pos += 1;
        let close = self.chars[self.pos..]
            .iter()
            .position(|&(_, c)| c == b']' || c == b'[')
            .map(|off| self.pos + off);
        match close {
            Some(end) if self.chars[end].1 == b']' => {}
            _ => return Err(SmilesError::UnbalancedBracket { pos: open }),
        }
        // isotope
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        let sym_pos = self.here();
        let c0 = self.peek().ok_or(SmilesError::UnbalancedBracket { pos: open })?;
        let c1 = self.peek_at(1);
        let mut symbol = None;
        let mut aromatic = false;
        if c0.is_ascii_uppercase() {
            if let Some(l @ b'a'..=b'z') = c1 {
                let two = format!("{}{}", c0 as char, l as char);
                if ELEMENT_SYMBOLS.contains(&two.as_str()) {
                    symbol = Some(two);
                }
            }
            if symbol.is_none() {
                let one = (c0 as char).to_string();
                if ELEMENT_SYMBOLS.contains(&one.as_str()) {
                    symbol = Some(one);
                }
            }
        } else if c0.is_ascii_lowercase() {
            aromatic = true;
            for cand in AROMATIC_BRACKET {
                let b = cand.as_bytes();
                if b[0] == c0 && (b.len() == 1 || c1 == Some(b[1])) {
                    let mut s = cand.to_string();
                    s[..1].make_ascii_uppercase();
                    symbol = Some(s);
                    break;
                }
            }
        }
        let Some(symbol) = symbol else {
            let bad: String = self.chars[self.pos..]
                .iter()
                .take_while(|&&(_, c)| c.is_ascii_alphabetic() || c == b'*')
                .map(|&(_, c)| c as char)
                .collect();
            let bad = if bad.is_empty() { (c0 as char).to_string() } else { bad };
            return Err(SmilesError::UnknownAtomSymbol { pos: sym_pos, symbol: bad });
        };
        self.pos += symbol.len();

        // chirality
        if self.peek() == Some(b'@') {
            self.pos += 1;
            if self.peek() == Some(b'@') {
                self.pos += 1;
            }
            let class = [self.peek(), self.peek_at(1)];
            if matches!(
                class,
                [Some(b'T'), Some(b'H' | b'B')]
                    | [Some(b'A'), Some(b'L')]
                    | [Some(b'S'), Some(b'P')]
                    | [Some(b'O'), Some(b'H')]
            ) {
                self.pos += 2;
                while matches!(self.peek(), Some(b'0'..=b'9')) {
                    self.pos += 1;
                }
            }
        }
        // hydrogen count
        let mut h = 0u32;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            h = 1;
            if let Some(d @ b'0'..=b'9') = self.peek() {
                h = (d - b'0') as u32;
                self.pos += 1;
            }
        }
        // charge
        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            charge = unit;
            if let Some(d @ b'1'..=b'9') = self.peek() {
                charge = unit * (d - b'0') as i32;
                self.pos += 1;
            } else {
                while self.peek() == Some(sign) {
                    charge += unit;
                    self.pos += 1;
                }
            }
        }
        // atom class
        if self.peek() == Some(b':') {
            self.pos += 1;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
        }
        match self.peek() {
            Some(b']') => self.pos += 1,
            Some(c) => {
                return Err(SmilesError::UnexpectedChar {
                    pos: self.here(),
                    ch: c as char,
                })
            }
            None => return Err(SmilesError::UnbalancedBracket { pos: open }),
        }
        self.atoms.push(RawAtom {
            element: Element::from_symbol(&symbol),
            is_hydrogen: symbol == "H",
            aromatic,
            charge,
            bracket_h: Some(h),
        });
        Ok(self.atoms.len() - 1)
    }

    fn finish(self) -> MoleculeGraph {
        let n = self.atoms.len();
        let orders: Vec<BondOrder> = self
            .bonds
            .iter()
            .map(|b| {
                b.order.unwrap_or(
                    if self.atoms[b.a].aromatic && self.atoms[b.b].aromatic {
                        BondOrder::Aromatic
                    } else {
                        BondOrder::Single
                    },
                )
            })
            .collect();

        // Fold bracket hydrogens that hang off exactly one heavy atom.
        let mut extra_h = vec![0u32; n];
        let mut dropped = vec![false; n];
        for i in 0..n {
            if !self.atoms[i].is_hydrogen {
                continue;
            }
            let incident: Vec<usize> = (0..self.bonds.len())
                .filter(|&k| self.bonds[k].a == i || self.bonds[k].b == i)
                .collect();
            if let [k] = incident[..] {
                let other = if self.bonds[k].a == i { self.bonds[k].b } else { self.bonds[k].a };
                if !self.atoms[other].is_hydrogen {
                    dropped[i] = true;
                    extra_h[other] += 1;
                }
            }
        }
        let mut remap = vec![usize::MAX; n];
        let mut next = 0;
        for i in 0..n {
            if !dropped[i] {
                remap[i] = next;
                next += 1;
            }
        }

        let mut valence_sum = vec![0u32; n];
        for (b, o) in self.bonds.iter().zip(&orders) {
            valence_sum[b.a] += o.valence();
            valence_sum[b.b] += o.valence();
        }

        let mut atoms = Vec::with_capacity(next);
        for i in 0..n {
            if dropped[i] {
                continue;
            }
            let raw = &self.atoms[i];
            let implicit = match raw.bracket_h {
                Some(h) => h,
                None => implicit_hydrogens(raw.element, raw.aromatic, valence_sum[i]),
            };
            atoms.push(AtomRecord {
                element: if raw.is_hydrogen { Element::Other } else { raw.element },
                aromatic: raw.aromatic,
                formal_charge: raw.charge.clamp(-2, 2) as i8,
                explicit_h: (implicit + extra_h[i]).min(u8::MAX as u32) as u8,
                degree: 0,
            });
        }
        let bonds = self
            .bonds
            .iter()
            .zip(orders)
            .filter(|(b, _)| !dropped[b.a] && !dropped[b.b])
            .map(|(b, order)| BondRecord {
                begin: remap[b.a],
                end: remap[b.b],
                order,
                in_ring: false,
            })
            .collect();
        MoleculeGraph::from_parts(atoms, bonds)
    }
}

fn implicit_hydrogens(element: Element, aromatic: bool, bond_sum: u32) -> u32 {
    let valences = element.default_valences();
    if aromatic {
        let used = bond_sum + 1;
        return valences.first().map_or(0, |&v| v.saturating_sub(used));
    }
    valences
        .iter()
        .find(|&&v| v >= bond_sum)
        .map_or(0, |&v| v - bond_sum)
}
