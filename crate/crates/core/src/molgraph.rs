//! SMILES -> molecular graph parsing, Bemis-Murcko scaffold pruning and a
//! canonical scaffold key for grouping molecules in scaffold splits.
//!
//! Hydrogens written as bracket counts stay implicit. Stereo markers and
//! isotopes are read and discarded. Aromaticity is taken from lowercase
//! symbols only; there is no kekulization, so `c1ccccc1` and `C1=CC=CC=C1`
//! are different scaffolds here.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty SMILES string")]
    Empty,
    #[error("unbalanced parentheses at position {0}")]
    UnbalancedParens(usize),
    #[error("ring bond {0} opened but never closed")]
    UnclosedRingBond(u32),
    #[error("bad bracket atom at position {0}")]
    BadBracketAtom(usize),
    #[error("unexpected character {ch:?} at position {pos}")]
    UnexpectedChar { ch: char, pos: usize },
    #[error("bond or ring closure at position {0} has no preceding atom")]
    DanglingBond(usize),
    #[error("ring closure at position {0} bonds an atom to itself or duplicates a bond")]
    InvalidRingClosure(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    fn symbol(self) -> char {
        match self {
            BondOrder::Single => '-',
            BondOrder::Double => '=',
            BondOrder::Triple => '#',
            BondOrder::Aromatic => ':',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: String,
    pub aromatic: bool,
    pub charge: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScaffoldKey(pub String);

impl ScaffoldKey {
    pub const ACYCLIC: &'static str = "ACYCLIC";

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ScaffoldKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Explicit bond symbol awaiting its second atom. `None` means implicit.
type PendingBond = Option<BondOrder>;

struct Parser {
    chars: Vec<char>,
    pos: usize,
    graph: MolGraph,
    bond_set: std::collections::HashSet<(usize, usize)>,
}

pub fn parse_smiles(s: &str) -> Result<MolGraph, ParseError> {
    if s.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut p = Parser { chars: s.chars().collect(), pos: 0, graph: MolGraph::default(), bond_set: Default::default() };
    p.run()?;
    Ok(p.graph)
}

impl Parser {
    fn run(&mut self) -> Result<(), ParseError> {
        let mut prev: Option<usize> = None;
        let mut pending: PendingBond = None;
        let mut dot = false;
        let mut branches: Vec<usize> = Vec::new();
        let mut rings: BTreeMap<u32, (usize, PendingBond)> = BTreeMap::new();

        while self.pos < self.chars.len() {
            let start = self.pos;
            let c = self.chars[self.pos];
            match c {
                '(' => {
                    let atom = prev.ok_or(ParseError::UnbalancedParens(start))?;
                    branches.push(atom);
                    self.pos += 1;
                }
                ')' => {
                    prev = Some(branches.pop().ok_or(ParseError::UnbalancedParens(start))?);
                    pending = None;
                    self.pos += 1;
                }
                '-' | '=' | '#' | '$' | ':' | '/' | '\\' => {
                    if prev.is_none() {
                        return Err(ParseError::DanglingBond(start));
                    }
                    pending = match c {
                        '=' => Some(BondOrder::Double),
                        '#' | '$' => Some(BondOrder::Triple),
                        ':' => Some(BondOrder::Aromatic),
                        '-' => Some(BondOrder::Single),
                        // stereo bonds: single, direction discarded
                        _ => pending.or(Some(BondOrder::Single)),
                    };
                    self.pos += 1;
                }
                '.' => {
                    dot = true;
                    pending = None;
                    self.pos += 1;
                }
                '0'..='9' | '%' => {
                    let atom = prev.ok_or(ParseError::DanglingBond(start))?;
                    let label = self.ring_label()?;
                    match rings.remove(&label) {
                        Some((other, open_bond)) => {
                            if other == atom {
                                return Err(ParseError::InvalidRingClosure(start));
                            }
                            let order = pending.or(open_bond).unwrap_or_else(|| self.implicit_order(other, atom));
                            if !self.add_bond(other, atom, order) {
                                return Err(ParseError::InvalidRingClosure(start));
                            }
                        }
                        None => {
                            rings.insert(label, (atom, pending));
                        }
                    }
                    pending = None;
                }
                '[' => {
                    let atom = self.bracket_atom()?;
                    self.attach(atom, &mut prev, &mut pending, &mut dot);
                }
                _ => {
                    let atom = self.organic_atom()?;
                    self.attach(atom, &mut prev, &mut pending, &mut dot);
                }
            }
        }
        if !branches.is_empty() {
            return Err(ParseError::UnbalancedParens(self.chars.len()));
        }
        if let Some((&label, _)) = rings.iter().next() {
            return Err(ParseError::UnclosedRingBond(label));
        }
        if pending.is_some() {
            return Err(ParseError::DanglingBond(self.chars.len()));
        }
        Ok(())
    }

    fn attach(&mut self, atom: Atom, prev: &mut Option<usize>, pending: &mut PendingBond, dot: &mut bool) {
        let idx = self.graph.atoms.len();
        self.graph.atoms.push(atom);
        if let Some(p) = *prev {
            if !*dot {
                let order = pending.unwrap_or_else(|| self.implicit_order(p, idx));
                self.add_bond(p, idx, order);
            }
        }
        *prev = Some(idx);
        *pending = None;
        *dot = false;
    }

    fn implicit_order(&self, a: usize, b: usize) -> BondOrder {
        if self.graph.atoms[a].aromatic && self.graph.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, order: BondOrder) -> bool {
        let key = (a.min(b), a.max(b));
        if a == b || !self.bond_set.insert(key) {
            return false;
        }
        self.graph.bonds.push(Bond { a, b, order });
        true
    }

    fn ring_label(&mut self) -> Result<u32, ParseError> {
        let start = self.pos;
        if self.chars[self.pos] == '%' {
            let digits: String = self.chars.get(self.pos + 1..self.pos + 3).unwrap_or(&[]).iter().collect();
            if digits.len() != 2 || !digits.chars().all(|d| d.is_ascii_digit()) {
                return Err(ParseError::UnexpectedChar { ch: '%', pos: start });
            }
            self.pos += 3;
            Ok(digits.parse().unwrap())
        } else {
            let d = self.chars[self.pos].to_digit(10).unwrap();
            self.pos += 1;
            Ok(d)
        }
    }

    fn organic_atom(&mut self) -> Result<Atom, ParseError> {
        let c = self.chars[self.pos];
        let next = self.chars.get(self.pos + 1).copied();
        let (element, aromatic, width) = match (c, next) {
            ('C', Some('l')) => ("Cl".to_string(), false, 2),
            ('B', Some('r')) => ("Br".to_string(), false, 2),
            ('B' | 'C' | 'N' | 'O' | 'P' | 'S' | 'F' | 'I' | '*', _) => (c.to_string(), false, 1),
            ('b' | 'c' | 'n' | 'o' | 'p' | 's', _) => (c.to_ascii_uppercase().to_string(), true, 1),
            _ => return Err(ParseError::UnexpectedChar { ch: c, pos: self.pos }),
        };
        self.pos += width;
        Ok(Atom { element, aromatic, charge: 0 })
    }

    fn bracket_atom(&mut self) -> Result<Atom, ParseError> {
        let open = self.pos;
        let close = self.chars[open..]
            .iter()
            .position(|&c| c == ']')
            .map(|off| open + off)
            .ok_or(ParseError::BadBracketAtom(open))?;
        let body: Vec<char> = self.chars[open + 1..close].to_vec();
        self.pos = close + 1;
        let bad = || ParseError::BadBracketAtom(open);

        let mut i = 0;
        while i < body.len() && body[i].is_ascii_digit() {
            i += 1; // isotope, discarded
        }
        let rest = &body[i..];
        let (element, aromatic, width) = bracket_symbol(rest).ok_or_else(bad)?;
        i += width;
        let chiral_start = i;
        while i < body.len() && body[i] == '@' {
            i += 1;
        }
        // @TH1, @AL2 style chirality classes
        if i == chiral_start + 1 {
            while i + 1 < body.len() && body[i].is_ascii_uppercase() && body[i + 1].is_ascii_uppercase() {
                i += 2;
                while i < body.len() && body[i].is_ascii_digit() {
                    i += 1;
                }
            }
        }
        if i < body.len() && body[i] == 'H' {
            i += 1;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
        }
        let mut charge = 0i32;
        if i < body.len() && (body[i] == '+' || body[i] == '-') {
            let sign = if body[i] == '+' { 1 } else { -1 };
            let sym = body[i];
            i += 1;
            let digits_start = i;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
            if i > digits_start {
                let n: i32 = body[digits_start..i].iter().collect::<String>().parse().map_err(|_| bad())?;
                charge = sign * n;
            } else {
                let mut n = 1;
                while i < body.len() && body[i] == sym {
                    n += 1;
                    i += 1;
                }
                charge = sign * n;
            }
        }
        if i < body.len() && body[i] == ':' {
            i += 1;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i != body.len() {
            return Err(bad());
        }
        Ok(Atom { element, aromatic, charge })
    }
}

trait UpperFirst {
    fn to_ascii_uppercase_first(&self, aromatic: bool) -> String;
}

impl UpperFirst for str {
    fn to_ascii_uppercase_first(&self, aromatic: bool) -> String {
        if !aromatic {
            return self.to_string();
        }
        let mut out: String = self[..1].to_ascii_uppercase();
        out.push_str(&self[1..]);
        out
    }
}

fn bracket_symbol(rest: &[char]) -> Option<(String, bool, usize)> {
    let first = *rest.first()?;
    if first == '*' {
        return Some(("*".into(), false, 1));
    }
    if rest.len() >= 2 {
        let pair: String = rest[..2].iter().collect();
        if matches!(pair.as_str(), "se" | "te" | "as") {
            return Some((pair.to_ascii_uppercase_first(true), true, 2));
        }
        if first.is_ascii_uppercase() && crate::tokenizer::is_two_char_atom(&pair) {
            return Some((pair, false, 2));
        }
    }
    match first {
        'b' | 'c' | 'n' | 'o' | 'p' | 's' => Some((first.to_ascii_uppercase().to_string(), true, 1)),
        'H' | 'B' | 'C' | 'N' | 'O' | 'F' | 'P' | 'S' | 'K' | 'V' | 'Y' | 'I' | 'W' | 'U' => {
            Some((first.to_string(), false, 1))
        }
        _ => None,
    }
}

impl MolGraph {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, BondOrder)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.a].push((b.b, b.order));
            adj[b.b].push((b.a, b.order));
        }
        adj
    }

    /// Flags each bond that lies on a cycle (i.e. is not a bridge).
    pub fn ring_bonds(&self) -> Vec<bool> {
        let n = self.atoms.len();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (i, b) in self.bonds.iter().enumerate() {
            adj[b.a].push((b.b, i));
            adj[b.b].push((b.a, i));
        }
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut is_bridge = vec![false; self.bonds.len()];
        let mut timer = 0;
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // iterative DFS: (vertex, parent edge, next neighbor index)
            let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            while let Some(&mut (v, parent_edge, ref mut next)) = stack.last_mut() {
                if *next < adj[v].len() {
                    let (u, e) = adj[v][*next];
                    *next += 1;
                    if e == parent_edge {
                        continue;
                    }
                    if disc[u] == usize::MAX {
                        disc[u] = timer;
                        low[u] = timer;
                        timer += 1;
                        stack.push((u, e, 0));
                    } else {
                        low[v] = low[v].min(disc[u]);
                    }
                } else {
                    stack.pop();
                    if let Some(&(p, _, _)) = stack.last() {
                        low[p] = low[p].min(low[v]);
                        if low[v] > disc[p] {
                            is_bridge[parent_edge] = true;
                        }
                    }
                }
            }
        }
        is_bridge.into_iter().map(|b| !b).collect()
    }

    pub fn ring_atoms(&self) -> Vec<bool> {
        let mut ring = vec![false; self.atoms.len()];
        for (bond, in_ring) in self.bonds.iter().zip(self.ring_bonds()) {
            if in_ring {
                ring[bond.a] = true;
                ring[bond.b] = true;
            }
        }
        ring
    }

    /// Number of independent cycles (cyclomatic number).
    pub fn ring_count(&self) -> usize {
        let components = self.components();
        (self.bonds.len() + components).saturating_sub(self.atoms.len())
    }

    fn components(&self) -> usize {
        let n = self.atoms.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut count = n;
        for b in &self.bonds {
            let (ra, rb) = (find(&mut parent, b.a), find(&mut parent, b.b));
            if ra != rb {
                parent[ra] = rb;
                count -= 1;
            }
        }
        count
    }

    /// Keeps the atoms flagged in `keep`, reindexing in original order.
    pub fn induced_subgraph(&self, keep: &[bool]) -> MolGraph {
        let mut map = vec![usize::MAX; self.atoms.len()];
        let mut atoms = Vec::new();
        for (i, atom) in self.atoms.iter().enumerate() {
            if keep[i] {
                map[i] = atoms.len();
                atoms.push(atom.clone());
            }
        }
        let bonds = self
            .bonds
            .iter()
            .filter(|b| keep[b.a] && keep[b.b])
            .map(|b| Bond { a: map[b.a], b: map[b.b], order: b.order })
            .collect();
        MolGraph { atoms, bonds }
    }
}

/// Ring systems plus linkers: repeatedly strips non-ring atoms of degree
/// at most one. Acyclic molecules reduce to the empty graph.
pub fn murcko_scaffold(g: &MolGraph) -> MolGraph {
    let ring = g.ring_atoms();
    let n = g.atoms.len();
    let adj = g.adjacency();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut queue: Vec<usize> = (0..n).filter(|&i| !ring[i] && degree[i] <= 1).collect();
    while let Some(v) = queue.pop() {
        if !alive[v] {
            continue;
        }
        alive[v] = false;
        for &(u, _) in &adj[v] {
            if alive[u] {
                degree[u] -= 1;
                if !ring[u] && degree[u] <= 1 {
                    queue.push(u);
                }
            }
        }
    }
    g.induced_subgraph(&alive)
}

/// Deterministic key from a canonical atom order found by iterative
/// neighborhood refinement, with remaining ties broken one atom at a time.
pub fn scaffold_key(g: &MolGraph) -> ScaffoldKey {
    if g.is_empty() {
        return ScaffoldKey(ScaffoldKey::ACYCLIC.into());
    }
    let order = canonical_ranks(g);
    let mut atoms: Vec<(usize, String)> = g
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut label = if a.aromatic { a.element.to_ascii_lowercase() } else { a.element.clone() };
            if a.charge != 0 {
                label.push_str(&format!("{:+}", a.charge));
            }
            (order[i], label)
        })
        .collect();
    atoms.sort();
    let mut bonds: Vec<(usize, usize, char)> = g
        .bonds
        .iter()
        .map(|b| {
            let (x, y) = (order[b.a], order[b.b]);
            (x.min(y), x.max(y), b.order.symbol())
        })
        .collect();
    bonds.sort();
    let atom_part: Vec<String> = atoms.into_iter().map(|(_, l)| l).collect();
    let bond_part: Vec<String> = bonds.into_iter().map(|(a, b, o)| format!("{a}{o}{b}")).collect();
    ScaffoldKey(format!("{}|{}", atom_part.join(","), bond_part.join(",")))
}

fn canonical_ranks(g: &MolGraph) -> Vec<usize> {
    let adj = g.adjacency();
    let n = g.atoms.len();
    let initial: Vec<(String, bool, i32, usize)> =
        g.atoms.iter().enumerate().map(|(i, a)| (a.element.clone(), a.aromatic, a.charge, adj[i].len())).collect();
    let mut ranks = dense_ranks(&initial);
    loop {
        ranks = refine(&ranks, &adj);
        let classes = count_classes(&ranks);
        if classes == n {
            return ranks;
        }
        // Break the lowest tied class at its first atom by index.
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for &r in &ranks {
            *seen.entry(r).or_default() += 1;
        }
        let tied = (0..n).filter(|&r| seen.get(&r).copied().unwrap_or(0) > 1).min().unwrap();
        let pick = (0..n).find(|&i| ranks[i] == tied).unwrap();
        let keys: Vec<(usize, bool)> = (0..n).map(|i| (ranks[i], i != pick)).collect();
        ranks = dense_ranks(&keys);
    }
}

fn refine(ranks: &[usize], adj: &[Vec<(usize, BondOrder)>]) -> Vec<usize> {
    let mut ranks = ranks.to_vec();
    let mut classes = count_classes(&ranks);
    loop {
        let keys: Vec<(usize, Vec<(usize, BondOrder)>)> = adj
            .iter()
            .enumerate()
            .map(|(i, nbrs)| {
                let mut nb: Vec<(usize, BondOrder)> = nbrs.iter().map(|&(u, o)| (ranks[u], o)).collect();
                nb.sort();
                (ranks[i], nb)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = count_classes(&next);
        if next_classes == classes {
            return ranks;
        }
        ranks = next;
        classes = next_classes;
    }
}

/// Ranks are positions in sorted order where equal keys share a rank value
/// equal to the count of strictly smaller keys.
fn dense_ranks<K: Ord>(keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut ranks = vec![0; keys.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = if pos > 0 && keys[idx[pos - 1]] == keys[i] { ranks[idx[pos - 1]] } else { pos };
    }
    ranks
}

fn count_classes(ranks: &[usize]) -> usize {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    r.dedup();
    r.len()
}

/// Convenience: SMILES -> scaffold key.
pub fn smiles_scaffold_key(smiles: &str) -> Result<ScaffoldKey, ParseError> {
    Ok(scaffold_key(&murcko_scaffold(&parse_smiles(smiles)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ethane() {
        let g = parse_smiles("CC").unwrap();
        assert_eq!(g.atom_count(), 2);
        assert_eq!(g.bonds, vec![Bond { a: 0, b: 1, order: BondOrder::Single }]);
    }

    #[test]
    fn benzene_ring() {
        let g = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(g.atom_count(), 6);
        assert_eq!(g.bonds.len(), 6);
        assert!(g.atoms.iter().all(|a| a.aromatic && a.element == "C"));
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
        assert_eq!(g.ring_count(), 1);
        assert!(g.ring_atoms().iter().all(|&r| r));
        // closure bond joins the last atom back to the first
        assert!(g.bonds.contains(&Bond { a: 0, b: 5, order: BondOrder::Aromatic }));
    }

    #[test]
    fn dichloro_anilide() {
        // C,C,C,O,N + six ring carbons + two chlorines
        let g = parse_smiles("CCC(=O)Nc1ccc(Cl)c(Cl)c1").unwrap();
        assert_eq!(g.atom_count(), 13);
        assert_eq!(g.ring_count(), 1);
        assert_eq!(g.atoms.iter().filter(|a| a.element == "Cl").count(), 2);
        assert_eq!(g.bonds.iter().filter(|b| b.order == BondOrder::Double).count(), 1);
    }

    #[test]
    fn bracket_atoms() {
        let g = parse_smiles("[NH4+].[O-]C(=O)C").unwrap();
        assert_eq!(g.atoms[0], Atom { element: "N".into(), aromatic: false, charge: 1 });
        assert_eq!(g.atoms[1].charge, -1);
        assert_eq!(g.bonds.len(), 3);
        let g = parse_smiles("[13CH3][C@@H](F)[nH0]").unwrap();
        assert_eq!(g.atoms[0].element, "C");
        assert!(g.atoms[3].aromatic);
        let g = parse_smiles("[Fe+++]").unwrap();
        assert_eq!(g.atoms[0].charge, 3);
        let g = parse_smiles("[Co-2]").unwrap();
        assert_eq!(g.atoms[0].element, "Co");
        assert_eq!(g.atoms[0].charge, -2);
        let g = parse_smiles("[se]1cccc1").unwrap();
        assert_eq!(g.atoms[0].element, "Se");
    }

    #[test]
    fn ring_closure_bond_orders_and_percent_labels() {
        let g = parse_smiles("C=1CCCCC1").unwrap();
        assert!(g.bonds.contains(&Bond { a: 0, b: 5, order: BondOrder::Double }));
        let g = parse_smiles("C%12CCCCC%12").unwrap();
        assert_eq!(g.ring_count(), 1);
        let g = parse_smiles("F/C=C/F").unwrap();
        assert_eq!(g.bonds.len(), 3);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_smiles("CC(C"), Err(ParseError::UnbalancedParens(4)));
        assert_eq!(parse_smiles("CC)C"), Err(ParseError::UnbalancedParens(2)));
        assert_eq!(parse_smiles("C1CC"), Err(ParseError::UnclosedRingBond(1)));
        assert_eq!(parse_smiles("C[Xx]"), Err(ParseError::BadBracketAtom(1)));
        assert_eq!(parse_smiles("C[C"), Err(ParseError::BadBracketAtom(1)));
        assert!(matches!(parse_smiles("C11"), Err(ParseError::InvalidRingClosure(_))));
        assert!(matches!(parse_smiles("C12CC12"), Err(ParseError::InvalidRingClosure(_))));
        assert!(matches!(parse_smiles("C?"), Err(ParseError::UnexpectedChar { ch: '?', .. })));
        assert!(matches!(parse_smiles("=C"), Err(ParseError::DanglingBond(0))));
        assert_eq!(parse_smiles(""), Err(ParseError::Empty));
    }

    #[test]
    fn toluene_scaffold_is_benzene() {
        let s = murcko_scaffold(&parse_smiles("Cc1ccccc1").unwrap());
        assert_eq!(s.atom_count(), 6);
        assert_eq!(scaffold_key(&s), scaffold_key(&parse_smiles("c1ccccc1").unwrap()));
    }

    #[test]
    fn benzene_is_a_fixpoint_and_chains_vanish() {
        let benzene = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(murcko_scaffold(&benzene), benzene);
        let butane = murcko_scaffold(&parse_smiles("CCCC").unwrap());
        assert!(butane.is_empty());
        assert_eq!(scaffold_key(&butane).as_str(), "ACYCLIC");
    }

    #[test]
    fn linkers_survive() {
        // diphenylmethane keeps the CH2 linker; side chains go
        let s = murcko_scaffold(&parse_smiles("CCc1ccc(Cc2ccccc2O)cc1").unwrap());
        assert_eq!(s.atom_count(), 13);
        // salt counter-ion is removed
        let s = murcko_scaffold(&parse_smiles("c1ccccc1CC[NH3+].[Cl-]").unwrap());
        assert_eq!(s.atom_count(), 6);
    }

    #[test]
    fn aromatic_and_kekule_benzene_are_distinct_classes() {
        let a = smiles_scaffold_key("c1ccccc1").unwrap();
        let k = smiles_scaffold_key("C1=CC=CC=C1").unwrap();
        assert_ne!(a, k);
    }

    #[test]
    fn key_ignores_writing_order() {
        let pairs = [
            ("c1ccc2ccccc2c1", "c1cc2ccccc2cc1"),
            ("O=C(Nc1ccccc1)C1CCNCC1", "C1CNCCC1C(=O)Nc1ccccc1"),
            ("c1ccc(cc1)-c1ccncc1", "n1ccc(cc1)-c1ccccc1"),
        ];
        for (a, b) in pairs {
            assert_eq!(smiles_scaffold_key(a).unwrap(), smiles_scaffold_key(b).unwrap(), "{a} vs {b}");
        }
        assert_ne!(smiles_scaffold_key("c1ccncc1").unwrap(), smiles_scaffold_key("c1ccccc1").unwrap());
    }

    fn permuted(g: &MolGraph, perm: &[usize]) -> MolGraph {
        let mut atoms = vec![g.atoms[0].clone(); g.atoms.len()];
        for (i, a) in g.atoms.iter().enumerate() {
            atoms[perm[i]] = a.clone();
        }
        let bonds = g.bonds.iter().map(|b| Bond { a: perm[b.a], b: perm[b.b], order: b.order }).rev().collect();
        MolGraph { atoms, bonds }
    }

    const MOLS: [&str; 6] = [
        "CCC(=O)Nc1ccc(Cl)c(Cl)c1",
        "O=C1CN=C(c2ccccc2)c2cc(Cl)ccc2N1C",
        "CC(C)Cc1ccc(C(C)C(=O)O)cc1",
        "c1ccc2c(c1)Cc1ccccc1-2",
        "C1CC2CCC1CC2",
        "OCC3OC(OCC2OC(OC(C#N)c1ccccc1)C(O)C(O)C2O)C(O)C(O)C3O",
    ];

    proptest! {
        #[test]
        fn scaffold_properties(idx in 0usize..6, seed in any::<u64>()) {
            let g = parse_smiles(MOLS[idx]).unwrap();
            let scaf = murcko_scaffold(&g);
            // ring atoms are never pruned
            let ring = g.ring_atoms();
            prop_assert_eq!(scaf.atom_count() >= ring.iter().filter(|&&r| r).count(), true);
            prop_assert_eq!(scaf.ring_count(), g.ring_count());
            // idempotence
            prop_assert_eq!(murcko_scaffold(&scaf), scaf.clone());
            // key is invariant to atom numbering
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..scaf.atom_count()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(scaffold_key(&permuted(&scaf, &perm)), scaffold_key(&scaf));
        }
    }
}
