//! Sparsity patterns, multi-layer connectivity and pattern automorphisms.
//!
//! Convention: `A(i, j) = 1` iff `j ∈ N(i)`, read "token `i` attends to token
//! `j`". A product `A_{r_k} .. A_{r_1}` then carries information from source
//! `j` through layers `r_1 .. r_k` into `i`.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::groups::{Permutation, PermutationGroup, MAX_ENUM_N};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparsityPattern {
    neighborhoods: Vec<BTreeSet<usize>>,
}

impl SparsityPattern {
    /// Rejects empty neighborhoods and out-of-range indices.
    pub fn new(neighborhoods: Vec<BTreeSet<usize>>) -> Result<Self> {
        let n = neighborhoods.len();
        if n == 0 {
            return Err(invalid("sparsity pattern needs n >= 1"));
        }
        for (i, nb) in neighborhoods.iter().enumerate() {
            if nb.is_empty() {
                return Err(invalid(format!("neighborhood of token {i} is empty")));
            }
            if let Some(&j) = nb.iter().find(|&&j| j >= n) {
                return Err(invalid(format!("neighborhood of token {i} contains {j}, out of range for n={n}")));
            }
        }
        Ok(Self { neighborhoods })
    }

    pub fn from_lists(lists: &[&[usize]]) -> Result<Self> {
        Self::new(lists.iter().map(|l| l.iter().copied().collect()).collect())
    }

    pub fn from_adjacency(adj: &BoolMatrix) -> Result<Self> {
        Self::new((0..adj.n).map(|i| (0..adj.n).filter(|&j| adj.get(i, j)).collect()).collect())
    }

    pub fn n(&self) -> usize {
        self.neighborhoods.len()
    }

    pub fn neighborhood(&self, i: usize) -> &BTreeSet<usize> {
        &self.neighborhoods[i]
    }

    pub fn neighborhoods(&self) -> &[BTreeSet<usize>] {
        &self.neighborhoods
    }

    pub fn attends(&self, i: usize, j: usize) -> bool {
        self.neighborhoods[i].contains(&j)
    }

    pub fn is_full(&self) -> bool {
        self.neighborhoods.iter().all(|nb| nb.len() == self.n())
    }
}

/// Dense boolean `n x n` matrix with boolean-semiring products.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoolMatrix {
    n: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![false; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.n + j] = v;
    }

    pub fn or(&self, other: &BoolMatrix) -> BoolMatrix {
        BoolMatrix { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect() }
    }

    pub fn mul(&self, other: &BoolMatrix) -> BoolMatrix {
        let n = self.n;
        let mut out = BoolMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                if self.get(i, k) {
                    for j in 0..n {
                        if other.get(k, j) {
                            out.set(i, j, true);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn all_off_diagonal(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| i == j || self.get(i, j)))
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n).map(|i| (0..self.n).map(|j| u8::from(self.get(i, j))).collect()).collect()
    }
}

impl fmt::Display for BoolMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            let row: String = (0..self.n).map(|j| if self.get(i, j) { '1' } else { '0' }).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

pub fn adjacency(p: &SparsityPattern) -> BoolMatrix {
    let mut a = BoolMatrix::zeros(p.n());
    for (i, nb) in p.neighborhoods.iter().enumerate() {
        for &j in nb {
            a.set(i, j, true);
        }
    }
    a
}

/// A finite prefix `(N_1, .., N_L)` of a layer-wise pattern sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSequence {
    patterns: Vec<SparsityPattern>,
}

impl PatternSequence {
    pub fn new(patterns: Vec<SparsityPattern>) -> Result<Self> {
        let first = patterns.first().ok_or_else(|| invalid("pattern sequence is empty"))?;
        let n = first.n();
        if let Some(p) = patterns.iter().find(|p| p.n() != n) {
            return Err(shape(format!("pattern sequence mixes n={n} and n={}", p.n())));
        }
        Ok(Self { patterns })
    }

    pub fn repeated(p: SparsityPattern, times: usize) -> Result<Self> {
        Self::new(vec![p; times])
    }

    pub fn n(&self) -> usize {
        self.patterns[0].n()
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn patterns(&self) -> &[SparsityPattern] {
        &self.patterns
    }
}

/// `R_0 = I`, `R_t = (I ∨ A_t) R_{t-1}`; each layer is either skipped or
/// applied, so `R_m` sums over every increasing subsequence of `1..=m`.
pub fn reachability(phi: &PatternSequence, m: usize) -> Result<BoolMatrix> {
    if m == 0 || m > phi.len() {
        return Err(invalid(format!("layer count m = {m} outside 1..={}", phi.len())));
    }
    let n = phi.n();
    let id = BoolMatrix::identity(n);
    let mut r = id.clone();
    for p in &phi.patterns[..m] {
        r = id.or(&adjacency(p)).mul(&r);
    }
    Ok(r)
}

/// True iff every ordered pair `i != j` is linked through some subsequence of
/// the first `m` layers.
pub fn connected_within(phi: &PatternSequence, m: usize) -> Result<bool> {
    Ok(reachability(phi, m)?.all_off_diagonal())
}

/// Smallest `m` with `connected_within(phi, m)`, if any.
pub fn connected_at(phi: &PatternSequence) -> Option<usize> {
    let n = phi.n();
    let id = BoolMatrix::identity(n);
    let mut r = id.clone();
    for (t, p) in phi.patterns.iter().enumerate() {
        r = id.or(&adjacency(p)).mul(&r);
        if r.all_off_diagonal() {
            return Some(t + 1);
        }
    }
    if n == 1 {
        return Some(1);
    }
    None
}

fn preserves(p: &SparsityPattern, sigma: &[usize]) -> bool {
    let n = p.n();
    (0..n).all(|i| (0..n).all(|j| p.attends(i, j) == p.attends(sigma[i], sigma[j])))
}

fn check_bound(n: usize) -> Result<()> {
    if n > MAX_ENUM_N {
        return Err(Error::BoundExceeded(format!("automorphism search on n = {n} exceeds {MAX_ENUM_N}")));
    }
    Ok(())
}

/// Visits every permutation of `0..n` (Heap's algorithm).
fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    visit(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            visit(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// `{σ ∈ S_n : j ∈ N(i) ⇔ σ(j) ∈ N(σ(i))}` by exhaustive search.
pub fn automorphisms(p: &SparsityPattern) -> Result<PermutationGroup> {
    check_bound(p.n())?;
    let mut found = BTreeSet::new();
    for_each_permutation(p.n(), |sigma| {
        if preserves(p, sigma) {
            found.insert(Permutation::new(sigma.to_vec()).expect("heap permutation"));
        }
    });
    Ok(PermutationGroup::from_closed_elements(p.n(), found))
}

/// Intersection of the automorphism groups of every pattern in `phi`.
pub fn symmetry_group(phi: &PatternSequence) -> Result<PermutationGroup> {
    check_bound(phi.n())?;
    let n = phi.n();
    let mut found = BTreeSet::new();
    for_each_permutation(n, |sigma| {
        if phi.patterns.iter().all(|p| preserves(p, sigma)) {
            found.insert(Permutation::new(sigma.to_vec()).expect("heap permutation"));
        }
    });
    Ok(PermutationGroup::from_closed_elements(n, found))
}

/// Pattern constructors addressable from configuration strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PatternKind {
    Full,
    /// `N(i) = {j : |j - i| <= w}`.
    Window(usize),
    /// `N(i) = {(i + j) mod n : |j| <= w}`, with `1 <= w <= floor((n-1)/2) - 1`.
    Circulant(usize),
    /// `N(i) = {i, i+1, .., i+w} mod n`, same bound on `w`.
    CirculantOneSide(usize),
    /// Token 0 attends everything; the rest attend themselves, their ring
    /// neighbours among `1..n`, and token 0.
    Star,
    /// Local band `|i - j| < s` plus every `s`-th position.
    Strided(usize),
    /// Blocks of size `s` plus the last position of every block.
    Fixed(usize),
    /// Self plus each other position with probability `p`.
    Random { p: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kind: PatternKind,
    /// `+global:k`: the first `k` tokens attend and are attended by all.
    pub global: usize,
}

impl PatternSpec {
    pub fn new(kind: PatternKind) -> Self {
        Self { kind, global: 0 }
    }
}

pub const PATTERN_SPEC_FORMS: &str =
    "full, window:w, circulant:w, circulant_oneside:w, star, strided:s, random:p,seed (optional +global:k suffix)";

/// Largest circulant half-width satisfying `w <= floor((n-1)/2) - 1`.
pub fn circulant_max_width(n: usize) -> Option<usize> {
    ((n.saturating_sub(1)) / 2).checked_sub(1)
}

fn check_circulant(n: usize, w: usize) -> Result<()> {
    match circulant_max_width(n) {
        Some(max) if (1..=max).contains(&w) => Ok(()),
        Some(max) if max >= 1 => Err(invalid(format!(
            "circulant width w = {w} must satisfy 1 <= w <= floor((n-1)/2) - 1 = {max} for n = {n}"
        ))),
        _ => Err(invalid(format!(
            "circulant width w = {w}: n = {n} is too small for the constraint 1 <= w <= floor((n-1)/2) - 1"
        ))),
    }
}

fn build_kind(kind: &PatternKind, n: usize) -> Result<Vec<BTreeSet<usize>>> {
    let sets: Vec<BTreeSet<usize>> = match *kind {
        PatternKind::Full => (0..n).map(|_| (0..n).collect()).collect(),
        PatternKind::Window(w) => (0..n)
            .map(|i| (i.saturating_sub(w)..=(i + w).min(n - 1)).collect())
            .collect(),
        PatternKind::Circulant(w) => {
            check_circulant(n, w)?;
            (0..n).map(|i| (0..=2 * w).map(|k| (i + n * w + k - w) % n).collect()).collect()
        }
        PatternKind::CirculantOneSide(w) => {
            check_circulant(n, w)?;
            (0..n).map(|i| (0..=w).map(|k| (i + k) % n).collect()).collect()
        }
        PatternKind::Star => {
            if n < 2 {
                return Err(invalid("star pattern needs n >= 2"));
            }
            let ring = n - 1;
            let mut sets = vec![(0..n).collect::<BTreeSet<usize>>()];
            for i in 1..n {
                let r = i - 1;
                let pred = 1 + (r + ring - 1) % ring;
                let succ = 1 + (r + 1) % ring;
                sets.push([0, i, pred, succ].into_iter().collect());
            }
            sets
        }
        PatternKind::Strided(s) => {
            if s == 0 {
                return Err(invalid("stride must be >= 1"));
            }
            (0..n)
                .map(|i| (0..n).filter(|&j| i.abs_diff(j) < s || i.abs_diff(j) % s == 0).collect())
                .collect()
        }
        PatternKind::Fixed(s) => {
            if s == 0 {
                return Err(invalid("block size must be >= 1"));
            }
            (0..n)
                .map(|i| (0..n).filter(|&j| j / s == i / s || j % s == s - 1).collect())
                .collect()
        }
        PatternKind::Random { p, seed } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("random pattern probability {p} outside [0, 1]")));
            }
            let mut rng = stream(seed, "random-pattern", n as u64);
            (0..n)
                .map(|i| (0..n).filter(|&j| j == i || rng.random::<f64>() < p).collect())
                .collect()
        }
    };
    Ok(sets)
}

/// Builds a single pattern on `n` positions.
pub fn make_pattern(spec: &PatternSpec, n: usize) -> Result<SparsityPattern> {
    if n == 0 {
        return Err(invalid("pattern needs n >= 1"));
    }
    let mut sets = build_kind(&spec.kind, n)?;
    if spec.global > n {
        return Err(invalid(format!("{} global tokens exceed n = {n}", spec.global)));
    }
    for (i, set) in sets.iter_mut().enumerate() {
        if i < spec.global {
            set.extend(0..n);
        } else {
            set.extend(0..spec.global);
        }
    }
    SparsityPattern::new(sets)
}

/// Expands one sequence element; `strided:s` yields the strided/fixed pair.
pub fn make_layers(spec: &PatternSpec, n: usize) -> Result<Vec<SparsityPattern>> {
    match spec.kind {
        PatternKind::Strided(s) => {
            let fixed = PatternSpec { kind: PatternKind::Fixed(s), global: spec.global };
            Ok(vec![make_pattern(spec, n)?, make_pattern(&fixed, n)?])
        }
        _ => Ok(vec![make_pattern(spec, n)?]),
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Parse(format!("expected an integer {what}, got '{s}'")))
}

/// Parses one pattern spec such as `window:2` or `circulant:1+global:1`.
pub fn parse_pattern_spec(text: &str) -> Result<PatternSpec> {
    let text = text.trim();
    let (body, global) = match text.split_once("+global:") {
        Some((b, k)) => (b, parse_usize(k, "global count")?),
        None => (text, 0),
    };
    let (name, arg) = match body.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (body, None),
    };
    let need = |what: &str| arg.ok_or_else(|| Error::Parse(format!("pattern '{name}' needs {what}")));
    let kind = match name {
        "full" => PatternKind::Full,
        "window" => PatternKind::Window(parse_usize(need("a width")?, "width")?),
        "circulant" => PatternKind::Circulant(parse_usize(need("a width")?, "width")?),
        "circulant_oneside" => PatternKind::CirculantOneSide(parse_usize(need("a width")?, "width")?),
        "star" => PatternKind::Star,
        "strided" => PatternKind::Strided(parse_usize(need("a stride")?, "stride")?),
        "fixed" => PatternKind::Fixed(parse_usize(need("a block size")?, "block size")?),
        "random" => {
            let a = need("p,seed")?;
            let (p, seed) = a
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("random pattern expects 'random:p,seed', got '{text}'")))?;
            PatternKind::Random {
                p: p.trim().parse().map_err(|_| Error::Parse(format!("bad probability '{p}'")))?,
                seed: seed.trim().parse().map_err(|_| Error::Parse(format!("bad seed '{seed}'")))?,
            }
        }
        other => {
            return Err(Error::Parse(format!("unknown pattern '{other}'; accepted forms: {PATTERN_SPEC_FORMS}")))
        }
    };
    if arg.is_some() && matches!(kind, PatternKind::Full | PatternKind::Star) {
        return Err(Error::Parse(format!("pattern '{name}' takes no argument")));
    }
    Ok(PatternSpec { kind, global })
}

/// Parses a comma-joined sequence with optional `*k` repetition suffixes,
/// e.g. `window:1*3,full` or `random:0.3,7*2`.
pub fn parse_sequence_spec(text: &str) -> Result<Vec<(PatternSpec, usize)>> {
    // `random:p,seed` contains a comma; fragments that do not start with a
    // letter are glued back onto the previous element.
    let mut items: Vec<String> = Vec::new();
    for frag in text.split(',') {
        let frag = frag.trim();
        if frag.is_empty() {
            return Err(Error::Parse(format!("empty element in pattern sequence '{text}'")));
        }
        if frag.starts_with(|c: char| c.is_ascii_alphabetic()) || items.is_empty() {
            items.push(frag.to_string());
        } else {
            let last = items.last_mut().expect("nonempty");
            last.push(',');
            last.push_str(frag);
        }
    }
    items
        .iter()
        .map(|item| {
            let (spec, reps) = match item.rsplit_once('*') {
                Some((s, r)) => (s, parse_usize(r, "repetition count")?),
                None => (item.as_str(), 1),
            };
            if reps == 0 {
                return Err(Error::Parse(format!("repetition count must be >= 1 in '{item}'")));
            }
            Ok((parse_pattern_spec(spec)?, reps))
        })
        .collect()
}

pub fn make_sequence(text: &str, n: usize) -> Result<PatternSequence> {
    let mut layers = Vec::new();
    for (spec, reps) in parse_sequence_spec(text)? {
        let one = make_layers(&spec, n)?;
        for _ in 0..reps {
            layers.extend(one.iter().cloned());
        }
    }
    PatternSequence::new(layers)
}
