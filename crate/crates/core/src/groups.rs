//! Permutations of token positions and explicitly enumerated subgroups of `S_n`.
//!
//! Groups are stored as their full sorted element list. All uses here need
//! membership queries or exhaustive orbit scans at `n <= 8`, where `8! = 40320`
//! elements is still tiny.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::rng::LabRng;
use crate::tokens::TokenMatrix;

/// Largest `n` for which groups are enumerated.
pub const MAX_ENUM_N: usize = 8;

/// Default cap on the number of elements `generate` will produce (`8!`).
pub const DEFAULT_ELEMENT_CAP: usize = 40320;

/// A bijection on `{0, .., n-1}`; `mapping[i]` is the image of `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        if n == 0 {
            return Err(Error::InvalidPermutation("permutation of zero points".into()));
        }
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::InvalidPermutation(format!("{mapping:?} is not a bijection on 0..{n}")));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self { mapping: (0..n).collect() }
    }

    /// The cycle `0 -> 1 -> .. -> n-1 -> 0`.
    pub fn rotation(n: usize) -> Self {
        Self { mapping: (0..n).map(|i| (i + 1) % n).collect() }
    }

    /// `i -> n-1-i`.
    pub fn reflection(n: usize) -> Self {
        Self { mapping: (0..n).map(|i| n - 1 - i).collect() }
    }

    pub fn transposition(n: usize, a: usize, b: usize) -> Result<Self> {
        if a >= n || b >= n {
            return Err(Error::InvalidPermutation(format!("transposition ({a} {b}) out of range for n={n}")));
        }
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.swap(a, b);
        Ok(Self { mapping })
    }

    /// Builds a permutation from 0-based disjoint cycles.
    pub fn from_cycles(n: usize, cycles: &[Vec<usize>]) -> Result<Self> {
        let mut mapping: Vec<usize> = (0..n).collect();
        let mut touched = vec![false; n];
        for cycle in cycles {
            for (k, &a) in cycle.iter().enumerate() {
                if a >= n || touched[a] {
                    return Err(Error::InvalidPermutation(format!("cycles {cycles:?} are not disjoint cycles on 0..{n}")));
                }
                touched[a] = true;
                mapping[a] = cycle[(k + 1) % cycle.len()];
            }
        }
        Self::new(mapping)
    }

    pub fn n(&self) -> usize {
        self.mapping.len()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Permutation {
        debug_assert_eq!(self.n(), other.n());
        Permutation { mapping: other.mapping.iter().map(|&j| self.mapping[j]).collect() }
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.n()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }
}

impl fmt::Display for Permutation {
    /// 1-based cycle notation, fixed points omitted; identity prints as `()`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut seen = vec![false; self.n()];
        let mut wrote = false;
        for start in 0..self.n() {
            if seen[start] || self.mapping[start] == start {
                continue;
            }
            let mut cyc = Vec::new();
            let mut i = start;
            while !seen[i] {
                seen[i] = true;
                cyc.push((i + 1).to_string());
                i = self.mapping[i];
            }
            write!(f, "({})", cyc.join(","))?;
            wrote = true;
        }
        if !wrote {
            write!(f, "()")?;
        }
        Ok(())
    }
}

/// Parses 1-based cycle notation such as `(1,2,3)(4,5)` (spaces also separate).
pub fn parse_cycles(n: usize, text: &str) -> Result<Permutation> {
    let text = text.trim();
    if text.is_empty() || text == "()" {
        return Ok(Permutation::identity(n));
    }
    let mut cycles = Vec::new();
    for chunk in text.split(')') {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        let body = chunk
            .strip_prefix('(')
            .ok_or_else(|| Error::Parse(format!("expected '(' in cycle notation '{text}'")))?;
        let cycle = body
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .ok()
                    .filter(|&v| v >= 1)
                    .map(|v| v - 1)
                    .ok_or_else(|| Error::Parse(format!("bad index '{s}' in '{text}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        cycles.push(cycle);
    }
    Permutation::from_cycles(n, &cycles)
}

/// Permutes columns: output column `sigma(i)` is input column `i`.
pub fn act(sigma: &Permutation, x: &TokenMatrix) -> Result<TokenMatrix> {
    if sigma.n() != x.n() {
        return Err(shape(format!("permutation on {} points acting on {} tokens", sigma.n(), x.n())));
    }
    let mut out = x.clone();
    for i in 0..x.n() {
        out.set_column(sigma.apply(i), &x.column(i).into_owned());
    }
    Ok(out)
}

/// A finite permutation group with its elements listed in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationGroup {
    n: usize,
    elements: Vec<Permutation>,
    generators: Vec<Permutation>,
}

impl PermutationGroup {
    pub fn trivial(n: usize) -> Self {
        Self { n, elements: vec![Permutation::identity(n)], generators: Vec::new() }
    }

    pub fn symmetric(n: usize) -> Result<Self> {
        let mut gens = vec![Permutation::rotation(n)];
        if n >= 2 {
            gens.push(Permutation::transposition(n, 0, 1)?);
        }
        generate(n, &gens)
    }

    pub fn cyclic(n: usize) -> Result<Self> {
        generate(n, &[Permutation::rotation(n)])
    }

    pub fn dihedral(n: usize) -> Result<Self> {
        generate(n, &[Permutation::rotation(n), Permutation::reflection(n)])
    }

    /// Parses a named constructor: `trivial`, `symmetric`, `cyclic`,
    /// `dihedral`, or `generated:<perm>;<perm>;..` with 1-based cycles.
    pub fn from_name(name: &str, n: usize) -> Result<Self> {
        match name.trim() {
            "trivial" => Ok(Self::trivial(n)),
            "symmetric" => Self::symmetric(n),
            "cyclic" => Self::cyclic(n),
            "dihedral" => Self::dihedral(n),
            other => {
                let list = other.strip_prefix("generated:").ok_or_else(|| {
                    Error::Parse(format!(
                        "unknown group '{other}'; expected trivial, symmetric, cyclic, dihedral or generated:<perm list>"
                    ))
                })?;
                let gens = list
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_cycles(n, s))
                    .collect::<Result<Vec<_>>>()?;
                generate(n, &gens)
            }
        }
    }

    /// Builds a group from an element list that is already known to be closed.
    /// Generators are chosen greedily in lexicographic order.
    pub(crate) fn from_closed_elements(n: usize, elements: BTreeSet<Permutation>) -> Self {
        let mut generators = Vec::new();
        let mut reached: BTreeSet<Permutation> = BTreeSet::from([Permutation::identity(n)]);
        for e in &elements {
            if !reached.contains(e) {
                generators.push(e.clone());
                reached = closure(n, &generators, usize::MAX).expect("uncapped closure");
            }
        }
        Self { n, elements: elements.into_iter().collect(), generators }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[Permutation] {
        &self.elements
    }

    pub fn generators(&self) -> &[Permutation] {
        &self.generators
    }

    pub fn contains(&self, sigma: &Permutation) -> bool {
        self.elements.binary_search(sigma).is_ok()
    }

    pub fn intersect(&self, other: &PermutationGroup) -> Result<PermutationGroup> {
        if self.n != other.n {
            return Err(shape(format!("intersecting groups on {} and {} points", self.n, other.n)));
        }
        let common: BTreeSet<Permutation> = self.elements.iter().filter(|e| other.contains(e)).cloned().collect();
        Ok(Self::from_closed_elements(self.n, common))
    }

    /// Uniform draw from the stored elements.
    pub fn sample(&self, rng: &mut LabRng) -> &Permutation {
        &self.elements[rng.random_range(0..self.elements.len())]
    }
}

fn closure(n: usize, gens: &[Permutation], cap: usize) -> Result<BTreeSet<Permutation>> {
    let id = Permutation::identity(n);
    let mut seen = BTreeSet::from([id.clone()]);
    let mut queue = VecDeque::from([id]);
    while let Some(p) = queue.pop_front() {
        for g in gens {
            let q = g.compose(&p);
            if !seen.contains(&q) {
                if seen.len() >= cap {
                    return Err(Error::BoundExceeded(format!("group closure exceeds {cap} elements")));
                }
                seen.insert(q.clone());
                queue.push_back(q);
            }
        }
    }
    Ok(seen)
}

/// Smallest subgroup of `S_n` containing `generators` (breadth-first closure).
pub fn generate(n: usize, generators: &[Permutation]) -> Result<PermutationGroup> {
    generate_with_cap(n, generators, DEFAULT_ELEMENT_CAP)
}

pub fn generate_with_cap(n: usize, generators: &[Permutation], cap: usize) -> Result<PermutationGroup> {
    if n == 0 {
        return Err(Error::InvalidPermutation("groups need n >= 1".into()));
    }
    if n > MAX_ENUM_N {
        return Err(Error::BoundExceeded(format!("n = {n} exceeds the enumeration bound {MAX_ENUM_N}")));
    }
    if let Some(g) = generators.iter().find(|g| g.n() != n) {
        return Err(Error::InvalidPermutation(format!("generator {g} acts on {} points, expected {n}", g.n())));
    }
    let elements = closure(n, generators, cap)?;
    Ok(PermutationGroup {
        n,
        elements: elements.into_iter().collect(),
        generators: generators.to_vec(),
    })
}

/// True iff some `sigma` in `g` brings `x` within Frobenius distance `tol` of `y`.
pub fn same_orbit(g: &PermutationGroup, x: &TokenMatrix, y: &TokenMatrix, tol: f64) -> Result<bool> {
    if x.d() != y.d() || x.n() != y.n() {
        return Err(shape(format!("comparing {}x{} with {}x{}", x.d(), x.n(), y.d(), y.n())));
    }
    if g.n() != x.n() {
        return Err(shape(format!("group on {} points, matrices with {} tokens", g.n(), x.n())));
    }
    for sigma in g.elements() {
        if act(sigma, x)?.frobenius_distance(y) <= tol {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub trials: usize,
    /// max ‖f(σX) − σf(X)‖_F over trials.
    pub max_violation: f64,
    /// Same, divided by `max(1, ‖f(X)‖_F)` per trial.
    pub max_relative_violation: f64,
    pub pass: bool,
}

/// Samples `trials` pairs `(σ, X)` with `σ` uniform in `g` and `X` standard
/// normal of shape `d x g.n()`, and measures the equivariance defect of `f`.
/// `pass` compares the absolute `max_violation` with `tol`.
pub fn check_equivariance<F>(
    g: &PermutationGroup,
    d: usize,
    mut f: F,
    trials: usize,
    tol: f64,
    rng: &mut LabRng,
) -> Result<EquivarianceReport>
where
    F: FnMut(&TokenMatrix) -> Result<TokenMatrix>,
{
    if trials == 0 {
        return Err(Error::InvalidParameter("equivariance check needs at least one trial".into()));
    }
    let mut max_violation: f64 = 0.0;
    let mut max_relative: f64 = 0.0;
    for t in 0..trials {
        let sigma = g.sample(rng).clone();
        let x = TokenMatrix::random_normal(d, g.n(), rng);
        let fx = f(&x).map_err(|e| e.context(format!("equivariance trial {t}")))?;
        let fsx = f(&act(&sigma, &x)?).map_err(|e| e.context(format!("equivariance trial {t}, sigma {sigma}")))?;
        let v = fsx.frobenius_distance(&act(&sigma, &fx)?);
        max_violation = max_violation.max(v);
        max_relative = max_relative.max(v / fx.as_matrix().norm().max(1.0));
    }
    Ok(EquivarianceReport {
        trials,
        max_violation,
        max_relative_violation: max_relative,
        pass: max_violation <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn factorial(n: usize) -> usize {
        (1..=n).product()
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        assert!(Permutation::new(vec![]).is_err());
        assert!(Permutation::new(vec![1, 0]).is_ok());
    }

    #[test]
    fn identity_action_is_noop() {
        let mut rng = stream(1, "act", 0);
        let x = TokenMatrix::random_normal(3, 4, &mut rng);
        assert_eq!(act(&Permutation::identity(4), &x).unwrap(), x);
    }

    #[test]
    fn transposition_swaps_columns() {
        let x = TokenMatrix::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = act(&Permutation::transposition(2, 0, 1).unwrap(), &x).unwrap();
        assert_eq!(y, TokenMatrix::from_columns(&[vec![3.0, 4.0], vec![1.0, 2.0]]).unwrap());
    }

    #[test]
    fn act_rejects_mismatched_sizes() {
        let x = TokenMatrix::zeros(2, 3);
        assert!(act(&Permutation::identity(4), &x).is_err());
    }

    #[test]
    fn act_places_column_i_at_sigma_i() {
        let x = TokenMatrix::from_columns(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let sigma = Permutation::new(vec![2, 0, 1]).unwrap();
        let y = act(&sigma, &x).unwrap();
        for i in 0..3 {
            assert_eq!(y.column(sigma.apply(i))[0], x.column(i)[0]);
        }
    }

    #[test]
    fn group_orders() {
        assert_eq!(generate(4, &[]).unwrap().order(), 1);
        assert_eq!(generate(5, &[Permutation::rotation(5)]).unwrap().order(), 5);
        let refl = parse_cycles(5, "(1,5)(2,4)").unwrap();
        assert_eq!(generate(5, &[Permutation::rotation(5), refl]).unwrap().order(), 10);
        for n in 1..=6 {
            assert_eq!(PermutationGroup::symmetric(n).unwrap().order(), factorial(n));
        }
        assert_eq!(PermutationGroup::symmetric(8).unwrap().order(), 40320);
    }

    #[test]
    fn generate_rejects_bad_inputs() {
        assert!(matches!(generate(9, &[]), Err(Error::BoundExceeded(_))));
        assert!(matches!(generate(4, &[Permutation::identity(3)]), Err(Error::InvalidPermutation(_))));
        assert!(matches!(
            generate_with_cap(5, &[Permutation::rotation(5), Permutation::transposition(5, 0, 1).unwrap()], 100),
            Err(Error::BoundExceeded(_))
        ));
    }

    #[test]
    fn group_axioms_and_lagrange() {
        let groups = [
            PermutationGroup::trivial(5),
            PermutationGroup::cyclic(6).unwrap(),
            PermutationGroup::dihedral(7).unwrap(),
            PermutationGroup::symmetric(4).unwrap(),
            PermutationGroup::from_name("generated:(1,2)(3,4);(1,3)(2,4)", 4).unwrap(),
        ];
        for g in &groups {
            assert!(g.contains(&Permutation::identity(g.n())));
            for a in g.elements() {
                assert!(g.contains(&a.inverse()));
                for b in g.elements() {
                    assert!(g.contains(&a.compose(b)));
                }
            }
            assert_eq!(factorial(g.n()) % g.order(), 0);
            assert!(g.elements().windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(groups[4].order(), 4);
    }

    #[test]
    fn generate_is_idempotent() {
        let g = PermutationGroup::dihedral(6).unwrap();
        let again = generate(6, g.elements()).unwrap();
        assert_eq!(again.order(), g.order());
        assert_eq!(again.elements(), g.elements());
    }

    #[test]
    fn from_name_errors() {
        assert!(PermutationGroup::from_name("alternating", 4).is_err());
        assert!(PermutationGroup::from_name("generated:(1,9)", 4).is_err());
        assert!(PermutationGroup::from_name("generated:(1,2)(2,3)", 4).is_err());
    }

    #[test]
    fn display_round_trips_through_parser() {
        let p = Permutation::new(vec![1, 2, 0, 4, 3]).unwrap();
        assert_eq!(p.to_string(), "(1,2,3)(4,5)");
        assert_eq!(parse_cycles(5, &p.to_string()).unwrap(), p);
        assert_eq!(Permutation::identity(3).to_string(), "()");
    }

    #[test]
    fn orbit_membership() {
        let mut rng = stream(2, "orbit", 0);
        let x = TokenMatrix::random_normal(2, 3, &mut rng);
        let s3 = PermutationGroup::symmetric(3).unwrap();
        let y = act(&Permutation::transposition(3, 0, 1).unwrap(), &x).unwrap();
        assert!(same_orbit(&s3, &x, &y, 1e-12).unwrap());
        let trivial = PermutationGroup::trivial(3);
        assert!(!same_orbit(&trivial, &x, &y, 1e-12).unwrap());

        let c4 = PermutationGroup::cyclic(4).unwrap();
        let x = TokenMatrix::random_normal(2, 4, &mut rng);
        let shifted = x.map(|v| v + 1.0);
        // Oracle: enumerate the four rotations explicitly.
        let mut closest = f64::INFINITY;
        let mut rho = Permutation::identity(4);
        for _ in 0..4 {
            closest = closest.min(act(&rho, &x).unwrap().frobenius_distance(&shifted));
            rho = Permutation::rotation(4).compose(&rho);
        }
        assert!(closest > 1e-6);
        assert!(!same_orbit(&c4, &x, &shifted, 1e-9).unwrap());
    }

    #[test]
    fn equivariance_of_identity_and_tokenwise_maps() {
        let g = PermutationGroup::symmetric(4).unwrap();
        let mut rng = stream(3, "eq", 0);
        let rep = check_equivariance(&g, 3, |x| Ok(x.clone()), 50, 0.0, &mut rng).unwrap();
        assert_eq!(rep.max_violation, 0.0);
        assert!(rep.pass);
        let rep = check_equivariance(&g, 3, |x| Ok(x.map(|v| v.tanh() * 2.0 - v)), 50, 0.0, &mut rng).unwrap();
        assert!(rep.pass);
    }

    #[test]
    fn equivariance_detects_position_dependent_maps() {
        let g = PermutationGroup::symmetric(3).unwrap();
        let mut rng = stream(4, "eq", 0);
        let f = |x: &TokenMatrix| {
            let mut y = x.clone();
            y.set_column(0, &(x.column(0) * 2.0));
            Ok(y)
        };
        let rep = check_equivariance(&g, 2, f, 50, 1e-9, &mut rng).unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn equivariance_propagates_errors() {
        let g = PermutationGroup::trivial(2);
        let mut rng = stream(5, "eq", 0);
        let err = check_equivariance(&g, 2, |_| Err(Error::NonFinite("boom".into())), 3, 0.0, &mut rng).unwrap_err();
        assert!(err.to_string().contains("trial 0"));
        assert!(check_equivariance(&g, 2, |x| Ok(x.clone()), 0, 0.0, &mut rng).is_err());
    }

    fn arb_perm(n: usize) -> impl Strategy<Value = Permutation> {
        Just((0..n).collect::<Vec<usize>>())
            .prop_shuffle()
            .prop_map(|m| Permutation::new(m).unwrap())
    }

    proptest! {
        #[test]
        fn act_is_a_group_action(s in arb_perm(5), t in arb_perm(5), seed in 0u64..1000) {
            let x = TokenMatrix::random_normal(2, 5, &mut stream(seed, "action", 0));
            let lhs = act(&s.compose(&t), &x).unwrap();
            let rhs = act(&s, &act(&t, &x).unwrap()).unwrap();
            prop_assert_eq!(lhs, rhs);
            prop_assert!(s.compose(&s.inverse()).is_identity());
        }

        #[test]
        fn same_orbit_is_an_equivalence(s in arb_perm(4), t in arb_perm(4), seed in 0u64..1000) {
            let g = PermutationGroup::dihedral(4).unwrap();
            let x = TokenMatrix::random_normal(2, 4, &mut stream(seed, "orbit-eq", 0));
            let y = act(&s, &x).unwrap();
            let z = act(&t, &y).unwrap();
            let tol = 1e-9;
            prop_assert!(same_orbit(&g, &x, &x, tol).unwrap());
            prop_assert_eq!(same_orbit(&g, &x, &y, tol).unwrap(), same_orbit(&g, &y, &x, tol).unwrap());
            if same_orbit(&g, &x, &y, tol).unwrap() && same_orbit(&g, &y, &z, tol).unwrap() {
                prop_assert!(same_orbit(&g, &x, &z, tol).unwrap());
            }
        }
    }
}
