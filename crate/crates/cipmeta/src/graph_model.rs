//! Site geometry of the underlying random walk and the metastable hierarchy
//! it induces on the inclusion process.
//!
//! Sites are dense indices `0..n`. The stationary measure `m` is scaled so
//! that its maximum equals one; the maximizers form `S⋆`, the rest `S₀`.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Membership tolerance for `S⋆`: `m_x ≥ 1 − STAR_TOL`.
pub const STAR_TOL: f64 = 1e-12;
/// Relative tolerance for detailed balance checks on user input.
pub const BALANCE_TOL: f64 = 1e-10;
/// Absolute tolerance of the adaptive Simpson rule used for `ℜ_ij`.
pub const RIJ_QUAD_TOL: f64 = 1e-10;
/// Maximal recursion depth of the adaptive Simpson rule.
pub const RIJ_QUAD_DEPTH: u32 = 40;

/// Graph description as read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSpec {
    pub sites: Vec<String>,
    pub rates: Vec<(String, String, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<Vec<(String, f64)>>,
}

/// Reversible single-particle walk on a finite set of sites.
#[derive(Debug, Clone)]
pub struct SiteGraph {
    names: Vec<String>,
    rates: Vec<f64>,
    measure: Vec<f64>,
}

impl SiteGraph {
    /// Builds the graph and computes its stationary measure.
    pub fn new(names: Vec<String>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let rates = Self::rate_table(names.len(), edges)?;
        check_irreducible(names.len(), &rates)?;
        let measure = stationary_measure(names.len(), &rates)?;
        let g = SiteGraph { names, rates, measure };
        g.check_balance()?;
        Ok(g)
    }

    /// Builds the graph from rates and a user-supplied measure, which is
    /// validated against detailed balance.
    pub fn with_measure(
        names: Vec<String>,
        edges: &[(usize, usize, f64)],
        measure: &[f64],
    ) -> Result<Self> {
        let n = names.len();
        if measure.len() != n {
            return Err(Error::InvalidInput(format!(
                "measure has {} entries for {} sites",
                measure.len(),
                n
            )));
        }
        if measure.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidInput("measure entries must be positive".into()));
        }
        let rates = Self::rate_table(n, edges)?;
        check_irreducible(n, &rates)?;
        let max = measure.iter().cloned().fold(0.0, f64::max);
        let measure = measure.iter().map(|m| m / max).collect();
        let g = SiteGraph { names, rates, measure };
        g.check_balance()?;
        Ok(g)
    }

    /// Builds the graph from a parsed JSON specification.
    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        let index: BTreeMap<&str, usize> = spec
            .sites
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if index.len() != spec.sites.len() {
            return Err(Error::Parse("duplicate site names".into()));
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Parse(format!("unknown site '{s}'")))
        };
        let edges = spec
            .rates
            .iter()
            .map(|(x, y, r)| Ok((lookup(x)?, lookup(y)?, *r)))
            .collect::<Result<Vec<_>>>()?;
        match &spec.measure {
            None => Self::new(spec.sites.clone(), &edges),
            Some(entries) => {
                let mut m = vec![f64::NAN; spec.sites.len()];
                for (s, v) in entries {
                    m[lookup(s)?] = *v;
                }
                if m.iter().any(|v| v.is_nan()) {
                    return Err(Error::Parse("measure does not cover every site".into()));
                }
                Self::with_measure(spec.sites.clone(), &edges, &m)
            }
        }
    }

    /// Parses the JSON graph format.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GraphSpec =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_spec(&spec)
    }

    /// Serializable description of this graph, including the measure.
    pub fn to_spec(&self) -> GraphSpec {
        let n = self.len();
        let mut rates = Vec::new();
        for x in 0..n {
            for y in 0..n {
                if self.rate(x, y) > 0.0 {
                    rates.push((self.names[x].clone(), self.names[y].clone(), self.rate(x, y)));
                }
            }
        }
        GraphSpec {
            sites: self.names.clone(),
            rates,
            measure: Some(
                (0..n)
                    .map(|x| (self.names[x].clone(), self.measure[x]))
                    .collect(),
            ),
        }
    }

    fn rate_table(n: usize, edges: &[(usize, usize, f64)]) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::InvalidInput("graph has no sites".into()));
        }
        let mut rates = vec![0.0; n * n];
        for &(x, y, r) in edges {
            if x >= n || y >= n {
                return Err(Error::InvalidInput(format!("edge ({x}, {y}) out of range")));
            }
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::InvalidInput(format!("rate {r} on ({x}, {y}) is not a nonnegative number")));
            }
            if x == y {
                if r != 0.0 {
                    return Err(Error::InvalidInput(format!("nonzero diagonal rate at {x}")));
                }
                continue;
            }
            rates[x * n + y] = r;
        }
        Ok(rates)
    }

    fn check_balance(&self) -> Result<()> {
        let n = self.len();
        for x in 0..n {
            for y in (x + 1)..n {
                let a = self.measure[x] * self.rate(x, y);
                let b = self.measure[y] * self.rate(y, x);
                let scale = a.abs().max(b.abs());
                if scale > 0.0 && (a - b).abs() > BALANCE_TOL * scale {
                    return Err(Error::NotReversible { x, y, residual: (a - b).abs() / scale });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, x: usize) -> &str {
        &self.names[x]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|s| s == name)
    }

    /// Jump rate `r(x, y)`.
    pub fn rate(&self, x: usize, y: usize) -> f64 {
        self.rates[x * self.len() + y]
    }

    /// Max-normalized stationary measure `m_x`.
    pub fn m(&self, x: usize) -> f64 {
        self.measure[x]
    }

    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    /// Conductance `c_xy = m_x r(x, y)`, symmetrized.
    pub fn conductance(&self, x: usize, y: usize) -> f64 {
        0.5 * (self.measure[x] * self.rate(x, y) + self.measure[y] * self.rate(y, x))
    }

    pub fn adjacent(&self, x: usize, y: usize) -> bool {
        x != y && self.rate(x, y) > 0.0
    }

    /// Neighbours of `x` in increasing index order.
    pub fn neighbors(&self, x: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&y| self.adjacent(x, y))
    }

    /// Directed positive-rate edges `(x, y, r)`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.len();
        let mut out = Vec::new();
        for x in 0..n {
            for y in 0..n {
                let r = self.rate(x, y);
                if r > 0.0 {
                    out.push((x, y, r));
                }
            }
        }
        out
    }

    /// Sites with `m_x ≥ 1 − STAR_TOL`.
    pub fn s_star(&self) -> Vec<usize> {
        (0..self.len()).filter(|&x| self.is_star(x)).collect()
    }

    pub fn s_zero(&self) -> Vec<usize> {
        (0..self.len()).filter(|&x| !self.is_star(x)).collect()
    }

    pub fn is_star(&self, x: usize) -> bool {
        self.measure[x] >= 1.0 - STAR_TOL
    }

    /// `max_{a ∈ S₀} m_a`, or `None` when `S₀` is empty.
    pub fn m_star(&self) -> Option<f64> {
        self.s_zero().into_iter().map(|a| self.m(a)).reduce(f64::max)
    }

    /// `min_{a ∈ S₀} m_a`, or `None` when `S₀` is empty.
    pub fn m_star_star(&self) -> Option<f64> {
        self.s_zero().into_iter().map(|a| self.m(a)).reduce(f64::min)
    }

    /// Graph distances from `x` (`None` when unreachable).
    pub fn distances_from(&self, x: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        dist[x] = Some(0);
        let mut queue = VecDeque::from([x]);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v].unwrap();
            for w in self.neighbors(v) {
                if dist[w].is_none() {
                    dist[w] = Some(dv + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn distance(&self, x: usize, y: usize) -> Option<usize> {
        self.distances_from(x)[y]
    }

    /// Shortest path from `x` to `y`; among shortest paths the
    /// lexicographically smallest sequence of site indices is returned.
    pub fn shortest_path(&self, x: usize, y: usize) -> Result<Vec<usize>> {
        let to_y = self.distances_from(y);
        let mut d = to_y[x].ok_or(Error::NoPath(x, y))?;
        let mut path = vec![x];
        let mut v = x;
        while d > 0 {
            v = self
                .neighbors(v)
                .find(|&w| to_y[w] == Some(d - 1))
                .ok_or(Error::NoPath(x, y))?;
            path.push(v);
            d -= 1;
        }
        Ok(path)
    }

    /// Largest relative residual of `Σ_x m_x r(x, y) = m_y Σ_z r(y, z)`.
    pub fn balance_residual(&self) -> f64 {
        let n = self.len();
        let max_rate = self.rates.iter().cloned().fold(0.0, f64::max);
        (0..n)
            .map(|y| {
                let inflow: f64 = (0..n).map(|x| self.m(x) * self.rate(x, y)).sum();
                let outflow: f64 = self.m(y) * (0..n).map(|z| self.rate(y, z)).sum::<f64>();
                (inflow - outflow).abs() / max_rate
            })
            .fold(0.0, f64::max)
    }
}

fn check_irreducible(n: usize, rates: &[f64]) -> Result<()> {
    let reach = |start: usize, forward: bool| {
        let mut seen = vec![false; n];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for w in 0..n {
                let r = if forward { rates[v * n + w] } else { rates[w * n + v] };
                if r > 0.0 && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    };
    let mut class = vec![usize::MAX; n];
    let mut classes = 0;
    for v in 0..n {
        if class[v] != usize::MAX {
            continue;
        }
        let fwd = reach(v, true);
        let bwd = reach(v, false);
        for w in 0..n {
            if fwd[w] && bwd[w] {
                class[w] = classes;
            }
        }
        classes += 1;
    }
    if classes > 1 {
        return Err(Error::NotIrreducible { classes });
    }
    Ok(())
}

/// Solves `m Q = 0`, `Σ m = 1` by LU with the normalization row appended,
/// then rescales to unit maximum.
fn stationary_measure(n: usize, rates: &[f64]) -> Result<Vec<f64>> {
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    for x in 0..n {
        let out: f64 = (0..n).map(|y| rates[x * n + y]).sum();
        for y in 0..n {
            // Row y of Qᵀ.
            a[(y, x)] = if x == y { -out } else { rates[x * n + y] };
        }
    }
    for x in 0..n {
        a[(n - 1, x)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let m = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::SingularSystem("stationary balance equations".into()))?;
    let max = m.iter().cloned().fold(f64::MIN, f64::max);
    if !(max > 0.0) || m.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::SingularSystem("stationary measure is not positive".into()));
    }
    Ok(m.iter().map(|v| v / max).collect())
}

/// Three-level metastable decomposition of `S⋆`.
#[derive(Debug, Clone, Serialize)]
pub struct MetastableHierarchy {
    pub s_star: Vec<usize>,
    pub s_zero: Vec<usize>,
    /// Connected components of the positive-rate graph restricted to `S⋆`.
    pub level2: Vec<Vec<usize>>,
    /// Level-2 blocks merged across distance-2 connections through `S₀`,
    /// listed as site sets.
    pub level3: Vec<Vec<usize>>,
    /// Level-3 block index of each level-2 block.
    pub level3_of_level2: Vec<usize>,
    /// `ℜ_ij` between level-2 blocks; `+∞` when no connecting triple exists.
    /// The diagonal is `+∞`.
    pub rij: Vec<Vec<f64>>,
    /// Second-scale jump rates `1 / (|block_i| ℜ_ij)`; zero when `ℜ_ij = ∞`.
    pub r2nd: Vec<Vec<f64>>,
    pub m_star: Option<f64>,
    pub m_star_star: Option<f64>,
    /// Sites whose measure lies within `1e-9` of one but outside `STAR_TOL`,
    /// flagged as numerically ambiguous `S⋆` membership.
    pub near_degenerate: Vec<usize>,
}

impl MetastableHierarchy {
    pub fn kappa2(&self) -> usize {
        self.level2.len()
    }

    pub fn kappa3(&self) -> usize {
        self.level3.len()
    }

    /// Level-2 block containing `x`, if `x ∈ S⋆`.
    pub fn level2_block_of(&self, x: usize) -> Option<usize> {
        self.level2.iter().position(|b| b.contains(&x))
    }

    /// Level-3 block containing `x`, if `x ∈ S⋆`.
    pub fn level3_block_of(&self, x: usize) -> Option<usize> {
        self.level3.iter().position(|b| b.contains(&x))
    }
}

/// Computes the level-2 and level-3 partitions of `S⋆` and the constants
/// `ℜ_ij`.
pub fn metastable_hierarchy(g: &SiteGraph) -> MetastableHierarchy {
    let s_star = g.s_star();
    let s_zero = g.s_zero();

    let level2 = components(&s_star, |u, v| g.adjacent(u, v));
    let k2 = level2.len();

    let mut rij = vec![vec![f64::INFINITY; k2]; k2];
    for i in 0..k2 {
        for j in (i + 1)..k2 {
            let r = compute_rij(g, &level2[i], &level2[j]);
            rij[i][j] = r;
            rij[j][i] = r;
        }
    }
    let mut r2nd = vec![vec![0.0; k2]; k2];
    for i in 0..k2 {
        for j in 0..k2 {
            if i != j && rij[i][j].is_finite() {
                r2nd[i][j] = 1.0 / (level2[i].len() as f64 * rij[i][j]);
            }
        }
    }

    let blocks: Vec<usize> = (0..k2).collect();
    let groups = components(&blocks, |i, j| distance_two(g, &level2[i], &level2[j]));
    let mut level3_of_level2 = vec![0; k2];
    let mut level3 = Vec::with_capacity(groups.len());
    for (q, group) in groups.iter().enumerate() {
        let mut sites: Vec<usize> = group.iter().flat_map(|&i| level2[i].iter().copied()).collect();
        sites.sort_unstable();
        for &i in group {
            level3_of_level2[i] = q;
        }
        level3.push(sites);
    }

    let near_degenerate = (0..g.len())
        .filter(|&x| {
            let gap = (1.0 - g.m(x)).abs();
            gap > STAR_TOL && gap < 1e-9
        })
        .collect();

    MetastableHierarchy {
        s_star,
        s_zero,
        level2,
        level3,
        level3_of_level2,
        rij,
        r2nd,
        m_star: g.m_star(),
        m_star_star: g.m_star_star(),
        near_degenerate,
    }
}

/// True if some `a ∈ S₀` is adjacent to a site of each block.
fn distance_two(g: &SiteGraph, bi: &[usize], bj: &[usize]) -> bool {
    g.s_zero().into_iter().any(|a| {
        bi.iter().any(|&x| g.rate(x, a) > 0.0) && bj.iter().any(|&y| g.rate(y, a) > 0.0)
    })
}

/// Connected components of `nodes` under `linked`, each sorted, ordered by
/// smallest member.
fn components(nodes: &[usize], linked: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; nodes.len()];
    let mut out = Vec::new();
    for start in 0..nodes.len() {
        if label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        label[start] = id;
        let mut members = vec![nodes[start]];
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for q in 0..nodes.len() {
                if label[q] == usize::MAX && linked(nodes[p], nodes[q]) {
                    label[q] = id;
                    members.push(nodes[q]);
                    stack.push(q);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out.sort_by_key(|b| b[0]);
    out
}

/// `ℜ_ij = ∫₀¹ [Σ_{x∈i} Σ_{y∈j} Σ_{a∈S₀} 1 / ((1−m_a)((1−t)/r(x,a) + t/r(y,a)))]⁻¹ dt`.
///
/// Returns `+∞` when no triple `(x, a, y)` has both rates positive.
pub fn compute_rij(g: &SiteGraph, block_i: &[usize], block_j: &[usize]) -> f64 {
    let mut triples = Vec::new();
    for a in g.s_zero() {
        for &x in block_i {
            for &y in block_j {
                let (rxa, rya) = (g.rate(x, a), g.rate(y, a));
                if rxa > 0.0 && rya > 0.0 {
                    triples.push((1.0 - g.m(a), rxa, rya));
                }
            }
        }
    }
    if triples.is_empty() {
        return f64::INFINITY;
    }
    let integrand = |t: f64| {
        let s: f64 = triples
            .iter()
            .map(|&(ma, rxa, rya)| 1.0 / (ma * ((1.0 - t) / rxa + t / rya)))
            .sum();
        1.0 / s
    };
    adaptive_simpson(integrand, 0.0, 1.0, RIJ_QUAD_TOL, RIJ_QUAD_DEPTH)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(&f, a, b, fa, fm, fb, whole, tol, depth)
}

/// One connected piece `𝒢′_j` of the contracted graph with `x`, `y` removed.
#[derive(Debug, Clone, Serialize)]
pub struct Component {
    pub sites: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub anchors_x: Vec<usize>,
    pub anchors_y: Vec<usize>,
    /// `𝒜_{x,j} ∪ 𝒜_{y,j}` in increasing order.
    pub anchors: Vec<usize>,
}

/// Graph obtained by contracting `{x} ∪ 𝒩_x` and `{y} ∪ 𝒩_y`.
#[derive(Debug, Clone, Serialize)]
pub struct ContractedGraph {
    pub x: usize,
    pub y: usize,
    pub nx: Vec<usize>,
    pub ny: Vec<usize>,
    /// `𝒱′`, including `x` and `y`.
    pub vertices: Vec<usize>,
    /// `ℰ′` as unordered pairs `(u, v)` with `u < v`.
    pub edges: Vec<(usize, usize)>,
    pub anchors_x: Vec<usize>,
    pub anchors_y: Vec<usize>,
    pub components: Vec<Component>,
}

impl ContractedGraph {
    /// Summed conductance `Σ_{a ∈ 𝒩_x} c_av` of the contracted edge `x–v`.
    pub fn conductance_x(&self, g: &SiteGraph, v: usize) -> f64 {
        self.nx.iter().map(|&a| g.conductance(a, v)).sum()
    }

    /// Summed conductance `Σ_{b ∈ 𝒩_y} c_bv` of the contracted edge `v–y`.
    pub fn conductance_y(&self, g: &SiteGraph, v: usize) -> f64 {
        self.ny.iter().map(|&b| g.conductance(b, v)).sum()
    }

    /// Component index of a site of `𝒱′ ∖ {x, y}`.
    pub fn component_of(&self, v: usize) -> Option<usize> {
        self.components.iter().position(|c| c.sites.contains(&v))
    }
}

/// Contracts the neighbourhoods of `x` and `y`.
///
/// Requires `S⋆ = {x, y}` and graph distance at least three.
pub fn contract_graph(g: &SiteGraph, x: usize, y: usize) -> Result<ContractedGraph> {
    if x >= g.len() || y >= g.len() || x == y {
        return Err(Error::InvalidInput(format!("bad site pair ({x}, {y})")));
    }
    let s_star = g.s_star();
    if s_star.len() != 2 || !s_star.contains(&x) || !s_star.contains(&y) {
        return Err(Error::AssumptionViolated(format!(
            "S⋆ must be exactly {{{}, {}}}; found {:?}",
            g.name(x),
            g.name(y),
            s_star.iter().map(|&v| g.name(v)).collect::<Vec<_>>()
        )));
    }
    match g.distance(x, y) {
        Some(d) if d >= 3 => {}
        d => {
            return Err(Error::AssumptionViolated(format!(
                "distance between {} and {} is {:?}, at least 3 is required",
                g.name(x),
                g.name(y),
                d
            )))
        }
    }
    let nx: Vec<usize> = g.neighbors(x).collect();
    let ny: Vec<usize> = g.neighbors(y).collect();
    let removed = |v: usize| nx.contains(&v) || ny.contains(&v);
    let inner: Vec<usize> = (0..g.len()).filter(|&v| v != x && v != y && !removed(v)).collect();
    let mut vertices = inner.clone();
    vertices.push(x);
    vertices.push(y);
    vertices.sort_unstable();

    let anchors_x: Vec<usize> = inner
        .iter()
        .copied()
        .filter(|&v| nx.iter().any(|&a| g.adjacent(a, v)))
        .collect();
    let anchors_y: Vec<usize> = inner
        .iter()
        .copied()
        .filter(|&v| ny.iter().any(|&b| g.adjacent(b, v)))
        .collect();

    let mut edges = Vec::new();
    for (i, &v) in inner.iter().enumerate() {
        for &w in &inner[i + 1..] {
            if g.adjacent(v, w) {
                edges.push((v, w));
            }
        }
    }
    for &v in &anchors_x {
        edges.push((x.min(v), x.max(v)));
    }
    for &v in &anchors_y {
        edges.push((y.min(v), y.max(v)));
    }
    if nx.iter().any(|&a| ny.iter().any(|&b| g.adjacent(a, b))) {
        edges.push((x.min(y), x.max(y)));
    }
    edges.sort_unstable();

    let components = components(&inner, |u, v| g.adjacent(u, v))
        .into_iter()
        .map(|sites| {
            let edges = sites
                .iter()
                .enumerate()
                .flat_map(|(i, &v)| {
                    sites[i + 1..]
                        .iter()
                        .filter(move |&&w| g.adjacent(v, w))
                        .map(move |&w| (v, w))
                })
                .collect();
            let ax: Vec<usize> = anchors_x.iter().copied().filter(|v| sites.contains(v)).collect();
            let ay: Vec<usize> = anchors_y.iter().copied().filter(|v| sites.contains(v)).collect();
            let mut anchors: Vec<usize> = ax.iter().chain(ay.iter()).copied().collect();
            anchors.sort_unstable();
            anchors.dedup();
            Component { sites, edges, anchors_x: ax, anchors_y: ay, anchors }
        })
        .collect();

    Ok(ContractedGraph { x, y, nx, ny, vertices, edges, anchors_x, anchors_y, components })
}

/// Builds a path graph `names[0] – names[1] – …` with the given symmetric
/// conductances and measure; rates are `r(u, v) = c_uv / m_u`.
pub fn path_graph(names: &[&str], measure: &[f64], conductances: &[f64]) -> Result<SiteGraph> {
    let mut edges = Vec::new();
    for (i, &c) in conductances.iter().enumerate() {
        edges.push((i, i + 1, c / measure[i]));
        edges.push((i + 1, i, c / measure[i + 1]));
    }
    SiteGraph::with_measure(names.iter().map(|s| s.to_string()).collect(), &edges, measure)
}

/// The five-site path `x – a – b – c – y` with `m = 1/2` on the interior
/// sites and unit conductances.
pub fn reference_path() -> SiteGraph {
    path_graph(&["x", "a", "b", "c", "y"], &[1.0, 0.5, 0.5, 0.5, 1.0], &[1.0; 4])
        .expect("reference path is valid")
}
