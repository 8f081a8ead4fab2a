//! Explicit test objects for the variational capacity principles: a test
//! function `F` (Dirichlet upper bound) and a test flow `ψ` (Thomson lower
//! bound) between the two condensates `ξ^x` and `ξ^y`, plus the capacity
//! sandwich that compares both against the exact capacity.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::config_space::{log_partition, log_w_table, ConfigSpace, MeasureTable, Occ};
use crate::error::{Error, Result};
use crate::graph_model::{contract_graph, metastable_hierarchy, ContractedGraph, SiteGraph};
use crate::ladder_resolvent::{kconstant_auto, solve_resolvent, LadderResolvent, DEFAULT_DEPTH};
use crate::potential_theory::{FlowField, KahanSum, SolveOptions};

/// Occupation vector used as a sparse configuration key.
pub type Config = Vec<Occ>;

/// Role of a site of `S₀` relative to the pair `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    NearX,
    NearY,
    Inner,
}

fn roles(g: &SiteGraph, cg: &ContractedGraph) -> Vec<Option<Role>> {
    (0..g.len())
        .map(|v| {
            if v == cg.x || v == cg.y {
                None
            } else if cg.nx.contains(&v) {
                Some(Role::NearX)
            } else if cg.ny.contains(&v) {
                Some(Role::NearY)
            } else {
                Some(Role::Inner)
            }
        })
        .collect()
}

/// Even cutoff `N′ = 2⌊√(N log(1/d))⌋`, clamped to the even values in
/// `[2, N/2)`.
pub fn n_prime(n: usize, d: f64) -> Result<usize> {
    let top = 2 * ((n.saturating_sub(1)) / 4);
    if top < 2 {
        return Err(Error::AssumptionViolated(format!(
            "N = {n} is too small for the test function (needs N ≥ 5)"
        )));
    }
    let raw = 2.0 * ((n as f64) * (1.0 / d).ln().max(0.0)).sqrt().floor();
    let raw = if raw.is_finite() { raw as usize } else { top };
    Ok(raw.clamp(2, top))
}

/// Test function for the Dirichlet principle.
#[derive(Debug, Clone)]
pub struct TestFunction {
    n: usize,
    n_prime: usize,
    x: usize,
    near_x: Vec<usize>,
    inner: Vec<usize>,
    adjacent: Vec<Vec<bool>>,
    /// `Σ_{t=N′+1}^{n} (N − t) t` for `n = 0..=N`.
    partial: Vec<f64>,
    normalizer: f64,
    resolvent: LadderResolvent,
}

impl TestFunction {
    /// Builds `F` from a resolvent solved at depth at least `N`.
    pub fn new(g: &SiteGraph, cg: &ContractedGraph, n: usize, d: f64, resolvent: LadderResolvent) -> Result<Self> {
        let np = n_prime(n, d)?;
        Self::with_cutoff(g, cg, n, np, resolvent)
    }

    /// Builds `F` with an explicit even cutoff `N′ ∈ [2, N/2)`.
    pub fn with_cutoff(
        g: &SiteGraph,
        cg: &ContractedGraph,
        n: usize,
        n_prime: usize,
        resolvent: LadderResolvent,
    ) -> Result<Self> {
        if n_prime < 2 || n_prime % 2 == 1 || 2 * n_prime >= n {
            return Err(Error::AssumptionViolated(format!(
                "cutoff N′ = {n_prime} must be even with 2 ≤ N′ < N/2 = {}",
                n as f64 / 2.0
            )));
        }
        if resolvent.depth < n - n_prime {
            return Err(Error::InvalidInput(format!(
                "resolvent depth {} is below N − N′ = {}",
                resolvent.depth,
                n - n_prime
            )));
        }
        let mut partial = vec![0.0; n + 1];
        let mut acc = 0.0;
        for t in (n_prime + 1)..=n {
            acc += ((n - t) * t) as f64;
            partial[t] = acc;
        }
        let normalizer = partial[n - n_prime];
        let role = roles(g, cg);
        let inner = (0..g.len()).filter(|&v| role[v] == Some(Role::Inner)).collect();
        let adjacent = (0..g.len())
            .map(|u| (0..g.len()).map(|v| g.adjacent(u, v)).collect())
            .collect();
        Ok(TestFunction {
            n,
            n_prime,
            x: cg.x,
            near_x: cg.nx.clone(),
            inner,
            adjacent,
            partial,
            normalizer,
            resolvent,
        })
    }

    pub fn n_prime(&self) -> usize {
        self.n_prime
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// `Σ_{t=N′+1}^{n} (N − t) t`.
    pub fn partial_sum(&self, n: usize) -> f64 {
        self.partial[n]
    }

    /// `η̄_x = η_x + η(𝒩_x)`.
    pub fn bar_x(&self, eta: &[Occ]) -> usize {
        eta[self.x] as usize + self.near_x.iter().map(|&a| eta[a] as usize).sum::<usize>()
    }

    /// `F(η)`.
    pub fn eval(&self, eta: &[Occ]) -> f64 {
        let nb = self.bar_x(eta);
        let (n, np) = (self.n, self.n_prime);
        if nb + np > n {
            return 1.0;
        }
        if nb < np {
            return 0.0;
        }
        let base = self.partial[nb];
        let weight = ((n - nb) * nb) as f64;
        let mut occupied = [(0usize, 0usize); 2];
        let mut count = 0;
        for &v in &self.inner {
            if eta[v] > 0 {
                if count == 2 {
                    return base / self.normalizer;
                }
                occupied[count] = (v, eta[v] as usize);
                count += 1;
            }
        }
        let bump = match count {
            1 => {
                let (v, k) = occupied[0];
                self.resolvent.ghat_single(v, k).unwrap_or(0.0)
            }
            2 => {
                let ((v, k), (w, j)) = (occupied[0], occupied[1]);
                if self.adjacent[v][w] {
                    self.resolvent.ghat_split(v, w, k, k + j).unwrap_or(0.0)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        (base + weight * bump) / self.normalizer
    }
}

/// Classification of a configuration edge for the Dirichlet breakdown.
fn edge_class(role: &[Option<Role>], eta: &[Occ], zeta: &[Occ]) -> String {
    let support = |c: &[Occ]| -> Vec<usize> {
        (0..c.len()).filter(|&v| role[v].is_some() && c[v] > 0).collect()
    };
    let (se, sz) = (support(eta), support(zeta));
    let (me, mz) = (se.len() <= 2, sz.len() <= 2);
    if !me && !mz {
        return "remainder".into();
    }
    if me != mz {
        return "boundary".into();
    }
    let mut union = se;
    union.extend(sz);
    union.sort_unstable();
    union.dedup();
    match union.len() {
        0 | 1 => "single".into(),
        2 => {
            let r = (role[union[0]].unwrap(), role[union[1]].unwrap());
            match r {
                (Role::NearX, Role::NearX) => "T1",
                (Role::NearY, Role::NearY) => "T2",
                (Role::NearX, Role::NearY) | (Role::NearY, Role::NearX) => "T3",
                (Role::NearX, Role::Inner) | (Role::Inner, Role::NearX) => "T4",
                (Role::Inner, Role::NearY) | (Role::NearY, Role::Inner) => "T5",
                (Role::Inner, Role::Inner) => "T6",
            }
            .into()
        }
        _ => "mixing".into(),
    }
}

/// `𝒟_N(F)` with its decomposition over edge classes.
#[derive(Debug, Clone, Serialize)]
pub struct DirichletReport {
    pub total: f64,
    pub by_class: BTreeMap<String, f64>,
}

/// Dirichlet form of `F` summed over every configuration edge.
pub fn dirichlet_of_f(
    g: &SiteGraph,
    cg: &ContractedGraph,
    cs: &ConfigSpace,
    mt: &MeasureTable,
    f: &TestFunction,
) -> DirichletReport {
    let role = roles(g, cg);
    let values: Vec<f64> = (0..cs.len()).map(|i| f.eval(cs.config(i))).collect();
    let mut sums: BTreeMap<String, KahanSum> = BTreeMap::new();
    for class in ["T1", "T2", "T3", "T4", "T5", "T6", "single", "mixing", "boundary", "remainder"] {
        sums.insert(class.into(), KahanSum::default());
    }
    let mut total = KahanSum::default();
    for i in 0..cs.len() {
        let lp = mt.log_prob(i);
        for (j, r) in cs.moves(i) {
            if j <= i {
                continue;
            }
            let diff = values[j] - values[i];
            let term = if diff == 0.0 { 0.0 } else { (lp + r.ln() + 2.0 * diff.abs().ln()).exp() };
            let class = edge_class(&role, cs.config(i), cs.config(j));
            sums.get_mut(&class).expect("known class").add(term);
            total.add(term);
        }
    }
    DirichletReport {
        total: total.value(),
        by_class: sums.into_iter().map(|(k, v)| (k, v.value())).collect(),
    }
}

/// Antisymmetric flow on configurations keyed by occupation vectors.
#[derive(Debug, Clone, Default)]
pub struct SparseFlow {
    values: HashMap<(Config, Config), f64>,
}

impl SparseFlow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `val` to the flow from `u` to `v`.
    pub fn add(&mut self, u: &[Occ], v: &[Occ], val: f64) {
        if u < v {
            *self.values.entry((u.to_vec(), v.to_vec())).or_insert(0.0) += val;
        } else {
            *self.values.entry((v.to_vec(), u.to_vec())).or_insert(0.0) -= val;
        }
    }

    /// Flow from `u` to `v`.
    pub fn get(&self, u: &[Occ], v: &[Occ]) -> f64 {
        if u < v {
            self.values.get(&(u.to_vec(), v.to_vec())).copied().unwrap_or(0.0)
        } else {
            -self.values.get(&(v.to_vec(), u.to_vec())).copied().unwrap_or(0.0)
        }
    }

    pub fn absorb(&mut self, other: &SparseFlow) {
        for ((u, v), &val) in &other.values {
            *self.values.entry((u.clone(), v.clone())).or_insert(0.0) += val;
        }
    }

    /// `Σ_ζ ψ(η, ζ)` at every configuration touched by the flow.
    pub fn divergence(&self) -> HashMap<Config, f64> {
        let mut div: HashMap<Config, f64> = HashMap::new();
        for ((u, v), &val) in &self.values {
            *div.entry(u.clone()).or_insert(0.0) += val;
            *div.entry(v.clone()).or_insert(0.0) -= val;
        }
        div
    }

    pub fn max_abs(&self) -> f64 {
        self.values.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Entries `(u, v, ψ(u, v))` with `u < v` lexicographically.
    pub fn iter(&self) -> impl Iterator<Item = (&Config, &Config, f64)> {
        self.values.iter().map(|((u, v), &val)| (u, v, val))
    }
}

/// Builds configurations with the remainder of the `N` particles at `y`.
#[derive(Debug, Clone, Copy)]
struct Frame {
    sites: usize,
    n: i64,
    y: usize,
}

impl Frame {
    fn cfg(&self, parts: &[(usize, i64)]) -> Result<Config> {
        let mut eta = vec![0 as Occ; self.sites];
        let mut used = 0;
        for &(s, k) in parts {
            if k < 0 {
                return Err(Error::InvalidInput(format!("negative occupation {k} at site {s}")));
            }
            eta[s] += k as Occ;
            used += k;
        }
        if used > self.n {
            return Err(Error::InvalidInput(format!("{used} particles exceed N = {}", self.n)));
        }
        eta[self.y] += (self.n - used) as Occ;
        Ok(eta)
    }
}

/// Test flow from `ξ^x` to `ξ^y` and its parts.
#[derive(Debug, Clone)]
pub struct TestFlow {
    pub n: usize,
    pub depth: usize,
    pub path: Vec<usize>,
    pub bulk: SparseFlow,
    pub outer: SparseFlow,
    pub edge: SparseFlow,
    pub flow: SparseFlow,
    source: Config,
    sink: Config,
}

/// Divergence diagnostics of a test flow.
#[derive(Debug, Clone, Serialize)]
pub struct DivergenceScan {
    /// `div ψ(ξ^x)`.
    pub value: f64,
    /// `div ψ(ξ^y)`.
    pub sink: f64,
    /// Largest `|div ψ(η)|` over `η ∉ {ξ^x, ξ^y}`.
    pub interior_max: f64,
    pub max_flow: f64,
    pub states: usize,
    pub edges: usize,
}

impl DivergenceScan {
    /// Interior divergence relative to the largest flow magnitude.
    pub fn relative(&self) -> f64 {
        if self.max_flow > 0.0 {
            self.interior_max / self.max_flow
        } else {
            0.0
        }
    }
}

impl TestFlow {
    pub fn source(&self) -> &[Occ] {
        &self.source
    }

    pub fn sink(&self) -> &[Occ] {
        &self.sink
    }

    pub fn scan(&self) -> DivergenceScan {
        let div = self.flow.divergence();
        let interior_max = div
            .iter()
            .filter(|(k, _)| **k != self.source && **k != self.sink)
            .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
        DivergenceScan {
            value: div.get(&self.source).copied().unwrap_or(0.0),
            sink: div.get(&self.sink).copied().unwrap_or(0.0),
            interior_max,
            max_flow: self.flow.max_abs(),
            states: div.len(),
            edges: self.flow.len(),
        }
    }

    /// The flow on the enumerated configuration space.
    pub fn to_flow_field(&self, cs: &ConfigSpace) -> Result<FlowField> {
        sparse_to_flow_field(&self.flow, cs)
    }

    /// Value `div ψ(ξ^x)`, after checking the interior divergence.
    pub fn value(&self, tol: f64) -> Result<f64> {
        let s = self.scan();
        if s.interior_max > tol * s.max_flow {
            let div = self.flow.divergence();
            let worst = div
                .iter()
                .filter(|(k, _)| **k != self.source && **k != self.sink)
                .max_by(|p, q| p.1.abs().total_cmp(&q.1.abs()))
                .map(|(k, v)| (format!("{k:?}"), *v))
                .unwrap_or_default();
            return Err(Error::NotAFlow { state: worst.0, divergence: worst.1 });
        }
        Ok(s.value)
    }
}

/// Smallest `N` supported by the test flow at depth `L`.
pub fn min_particles_for_depth(depth: usize) -> usize {
    4 * depth
}

/// Largest test-flow depth usable with `N` particles.
pub fn max_depth_for(n: usize) -> usize {
    n / 4
}

struct FlowBuilder<'a> {
    g: &'a SiteGraph,
    res: &'a LadderResolvent,
    frame: Frame,
    x: usize,
    l: i64,
    n: i64,
}

impl FlowBuilder<'_> {
    fn ghat(&self, v: usize, level: i64) -> f64 {
        self.res.ghat_single(v, level as usize).unwrap_or(0.0)
    }

    /// Pair `a ∈ 𝒩_x`, `b ∉ 𝒩_x`, on the configurations with fixed `y` count.
    /// `inner_b` selects the `ĝ(σ^b)` weighting used when `b ∈ 𝒱′`.
    fn x_side(&self, a: usize, b: usize, inner_b: bool) -> Result<SparseFlow> {
        let (l_, n_, x) = (self.l, self.n, self.x);
        let c = self.g.conductance(a, b);
        let (ma, mb) = (self.g.m(a), self.g.m(b));
        let gb = |q: i64| if inner_b { self.ghat(b, q) } else { 0.0 };
        let s = |p: i64, k: i64, q: i64| self.frame.cfg(&[(x, p), (a, k), (b, q)]);

        let mut phi = SparseFlow::new();
        for n in 2 * l_..=n_ - l_ {
            for l in 1..=l_ {
                for k in 1..=l {
                    let q = l - k;
                    let mut val = c * ma.powi(k as i32 - 1) * mb.powi(q as i32) * (1.0 + gb(q) - gb(q + 1));
                    if l == l_ {
                        val /= 1.0 - ma;
                    }
                    phi.add(&s(n - l, k, q)?, &s(n - l, k - 1, q + 1)?, val);
                }
            }
        }
        let dphi = phi.divergence();
        let dv = |cfg: Config| dphi.get(&cfg).copied().unwrap_or(0.0);

        let mut corr = SparseFlow::new();
        for n in 2 * l_..=n_ - l_ {
            for l in 2..=l_ {
                for k in 1..l {
                    let mut acc = 0.0;
                    for j in l..=l_ {
                        acc += dv(s(n - j, k + j - l, l - k)?);
                    }
                    corr.add(&s(n - l, k, l - k)?, &s(n - l + 1, k - 1, l - k)?, -acc);
                }
            }
        }

        // Near ξ^x the collected flux is returned along b → a moves.
        let mut exc = SparseFlow::new();
        for n in (n_ - 2 * l_ + 2)..=(n_ - l_) {
            for l in 1..=(n - (n_ - 2 * l_ + 1)) {
                let p = n - l;
                let val = phi.get(&s(p, 1, l - 1)?, &s(p, 0, l)?) + corr.get(&s(p - 1, 1, l)?, &s(p, 0, l)?);
                for k in 0..l {
                    exc.add(&s(p, k, l - k)?, &s(p, k + 1, l - k - 1)?, val);
                }
            }
        }
        phi.absorb(&corr);
        phi.absorb(&exc);
        Ok(phi)
    }

    /// Pair `a ∈ 𝒱′`, `b ∈ 𝒩_y`, on the configurations with fixed `x` count.
    fn y_side(&self, a: usize, b: usize) -> Result<SparseFlow> {
        let (l_, n_, x) = (self.l, self.n, self.x);
        let c = self.g.conductance(a, b);
        let (ma, mb) = (self.g.m(a), self.g.m(b));
        let s = |p: i64, k: i64, q: i64| self.frame.cfg(&[(x, p), (a, k), (b, q)]);

        let mut phi = SparseFlow::new();
        for n in l_..=n_ - 2 * l_ {
            for l in 1..=l_ {
                for k in 1..=l {
                    let q = l - k;
                    let mut val =
                        c * ma.powi(k as i32 - 1) * mb.powi(q as i32) * (self.ghat(a, k) - self.ghat(a, k - 1));
                    if l == l_ {
                        val /= 1.0 - mb;
                    }
                    phi.add(&s(n, k, q)?, &s(n, k - 1, q + 1)?, val);
                }
            }
        }
        let dphi = phi.divergence();
        let dv = |cfg: Config| dphi.get(&cfg).copied().unwrap_or(0.0);

        let mut corr = SparseFlow::new();
        for n in l_..=n_ - 2 * l_ {
            for l in 2..=l_ {
                for k in 1..l {
                    let mut acc = 0.0;
                    for j in l..=l_ {
                        acc += dv(s(n, k, j - k)?);
                    }
                    corr.add(&s(n, k, l - k)?, &s(n, k, l - k - 1)?, -acc);
                }
            }
        }

        // Near ξ^y the flux collected at σ^a is pushed on to b.
        let mut exc = SparseFlow::new();
        for n in l_..=(2 * l_ - 2) {
            for l in 1..=(2 * l_ - 1 - n) {
                let val = -phi.get(&s(n, l, 0)?, &s(n, l - 1, 1)?) + corr.get(&s(n, l, 1)?, &s(n, l, 0)?);
                for k in 1..=l {
                    exc.add(&s(n, k, l - k)?, &s(n, k - 1, l - k + 1)?, val);
                }
            }
        }
        phi.absorb(&corr);
        phi.absorb(&exc);
        Ok(phi)
    }

    /// Adjacent pair inside `𝒱′`: harmonic flow across each slice.
    fn inner(&self, a: usize, b: usize) -> Result<SparseFlow> {
        let (l_, n_, x) = (self.l, self.n, self.x);
        let c = self.g.conductance(a, b);
        let (ma, mb) = (self.g.m(a), self.g.m(b));
        let s = |p: i64, k: i64, q: i64| self.frame.cfg(&[(x, p), (a, k), (b, q)]);
        let gs = |k: i64, l: i64| self.res.ghat_split(a, b, k as usize, l as usize).unwrap_or(0.0);
        let mut phi = SparseFlow::new();
        for n in l_..=n_ - 2 * l_ {
            for l in (2 * l_ - n).max(1)..=l_ {
                for k in 1..=l {
                    let val = c * ma.powi(k as i32 - 1) * mb.powi((l - k) as i32) * (gs(k, l) - gs(k - 1, l));
                    phi.add(&s(n, k, l - k)?, &s(n, k - 1, l - k + 1)?, val);
                }
            }
        }
        Ok(phi)
    }
}

/// Builds the test flow at depth `L` with `N ≥ 4L` particles.
pub fn build_test_flow(g: &SiteGraph, cg: &ContractedGraph, n: usize, depth: usize) -> Result<TestFlow> {
    if depth == 0 {
        return Err(Error::InvalidInput("test-flow depth must be at least 1".into()));
    }
    if n < min_particles_for_depth(depth) {
        return Err(Error::AssumptionViolated(format!(
            "test flow at depth {depth} needs N ≥ {}, got N = {n}",
            min_particles_for_depth(depth)
        )));
    }
    if n > Occ::MAX as usize {
        return Err(Error::InvalidInput(format!("N = {n} exceeds {}", Occ::MAX)));
    }
    let lambda = crate::ladder_resolvent::default_lambda(g);
    let res = solve_resolvent(g, cg, depth, lambda)?;
    let role = roles(g, cg);
    let (x, y) = (cg.x, cg.y);
    let frame = Frame { sites: g.len(), n: n as i64, y };
    let b = FlowBuilder { g, res: &res, frame, x, l: depth as i64, n: n as i64 };
    let (l_, n_) = (depth as i64, n as i64);

    let mut bulk = SparseFlow::new();
    for u in 0..g.len() {
        for v in (u + 1)..g.len() {
            if !g.adjacent(u, v) {
                continue;
            }
            let (Some(ru), Some(rv)) = (role[u], role[v]) else { continue };
            let part = match (ru, rv) {
                (Role::NearX, Role::NearY) => b.x_side(u, v, false)?,
                (Role::NearY, Role::NearX) => b.x_side(v, u, false)?,
                (Role::NearX, Role::Inner) => b.x_side(u, v, true)?,
                (Role::Inner, Role::NearX) => b.x_side(v, u, true)?,
                (Role::Inner, Role::NearY) => b.y_side(u, v)?,
                (Role::NearY, Role::Inner) => b.y_side(v, u)?,
                (Role::Inner, Role::Inner) => b.inner(u, v)?,
                _ => continue,
            };
            bulk.absorb(&part);
        }
    }
    let bulk_div = bulk.divergence();
    let bd = |cfg: Config| bulk_div.get(&cfg).copied().unwrap_or(0.0);

    // Outer corrections: carry the net bulk flux along x → a and b → y.
    let mut outer = SparseFlow::new();
    for &a in &cg.nx {
        let s = |p: i64, k: i64| frame.cfg(&[(x, p), (a, k)]);
        for n in 2 * l_..=n_ - l_ {
            for l in 1..=l_ {
                let mut acc = 0.0;
                for j in l..=l_ {
                    acc += bd(s(n - j, j)?);
                }
                outer.add(&s(n - l + 1, l - 1)?, &s(n - l, l)?, acc);
            }
        }
    }
    for &bb in &cg.ny {
        let s = |p: i64, k: i64| frame.cfg(&[(x, p), (bb, k)]);
        for n in l_..=n_ - 2 * l_ {
            for l in 1..=l_ {
                let mut acc = 0.0;
                for j in l..=l_ {
                    acc -= bd(s(n, j)?);
                }
                outer.add(&s(n, l)?, &s(n, l - 1)?, acc);
            }
        }
    }

    // Edge corrections along a fixed shortest path near the condensates.
    let path = g.shortest_path(x, y)?;
    let p = path.len() - 1;
    let mut edge = SparseFlow::new();
    let xy = |n: i64| frame.cfg(&[(x, n)]);
    let mut into_x = vec![0.0; 2 * depth];
    let mut into_y = vec![0.0; 2 * depth];
    for l in l_..2 * l_ {
        let here = xy(n_ - l)?;
        into_x[l as usize] = cg.nx.iter().try_fold(0.0, |acc, &a| -> Result<f64> {
            Ok(acc + outer.get(&here, &frame.cfg(&[(x, n_ - l - 1), (a, 1)])?))
        })?;
        let there = xy(l)?;
        into_y[l as usize] = cg.ny.iter().try_fold(0.0, |acc, &bb| -> Result<f64> {
            Ok(acc + outer.get(&frame.cfg(&[(x, l), (bb, 1)])?, &there))
        })?;
    }
    for l in l_..2 * l_ {
        let fx = into_x[l as usize];
        for i in 1..p {
            let (ai, aj) = (path[i], path[i + 1]);
            for j in 1..=l {
                let from = frame.cfg(&[(x, n_ - l), (ai, j), (aj, l - j)])?;
                let to = frame.cfg(&[(x, n_ - l), (ai, j - 1), (aj, l - j + 1)])?;
                edge.add(&from, &to, fx);
            }
        }
        let fy = into_y[l as usize];
        for i in 0..p - 1 {
            let (ai, aj) = (path[i], path[i + 1]);
            for j in 1..=l {
                let from = frame.cfg(&[(ai, j), (aj, l - j)])?;
                let to = frame.cfg(&[(ai, j - 1), (aj, l - j + 1)])?;
                edge.add(&from, &to, fy);
            }
        }
    }
    let (a1, last) = (path[1], path[p - 1]);
    for l in 1..2 * l_ {
        let tail_x: f64 = (l.max(l_)..2 * l_).map(|j| into_x[j as usize]).sum();
        edge.add(&frame.cfg(&[(x, n_ - l + 1), (a1, l - 1)])?, &frame.cfg(&[(x, n_ - l), (a1, l)])?, tail_x);
        let tail_y: f64 = (l.max(l_)..2 * l_).map(|j| into_y[j as usize]).sum();
        edge.add(&frame.cfg(&[(last, l)])?, &frame.cfg(&[(last, l - 1)])?, tail_y);
    }

    let mut flow = bulk.clone();
    flow.absorb(&outer);
    flow.absorb(&edge);
    Ok(TestFlow {
        n,
        depth,
        path,
        bulk,
        outer,
        edge,
        flow,
        source: frame.cfg(&[(x, n_)])?,
        sink: frame.cfg(&[])?,
    })
}

/// Re-keys a sparse flow by configuration index.
pub fn sparse_to_flow_field(flow: &SparseFlow, cs: &ConfigSpace) -> Result<FlowField> {
    let mut out = FlowField::default();
    for (u, v, val) in flow.iter() {
        let idx = |c: &Config| {
            cs.try_rank(c)
                .ok_or_else(|| Error::InvalidInput(format!("configuration {c:?} is not in the space")))
        };
        out.add(idx(u)?, idx(v)?, val);
    }
    Ok(out)
}

/// `‖ψ‖² = Σ_edges ψ(η, ζ)² / (μ_N(η) r_N(η, ζ))`, computed without
/// enumerating `ℋ_N`.
pub fn sparse_flow_norm(g: &SiteGraph, n: usize, d: f64, flow: &SparseFlow) -> Result<f64> {
    let log_z = log_partition(g.measure(), n, d);
    let log_w = log_w_table(n, d);
    let log_m: Vec<f64> = g.measure().iter().map(|m| m.ln()).collect();
    let mut acc = KahanSum::default();
    for (u, v, val) in flow.iter() {
        if val == 0.0 {
            continue;
        }
        let from = (0..u.len()).filter(|&s| u[s] > v[s]).collect::<Vec<_>>();
        let to = (0..u.len()).filter(|&s| v[s] > u[s]).collect::<Vec<_>>();
        let (s, t) = match (from.as_slice(), to.as_slice()) {
            ([s], [t]) if u[*s] - v[*s] == 1 && v[*t] - u[*t] == 1 => (*s, *t),
            _ => {
                return Err(Error::NotAFlow { state: format!("{u:?} -> {v:?}"), divergence: f64::NAN })
            }
        };
        let r = g.rate(s, t);
        if !(r > 0.0) {
            return Err(Error::NotAFlow { state: format!("{u:?} -> {v:?}"), divergence: f64::NAN });
        }
        let log_mu: f64 =
            u.iter().zip(&log_m).map(|(&e, lm)| log_w[e as usize] + e as f64 * lm).sum::<f64>() - log_z;
        let log_c = log_mu + (u[s] as f64).ln() + (d + u[t] as f64).ln() + r.ln();
        acc.add((2.0 * val.abs().ln() - log_c).exp());
    }
    Ok(acc.value())
}

/// Flow norm and Thomson bound of a test flow.
#[derive(Debug, Clone, Serialize)]
pub struct FlowBound {
    pub depth: usize,
    pub value: f64,
    pub norm: f64,
    pub bound: f64,
    pub interior_divergence: f64,
}

/// `(‖ψ‖², (div ψ(ξ^x))² / ‖ψ‖²)`.
pub fn flow_norm_and_bound(g: &SiteGraph, n: usize, d: f64, psi: &TestFlow) -> Result<FlowBound> {
    let scan = psi.scan();
    let value = psi.value(1e-12)?;
    let norm = sparse_flow_norm(g, n, d, &psi.flow)?;
    Ok(FlowBound {
        depth: psi.depth,
        value,
        norm,
        bound: if norm > 0.0 { value * value / norm } else { 0.0 },
        interior_divergence: scan.relative(),
    })
}

/// Unit flow that moves the particles one at a time along `route`, from
/// `route[0]` to its last site.
pub fn path_flow(g: &SiteGraph, n: usize, route: &[usize]) -> Result<SparseFlow> {
    if route.len() < 2 {
        return Err(Error::InvalidInput("route needs at least two sites".into()));
    }
    for w in route.windows(2) {
        if !g.adjacent(w[0], w[1]) {
            return Err(Error::NoPath(w[0], w[1]));
        }
    }
    let (x, y) = (route[0], route[route.len() - 1]);
    let mut flow = SparseFlow::new();
    for i in 1..=n {
        let mut eta = vec![0 as Occ; g.len()];
        eta[x] = (n - i + 1) as Occ;
        eta[y] = (i - 1) as Occ;
        for w in route.windows(2) {
            let mut next = eta.clone();
            next[w[0]] -= 1;
            next[w[1]] += 1;
            flow.add(&eta, &next, 1.0);
            eta = next;
        }
    }
    Ok(flow)
}

/// Thomson lower, exact and Dirichlet upper capacities at one `N`.
#[derive(Debug, Clone, Serialize)]
pub struct CapacitySandwich {
    pub n: usize,
    pub d_n: f64,
    pub lower: f64,
    pub exact: f64,
    pub upper: f64,
    pub lower_scaled: f64,
    pub exact_scaled: f64,
    pub upper_scaled: f64,
    pub k_reference: f64,
    pub flow_depth: usize,
    pub n_prime: usize,
    /// Cutoff from `2⌊√(N log(1/d))⌋` and its scaled Dirichlet bound.
    pub n_prime_formula: usize,
    pub upper_formula_scaled: f64,
    pub exact_residual: f64,
    pub flow_interior_divergence: f64,
    pub dirichlet: DirichletReport,
}

impl CapacitySandwich {
    /// Smallest relative slack of `lower ≤ exact ≤ upper`.
    pub fn slack(&self) -> f64 {
        ((self.exact - self.lower) / self.exact).min((self.upper - self.exact) / self.exact)
    }
}

/// How the test-function cutoff `N′` is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CutoffChoice {
    /// `2⌊√(N log(1/d))⌋`, clamped.
    Formula,
    /// Smallest Dirichlet bound over all admissible even cutoffs.
    #[default]
    Best,
    Fixed(usize),
}

/// Options for [`capacity_sandwich`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SandwichOptions {
    pub lambda: Option<f64>,
    /// Test-flow depth; defaults to the best admissible depth.
    pub flow_depth: Option<usize>,
    pub cutoff: CutoffChoice,
    pub budget: Option<usize>,
}

/// Admissible even cutoffs `2, 4, …` below `N/2`.
pub fn admissible_cutoffs(n: usize) -> Vec<usize> {
    (1..).map(|k| 2 * k).take_while(|&np| 2 * np < n).collect()
}

/// Dirichlet bound of `F` for each requested cutoff, in parallel.
pub fn dirichlet_over_cutoffs(
    g: &SiteGraph,
    cg: &ContractedGraph,
    cs: &ConfigSpace,
    mt: &MeasureTable,
    res: &LadderResolvent,
    cutoffs: &[usize],
) -> Result<Vec<(usize, DirichletReport)>> {
    cutoffs
        .par_iter()
        .map(|&np| {
            let f = TestFunction::with_cutoff(g, cg, cs.n_particles(), np, res.clone())?;
            Ok((np, dirichlet_of_f(g, cg, cs, mt, &f)))
        })
        .collect()
}

/// Thomson bound of the best test flow over depths `1..=N/4`.
pub fn best_flow_bound(g: &SiteGraph, cg: &ContractedGraph, n: usize, d: f64) -> Result<FlowBound> {
    let bounds = (1..=max_depth_for(n))
        .into_par_iter()
        .map(|depth| flow_norm_and_bound(g, n, d, &build_test_flow(g, cg, n, depth)?))
        .collect::<Result<Vec<_>>>()?;
    bounds
        .into_iter()
        .reduce(|a, b| if b.bound > a.bound { b } else { a })
        .ok_or_else(|| Error::AssumptionViolated(format!("N = {n} admits no test-flow depth")))
}

/// Enumerates `ℋ_N`, solves for the exact capacity between the two
/// condensates and brackets it with the test objects.
pub fn capacity_sandwich(
    g: &SiteGraph,
    x: usize,
    y: usize,
    n: usize,
    d: f64,
    opts: &SandwichOptions,
) -> Result<CapacitySandwich> {
    let h = metastable_hierarchy(g);
    if h.level3_block_of(x).is_some() && h.level3_block_of(x) == h.level3_block_of(y) {
        return Err(Error::AssumptionViolated(format!(
            "{} and {} lie in the same third-level block",
            g.name(x),
            g.name(y)
        )));
    }
    let cg = contract_graph(g, x, y)?;
    let lambda = opts.lambda.unwrap_or_else(|| crate::ladder_resolvent::default_lambda(g));
    let (k, _) = kconstant_auto(g, &cg, lambda, DEFAULT_DEPTH)?;

    let cs = ConfigSpace::enumerate(g, n, d, opts.budget.unwrap_or(crate::config_space::DEFAULT_BUDGET))?;
    let mt = cs.stationary_measure();
    let chain = cs.chain(&mt)?;
    let near_x: Vec<usize> = std::iter::once(x).chain(cg.nx.iter().copied()).collect();
    let labels: Vec<u32> = (0..cs.len()).map(|i| cs.mass(i, &near_x) as u32).collect();
    let sol = chain.equilibrium_potential_with(
        &[cs.condensate(x)],
        &[cs.condensate(y)],
        &SolveOptions { coarse_labels: Some(&labels), initial: None },
    )?;

    let res = solve_resolvent(g, &cg, n.max(DEFAULT_DEPTH), lambda)?;
    let formula = n_prime(n, d)?;
    let cutoffs = match opts.cutoff {
        CutoffChoice::Formula => vec![formula],
        CutoffChoice::Fixed(np) => vec![np, formula],
        CutoffChoice::Best => admissible_cutoffs(n),
    };
    let reports = dirichlet_over_cutoffs(g, &cg, &cs, &mt, &res, &cutoffs)?;
    let upper_formula = reports
        .iter()
        .find(|r| r.0 == formula)
        .map(|r| r.1.total)
        .expect("formula cutoff is admissible");
    let (chosen, dirichlet) = match opts.cutoff {
        CutoffChoice::Best => reports
            .into_iter()
            .reduce(|a, b| if b.1.total < a.1.total { b } else { a })
            .expect("at least one cutoff"),
        _ => reports.into_iter().next().expect("requested cutoff"),
    };

    let fb = match opts.flow_depth {
        Some(depth) => flow_norm_and_bound(g, n, d, &build_test_flow(g, &cg, n, depth)?)?,
        None => best_flow_bound(g, &cg, n, d)?,
    };

    let scale = (n * n) as f64 / d.powi(3);
    let out = CapacitySandwich {
        n,
        d_n: d,
        lower: fb.bound,
        exact: sol.cap,
        upper: dirichlet.total,
        lower_scaled: fb.bound * scale,
        exact_scaled: sol.cap * scale,
        upper_scaled: dirichlet.total * scale,
        k_reference: 1.0 / (2.0 * k.value),
        flow_depth: fb.depth,
        n_prime: chosen,
        n_prime_formula: formula,
        upper_formula_scaled: upper_formula * scale,
        exact_residual: sol.residual,
        flow_interior_divergence: fb.interior_divergence,
        dirichlet,
    };
    let tol = 1e-9 * out.exact;
    if out.lower > out.exact + tol || out.exact > out.upper + tol {
        return Err(Error::AssumptionViolated(format!(
            "sandwich ordering fails: {:.6e} ≤ {:.6e} ≤ {:.6e}",
            out.lower, out.exact, out.upper
        )));
    }
    Ok(out)
}
