//! Ladder graphs, the truncated resolvent equation on them and the
//! third-scale capacity constant `𝔎_xy`.
//!
//! Every quantity whose natural size decays geometrically in the level `ℓ`
//! (rates, driving terms, slice conductances) is carried as a logarithm and
//! only exponentiated after a per-row or per-level rescaling, so depths of
//! several hundred levels stay representable.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config_space::log_sum_exp;
use crate::error::{Error, Result};
use crate::graph_model::{Component, ContractedGraph, SiteGraph};
use crate::potential_theory::{KahanSum, ReversibleChain};

/// Default truncation depth before automatic doubling.
pub const DEFAULT_DEPTH: usize = 80;
/// Largest depth reached by automatic doubling.
pub const MAX_DEPTH: usize = 640;
/// Relative change of `𝔎` between successive depths accepted as converged.
pub const DEPTH_TOL: f64 = 1e-8;
/// Largest relative disagreement of the three `𝔎` formulas before the
/// result is rejected.
pub const SPREAD_TOL: f64 = 1e-4;
/// Exponent floor used when turning log-conductances back into numbers.
const LOG_FLOOR: f64 = -700.0;

/// State of a two-site slice: all `ℓ` particles on one site, or split over
/// an unordered pair `v < w` with `k` particles on `v`, `1 ≤ k ≤ ℓ − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SliceState {
    Single(usize),
    Split { v: usize, w: usize, k: usize },
}

/// The symmetric chain on `U_ℓ`: configurations of `ℓ` particles on the
/// sites of one component occupying at most two sites.
#[derive(Debug, Clone)]
pub struct TwoSiteSliceChain {
    pub level: usize,
    pub sites: Vec<usize>,
    pub states: Vec<SliceState>,
    /// Symmetric rates as undirected edges `(i, j, rate)` over state indices.
    pub rates: Vec<(usize, usize, f64)>,
    index: HashMap<SliceState, usize>,
}

impl TwoSiteSliceChain {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, s: &SliceState) -> Option<usize> {
        self.index.get(&normalize(*s, self.level)).copied()
    }

    /// Index of `σ^v`.
    pub fn singleton(&self, v: usize) -> Option<usize> {
        self.index_of(&SliceState::Single(v))
    }

    /// States reachable from the singletons. Split states over non-adjacent
    /// pairs carry no rates and are excluded.
    pub fn communicating_class(&self) -> Vec<usize> {
        let mut adj = vec![Vec::new(); self.len()];
        for &(i, j, _) in &self.rates {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<usize> = self.sites.iter().filter_map(|&v| self.singleton(v)).collect();
        for &s in &stack {
            seen[s] = true;
        }
        while let Some(s) = stack.pop() {
            for &t in &adj[s] {
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        (0..self.len()).filter(|&s| seen[s]).collect()
    }

    /// The slice as a generic reversible chain on its communicating class,
    /// with the map from chain index back to slice state index.
    pub fn chain(&self) -> Result<(ReversibleChain, Vec<usize>)> {
        let class = self.communicating_class();
        let mut pos = vec![usize::MAX; self.len()];
        for (p, &s) in class.iter().enumerate() {
            pos[s] = p;
        }
        let mut edges = Vec::new();
        for &(i, j, r) in &self.rates {
            if pos[i] != usize::MAX {
                edges.push((pos[i], pos[j], r));
                edges.push((pos[j], pos[i], r));
            }
        }
        Ok((ReversibleChain::new(vec![1.0; class.len()], &edges)?, class))
    }
}

fn normalize(s: SliceState, level: usize) -> SliceState {
    match s {
        SliceState::Split { v, w, k } if v > w => SliceState::Split { v: w, w: v, k: level - k },
        SliceState::Split { v, w: _, k } if k == level => SliceState::Single(v),
        SliceState::Split { v: _, w, k: 0 } => SliceState::Single(w),
        other => other,
    }
}

/// Enumerates `U_ℓ` for one component with its symmetric rates
/// `m_v^{k−1} m_w^{ℓ−k} c_vw` between `σ_k^{vw}` and `σ_{k−1}^{vw}`.
pub fn build_slice(g: &SiteGraph, comp: &Component, level: usize) -> Result<TwoSiteSliceChain> {
    if level == 0 {
        return Err(Error::InvalidInput("slice level must be at least 1".into()));
    }
    let sites = comp.sites.clone();
    let mut states: Vec<SliceState> = sites.iter().map(|&v| SliceState::Single(v)).collect();
    for (i, &v) in sites.iter().enumerate() {
        for &w in &sites[i + 1..] {
            let (v, w) = (v.min(w), v.max(w));
            states.extend((1..level).map(|k| SliceState::Split { v, w, k }));
        }
    }
    let index: HashMap<SliceState, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut rates = Vec::new();
    for &(v, w) in &comp.edges {
        let (v, w) = (v.min(w), v.max(w));
        let c = g.conductance(v, w);
        if c <= 0.0 {
            continue;
        }
        let (mv, mw) = (g.m(v), g.m(w));
        for k in 1..=level {
            let a = index[&normalize(SliceState::Split { v, w, k }, level)];
            let b = index[&normalize(SliceState::Split { v, w, k: k - 1 }, level)];
            rates.push((a, b, mv.powi(k as i32 - 1) * mw.powi((level - k) as i32) * c));
        }
    }
    Ok(TwoSiteSliceChain { level, sites, states, rates, index })
}

/// Number of states of `U_ℓ` on `n` sites.
pub fn slice_cardinality(n: usize, level: usize) -> usize {
    if level <= 1 {
        n
    } else {
        n + (level - 1) * n * n.saturating_sub(1) / 2
    }
}

/// Series path between two adjacent singletons of a slice.
#[derive(Debug, Clone)]
struct PairPath {
    /// Positions of the endpoint sites in `SliceNetwork::sites`, `i < j` by
    /// site label; `k` counts particles on site `i`.
    i: usize,
    j: usize,
    /// `ln` resistance of the edge `σ_{k−1} – σ_k` for `k = 1..=ℓ`.
    log_res: Vec<f64>,
    log_total: f64,
}

/// Exact reduction of a slice: singletons joined by birth–death paths.
///
/// The trace on any set of singletons is the Kron reduction of the
/// singleton network whose edge conductances are the series conductances of
/// the paths; harmonic extensions interpolate linearly in resistance along
/// each path.
#[derive(Debug, Clone)]
pub struct SliceNetwork {
    pub level: usize,
    pub sites: Vec<usize>,
    /// `ln` of the factor removed from all conductances.
    pub log_scale: f64,
    cond: DMatrix<f64>,
    paths: Vec<PairPath>,
}

impl SliceNetwork {
    pub fn new(g: &SiteGraph, comp: &Component, level: usize) -> Result<Self> {
        if level == 0 {
            return Err(Error::InvalidInput("slice level must be at least 1".into()));
        }
        let sites = comp.sites.clone();
        let pos = |v: usize| sites.iter().position(|&s| s == v).expect("edge inside component");
        let mut paths = Vec::new();
        for &(v, w) in &comp.edges {
            let (v, w) = (v.min(w), v.max(w));
            let c = g.conductance(v, w);
            if c <= 0.0 {
                continue;
            }
            let (lv, lw, lc) = (g.m(v).ln(), g.m(w).ln(), c.ln());
            let log_res: Vec<f64> = (1..=level)
                .map(|k| -((k - 1) as f64) * lv - ((level - k) as f64) * lw - lc)
                .collect();
            let log_total = log_sum_exp(&log_res);
            paths.push(PairPath { i: pos(v), j: pos(w), log_res, log_total });
        }
        let log_scale = paths.iter().map(|p| -p.log_total).fold(f64::NEG_INFINITY, f64::max);
        let log_scale = if log_scale.is_finite() { log_scale } else { 0.0 };
        let n = sites.len();
        let mut cond = DMatrix::zeros(n, n);
        for p in &paths {
            let c = (-p.log_total - log_scale).max(LOG_FLOOR).exp();
            cond[(p.i, p.j)] += c;
            cond[(p.j, p.i)] += c;
        }
        Ok(SliceNetwork { level, sites, log_scale, cond, paths })
    }

    fn position(&self, v: usize) -> Option<usize> {
        self.sites.iter().position(|&s| s == v)
    }

    /// Trace rates among the singletons of `anchors`, divided by
    /// `exp(log_scale)`.
    pub fn scaled_trace_rates(&self, anchors: &[usize]) -> Result<DMatrix<f64>> {
        let idx: Vec<usize> = anchors
            .iter()
            .map(|&a| self.position(a).ok_or_else(|| Error::InvalidInput(format!("site {a} not in slice"))))
            .collect::<Result<_>>()?;
        let interior: Vec<usize> = (0..self.sites.len()).filter(|p| !idx.contains(p)).collect();
        let lap = laplacian(&self.cond);
        let k = idx.len();
        let mut schur = DMatrix::from_fn(k, k, |a, b| lap[(idx[a], idx[b])]);
        if !interior.is_empty() {
            let m = interior.len();
            let lii = DMatrix::from_fn(m, m, |a, b| lap[(interior[a], interior[b])]);
            let liw = DMatrix::from_fn(m, k, |a, b| lap[(interior[a], idx[b])]);
            let chol = lii.cholesky().ok_or_else(|| {
                Error::SingularSystem(format!("slice {} interior is disconnected", self.level))
            })?;
            let x = chol.solve(&liw);
            schur -= liw.transpose() * x;
        }
        let mut out = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    out[(a, b)] = (-schur[(a, b)]).max(0.0);
                }
            }
        }
        Ok(out)
    }

    /// Trace rates `r̂^ℓ(σ^v, σ^w)` among `anchors` (same order).
    pub fn trace_rates(&self, anchors: &[usize]) -> Result<Vec<Vec<f64>>> {
        let s = self.scaled_trace_rates(anchors)?;
        let f = self.log_scale.exp();
        Ok((0..anchors.len()).map(|a| (0..anchors.len()).map(|b| s[(a, b)] * f).collect()).collect())
    }

    /// Harmonic extension to `U_ℓ` of values given on the anchor singletons.
    pub fn harmonic_extension(&self, anchors: &[usize], values: &[f64]) -> Result<SliceValues> {
        let n = self.sites.len();
        let mut single = vec![0.0; n];
        let mut fixed = vec![false; n];
        for (&a, &val) in anchors.iter().zip(values) {
            let p = self
                .position(a)
                .ok_or_else(|| Error::InvalidInput(format!("site {a} not in slice")))?;
            single[p] = val;
            fixed[p] = true;
        }
        let interior: Vec<usize> = (0..n).filter(|&p| !fixed[p]).collect();
        if !interior.is_empty() && interior.len() < n {
            let lap = laplacian(&self.cond);
            let m = interior.len();
            let lii = DMatrix::from_fn(m, m, |a, b| lap[(interior[a], interior[b])]);
            let rhs = DVector::from_fn(m, |a, _| {
                -(0..n).filter(|&q| fixed[q]).map(|q| lap[(interior[a], q)] * single[q]).sum::<f64>()
            });
            let chol = lii.cholesky().ok_or_else(|| {
                Error::SingularSystem(format!("slice {} interior is disconnected", self.level))
            })?;
            let u = chol.solve(&rhs);
            for (a, &p) in interior.iter().enumerate() {
                single[p] = u[a];
            }
        }
        let mut split = HashMap::new();
        for path in &self.paths {
            let (gi, gj) = (single[path.i], single[path.j]);
            let mut acc = f64::NEG_INFINITY;
            let mut vals = Vec::with_capacity(self.level.saturating_sub(1));
            for k in 1..self.level {
                acc = log_add(acc, path.log_res[k - 1]);
                let frac = (acc - path.log_total).exp();
                vals.push(gj + (gi - gj) * frac);
            }
            split.insert((self.sites[path.i], self.sites[path.j]), vals);
        }
        Ok(SliceValues { level: self.level, sites: self.sites.clone(), single, split })
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn laplacian(cond: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cond.nrows();
    let mut lap = -cond.clone();
    for i in 0..n {
        lap[(i, i)] = cond.row(i).sum();
    }
    lap
}

/// Values of a function on `U_ℓ`. Split states over non-adjacent pairs
/// are isolated in the slice chain and are not stored.
#[derive(Debug, Clone, Serialize)]
pub struct SliceValues {
    pub level: usize,
    pub sites: Vec<usize>,
    pub single: Vec<f64>,
    /// Keyed by the site pair `(v, w)`, `v < w`; entry `k − 1` is the value
    /// at `k` particles on `v`.
    #[serde(skip)]
    pub split: HashMap<(usize, usize), Vec<f64>>,
}

impl SliceValues {
    /// Value at `σ^v`.
    pub fn single(&self, v: usize) -> Option<f64> {
        self.sites.iter().position(|&s| s == v).map(|p| self.single[p])
    }

    /// Value at the state with `k` particles on `v` and `ℓ − k` on `w`.
    pub fn split(&self, v: usize, w: usize, k: usize) -> Option<f64> {
        match normalize(SliceState::Split { v, w, k }, self.level) {
            SliceState::Single(s) => self.single(s),
            SliceState::Split { v, w, k } => self.split.get(&(v, w)).map(|vals| vals[k - 1]),
        }
    }
}

/// Trace rates of the slice on its component's anchors.
pub fn slice_trace(g: &SiteGraph, comp: &Component, level: usize) -> Result<Vec<Vec<f64>>> {
    SliceNetwork::new(g, comp, level)?.trace_rates(&comp.anchors)
}

/// Legal interval `(√m⋆, 1)` for `λ`.
pub fn lambda_lower(g: &SiteGraph) -> f64 {
    g.m_star().unwrap_or(0.0).sqrt()
}

/// Midpoint of the legal `λ` interval.
pub fn default_lambda(g: &SiteGraph) -> f64 {
    0.5 * (lambda_lower(g) + 1.0)
}

fn check_lambda(g: &SiteGraph, lambda: f64) -> Result<()> {
    let lower = lambda_lower(g);
    if !(lambda > lower && lambda < 1.0) {
        return Err(Error::BadLambda { lambda, lower });
    }
    Ok(())
}

/// Truncated ladder chain of one component, all rates in log form.
#[derive(Debug, Clone)]
pub struct LadderChain {
    pub component: usize,
    pub anchors: Vec<usize>,
    pub depth: usize,
    pub lambda: f64,
    /// `Σ_{a ∈ 𝒩_x ∪ 𝒩_y} c_av/(1 − m_a)` per anchor.
    pub weight: Vec<f64>,
    /// `Σ_{a ∈ 𝒩_x} c_av/(1 − m_a)` per anchor.
    pub weight_x: Vec<f64>,
    /// `ln 𝔯(𝔳_ℓ, 𝔳_{ℓ+1})` at `[anchor][ℓ − 1]`, `ℓ = 1..L−1`.
    pub log_horizontal: Vec<Vec<f64>>,
    /// `ln r̂^ℓ` at `[ℓ − 1][(i, j)]`; `−∞` for no rate.
    pub log_trace: Vec<DMatrix<f64>>,
    /// `ln f^L` at `[anchor][ℓ − 1]`.
    pub log_f: Vec<Vec<f64>>,
    /// `ln h^L` at `[anchor][ℓ − 1]`; `−∞` where `h^L = 0`.
    pub log_h: Vec<Vec<f64>>,
    slices: Vec<SliceNetwork>,
}

impl LadderChain {
    pub fn build(
        g: &SiteGraph,
        cg: &ContractedGraph,
        component: usize,
        depth: usize,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(g, lambda)?;
        if depth < 1 {
            return Err(Error::InvalidInput("ladder depth must be at least 1".into()));
        }
        let comp = cg
            .components
            .get(component)
            .ok_or_else(|| Error::InvalidInput(format!("no component {component}")))?;
        let anchors = comp.anchors.clone();
        let side = |set: &[usize], v: usize| -> f64 {
            set.iter().map(|&a| g.conductance(a, v) / (1.0 - g.m(a))).sum()
        };
        let both: Vec<usize> = cg.nx.iter().chain(&cg.ny).copied().collect();
        let weight: Vec<f64> = anchors.iter().map(|&v| side(&both, v)).collect();
        let weight_x: Vec<f64> = anchors.iter().map(|&v| side(&cg.nx, v)).collect();
        let ll = lambda.ln();
        let mut log_horizontal = Vec::new();
        let mut log_f = Vec::new();
        let mut log_h = Vec::new();
        for (i, &v) in anchors.iter().enumerate() {
            let m = g.m(v);
            let (lm, lc, lcx) = (m.ln(), weight[i].ln(), weight_x[i].ln());
            log_horizontal
                .push((1..depth).map(|l| l as f64 * lm - (2 * l + 1) as f64 * ll + lc).collect::<Vec<_>>());
            let mut fv = Vec::with_capacity(depth);
            let mut hv = Vec::with_capacity(depth);
            for l in 1..=depth {
                let lf = (l - 1) as f64 * lm - (2 * l - 1) as f64 * ll;
                let coef = if depth == 1 {
                    1.0 / lambda
                } else if l == depth {
                    1.0 / lambda - 1.0
                } else if l == 1 {
                    (1.0 + m - m / lambda) / lambda
                } else {
                    (1.0 / lambda - 1.0) * (1.0 - m / lambda)
                };
                fv.push(coef.ln() + lf + lc);
                let lh = (l - 1) as f64 * lm - l as f64 * ll + lcx;
                hv.push(if l == depth { lh } else { (1.0 - m).ln() + lh });
            }
            log_f.push(fv);
            log_h.push(hv);
        }
        let mut slices = Vec::with_capacity(depth);
        let mut log_trace = Vec::with_capacity(depth);
        let k = anchors.len();
        for l in 1..=depth {
            let net = SliceNetwork::new(g, comp, l)?;
            let s = net.scaled_trace_rates(&anchors)?;
            log_trace.push(DMatrix::from_fn(k, k, |a, b| {
                if a != b && s[(a, b)] > 0.0 {
                    s[(a, b)].ln() + net.log_scale
                } else {
                    f64::NEG_INFINITY
                }
            }));
            slices.push(net);
        }
        Ok(LadderChain {
            component,
            anchors,
            depth,
            lambda,
            weight,
            weight_x,
            log_horizontal,
            log_trace,
            log_f,
            log_h,
            slices,
        })
    }

    /// Vertical rate `𝔯(𝔳_ℓ, 𝔴_ℓ) = λ^{−2ℓ} r̂^ℓ`, in log form.
    pub fn log_vertical(&self, level: usize, i: usize, j: usize) -> f64 {
        self.log_trace[level - 1][(i, j)] - 2.0 * level as f64 * self.lambda.ln()
    }

    /// Trace rate `r̂^ℓ(σ^{a_i}, σ^{a_j})`.
    pub fn trace_rate(&self, level: usize, i: usize, j: usize) -> f64 {
        self.log_trace[level - 1][(i, j)].exp()
    }

    pub fn slice(&self, level: usize) -> &SliceNetwork {
        &self.slices[level - 1]
    }

    fn unknown(&self, i: usize, level: usize) -> usize {
        (level - 1) * self.anchors.len() + i
    }

    /// `ln` of the diagonal of `f^L − 𝓛^L` at every unknown.
    fn log_diagonal(&self) -> Vec<f64> {
        let k = self.anchors.len();
        let mut out = vec![0.0; k * self.depth];
        for l in 1..=self.depth {
            for i in 0..k {
                let mut terms = vec![self.log_f[i][l - 1]];
                if l > 1 {
                    terms.push(self.log_horizontal[i][l - 2]);
                }
                if l < self.depth {
                    terms.push(self.log_horizontal[i][l - 1]);
                }
                terms.extend((0..k).filter(|&j| j != i).map(|j| self.log_vertical(l, i, j)));
                out[self.unknown(i, l)] = log_sum_exp(&terms);
            }
        }
        out
    }

    /// Solves `(f^L − 𝓛^L) g₀ = h^L` for `g = λ^{−ℓ} g₀` by block LU.
    ///
    /// Each row is divided by `λ^ℓ` times its diagonal, so the unknowns and
    /// the right-hand side are `O(ℓ)` and `O(1)` at every level whatever the
    /// spread of site measures.
    pub fn solve(&self) -> Result<ResolventSolution> {
        let k = self.anchors.len();
        let depth = self.depth;
        let log_d = self.log_diagonal();
        let ll = self.lambda.ln();
        // Row (a, l) is scaled by 1 / (D λ^l); column (b, l′) carries λ^{l′}.
        let diag_block = |l: usize| {
            DMatrix::from_fn(k, k, |a, b| {
                if a == b {
                    1.0
                } else {
                    -(self.log_vertical(l, a, b) - log_d[self.unknown(a, l)]).exp()
                }
            })
        };
        // Coupling of row level `from` to column level `to = from ± 1`.
        let coupling = |from: usize, to: usize| {
            DVector::from_fn(k, |a, _| {
                let lr = self.log_horizontal[a][from.min(to) - 1];
                -(lr + (to as f64 - from as f64) * ll - log_d[self.unknown(a, from)]).exp()
            })
        };
        let rhs = |l: usize| {
            DVector::from_fn(k, |a, _| {
                (self.log_h[a][l - 1] - l as f64 * ll - log_d[self.unknown(a, l)]).exp()
            })
        };

        let mut factors: Vec<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = Vec::with_capacity(depth);
        let mut ys: Vec<DVector<f64>> = Vec::with_capacity(depth);
        for l in 1..=depth {
            let mut s = diag_block(l);
            let mut b = rhs(l);
            if l > 1 {
                let lo = coupling(l, l - 1);
                let up = coupling(l - 1, l);
                let prev = &factors[l - 2];
                let inv = prev
                    .try_inverse()
                    .ok_or_else(|| Error::SingularSystem(format!("resolvent block {} is singular", l - 1)))?;
                for a in 0..k {
                    for c in 0..k {
                        s[(a, c)] -= lo[a] * inv[(a, c)] * up[c];
                    }
                }
                let z = &inv * &ys[l - 2];
                for a in 0..k {
                    b[a] -= lo[a] * z[a];
                }
            }
            factors.push(s.lu());
            ys.push(b);
        }
        let mut x = vec![DVector::zeros(k); depth];
        for l in (1..=depth).rev() {
            let mut b = ys[l - 1].clone();
            if l < depth {
                let up = coupling(l, l + 1);
                for a in 0..k {
                    b[a] -= up[a] * x[l][a];
                }
            }
            x[l - 1] = factors[l - 1]
                .solve(&b)
                .ok_or_else(|| Error::SingularSystem(format!("resolvent block {l} is singular")))?;
        }

        let mut g0 = vec![vec![0.0; depth]; k];
        let mut gv = vec![vec![0.0; depth]; k];
        for l in 1..=depth {
            for a in 0..k {
                gv[a][l - 1] = x[l - 1][a];
                g0[a][l - 1] = x[l - 1][a] * self.lambda.powi(l as i32);
            }
        }
        let residual = self.residual(&g0);
        let ghat = (1..=depth)
            .map(|l| {
                let vals: Vec<f64> = (0..k).map(|a| gv[a][l - 1]).collect();
                self.slices[l - 1].harmonic_extension(&self.anchors, &vals)
            })
            .collect::<Result<Vec<_>>>()?;
        let trace = (1..=depth)
            .map(|l| DMatrix::from_fn(k, k, |a, b| self.trace_rate(l, a, b)))
            .collect();
        Ok(ResolventSolution {
            component: self.component,
            anchors: self.anchors.clone(),
            depth,
            lambda: self.lambda,
            weight: self.weight.clone(),
            weight_x: self.weight_x.clone(),
            g0,
            g: gv,
            ghat,
            trace,
            residual,
        })
    }

    /// `max |(f^L − 𝓛^L) g₀ − h^L| / max |h^L|`.
    pub fn residual(&self, g0: &[Vec<f64>]) -> f64 {
        let k = self.anchors.len();
        let mut worst: f64 = 0.0;
        let mut hmax: f64 = 0.0;
        for l in 1..=self.depth {
            for a in 0..k {
                let h = self.log_h[a][l - 1].exp();
                hmax = hmax.max(h);
                let ga = g0[a][l - 1];
                let mut acc = KahanSum::default();
                acc.add(self.log_f[a][l - 1].exp() * ga);
                if l > 1 {
                    acc.add(self.log_horizontal[a][l - 2].exp() * (ga - g0[a][l - 2]));
                }
                if l < self.depth {
                    acc.add(self.log_horizontal[a][l - 1].exp() * (ga - g0[a][l]));
                }
                for b in (0..k).filter(|&b| b != a) {
                    acc.add(self.log_vertical(l, a, b).exp() * (ga - g0[b][l - 1]));
                }
                acc.add(-h);
                worst = worst.max(acc.value().abs());
            }
        }
        if hmax > 0.0 {
            worst / hmax
        } else {
            worst
        }
    }
}

/// Truncated resolvent solution on one component.
#[derive(Debug, Clone, Serialize)]
pub struct ResolventSolution {
    pub component: usize,
    pub anchors: Vec<usize>,
    pub depth: usize,
    pub lambda: f64,
    pub weight: Vec<f64>,
    pub weight_x: Vec<f64>,
    /// `g₀^L` at `[anchor][ℓ − 1]`.
    pub g0: Vec<Vec<f64>>,
    /// `g^L = λ^{−ℓ} g₀^L` at `[anchor][ℓ − 1]`.
    pub g: Vec<Vec<f64>>,
    /// Harmonic extensions `ĝ_ℓ^L` for `ℓ = 1..=L`.
    pub ghat: Vec<SliceValues>,
    /// Anchor trace rates `r̂^ℓ` for `ℓ = 1..=L`.
    #[serde(skip)]
    pub trace: Vec<DMatrix<f64>>,
    pub residual: f64,
}

impl ResolventSolution {
    /// `g^L(𝔳_ℓ)` with `g^L(𝔳_0) = 0`.
    pub fn g_at(&self, i: usize, level: usize) -> f64 {
        if level == 0 {
            0.0
        } else {
            self.g[i][level - 1]
        }
    }

    pub fn anchor_index(&self, v: usize) -> Option<usize> {
        self.anchors.iter().position(|&a| a == v)
    }
}

/// Resolvent solutions for every component of the contracted graph.
#[derive(Debug, Clone, Serialize)]
pub struct LadderResolvent {
    pub x: usize,
    pub y: usize,
    pub depth: usize,
    pub lambda: f64,
    pub components: Vec<ResolventSolution>,
    /// Component index of every site of `𝒱′ ∖ {x, y}`.
    #[serde(skip)]
    component_of: HashMap<usize, usize>,
}

impl LadderResolvent {
    /// `g^L(𝔳_ℓ)` for anchor site `v`.
    pub fn g(&self, v: usize, level: usize) -> Option<f64> {
        let sol = &self.components[*self.component_of.get(&v)?];
        Some(sol.g_at(sol.anchor_index(v)?, level))
    }

    /// `ĝ_ℓ^L(σ^v)` with `ĝ_0 ≡ 0`; `None` outside `𝒱′` or above the depth.
    pub fn ghat_single(&self, v: usize, level: usize) -> Option<f64> {
        if level == 0 {
            return Some(0.0);
        }
        let sol = &self.components[*self.component_of.get(&v)?];
        sol.ghat.get(level - 1)?.single(v)
    }

    /// `ĝ_ℓ^L` at `k` particles on `v` and `ℓ − k` on `w`.
    pub fn ghat_split(&self, v: usize, w: usize, k: usize, level: usize) -> Option<f64> {
        if level == 0 {
            return Some(0.0);
        }
        let c = *self.component_of.get(&v)?;
        if self.component_of.get(&w) != Some(&c) {
            return None;
        }
        self.components[c].ghat.get(level - 1)?.split(v, w, k)
    }

    pub fn max_residual(&self) -> f64 {
        self.components.iter().map(|s| s.residual).fold(0.0, f64::max)
    }
}

/// Solves the truncated resolvent equation on every component.
pub fn solve_resolvent(
    g: &SiteGraph,
    cg: &ContractedGraph,
    depth: usize,
    lambda: f64,
) -> Result<LadderResolvent> {
    check_lambda(g, lambda)?;
    let components = (0..cg.components.len())
        .map(|j| LadderChain::build(g, cg, j, depth, lambda)?.solve())
        .collect::<Result<Vec<_>>>()?;
    let mut component_of = HashMap::new();
    for (j, c) in cg.components.iter().enumerate() {
        for &v in &c.sites {
            component_of.insert(v, j);
        }
    }
    Ok(LadderResolvent { x: cg.x, y: cg.y, depth, lambda, components, component_of })
}

/// The constant `𝔎_xy` with its three evaluations.
#[derive(Debug, Clone, Serialize)]
pub struct KConstant {
    pub value: f64,
    pub lambda: f64,
    pub depth: usize,
    /// `1/(6𝔎)` from the four-sum definition.
    pub full_formula: f64,
    /// `1/(6𝔎)` from the single sum over `𝒩_x × 𝒜_x`.
    pub simplified_x: f64,
    /// `1/(6𝔎)` from the single sum over `𝒜_y × 𝒩_y`.
    pub simplified_y: f64,
    pub spread: f64,
    /// Relative change against the previous depth when doubling was used.
    pub depth_change: Option<f64>,
}

/// Pieces of the `1/(6𝔎)` sums, exposed for identity checks.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KTerms {
    pub direct: f64,
    pub x_side: f64,
    pub y_side: f64,
    pub pairs: f64,
    pub linear_x: f64,
    pub linear_y: f64,
}

/// Evaluates every sum entering `1/(6𝔎)` at the resolvent's depth.
pub fn k_terms(g: &SiteGraph, cg: &ContractedGraph, res: &LadderResolvent) -> KTerms {
    let mut direct = KahanSum::default();
    for &a in &cg.nx {
        for &b in &cg.ny {
            direct.add(g.conductance(a, b) / ((1.0 - g.m(a)) * (1.0 - g.m(b))));
        }
    }
    let depth = res.depth;
    let (mut xs, mut ys, mut lx, mut ly) =
        (KahanSum::default(), KahanSum::default(), KahanSum::default(), KahanSum::default());
    for &a in &cg.nx {
        for &b in &cg.anchors_x {
            let c = g.conductance(a, b) / (1.0 - g.m(a));
            if c == 0.0 {
                continue;
            }
            let mb = g.m(b);
            for l in 0..depth {
                let d = 1.0 + res.g(b, l).unwrap_or(0.0) - res.g(b, l + 1).unwrap_or(0.0);
                let w = c * mb.powi(l as i32);
                xs.add(w * d * d);
                lx.add(w * d);
            }
        }
    }
    for &a in &cg.anchors_y {
        for &b in &cg.ny {
            let c = g.conductance(a, b) / (1.0 - g.m(b));
            if c == 0.0 {
                continue;
            }
            let ma = g.m(a);
            for l in 0..depth {
                let d = res.g(a, l + 1).unwrap_or(0.0) - res.g(a, l).unwrap_or(0.0);
                let w = c * ma.powi(l as i32);
                ys.add(w * d * d);
                ly.add(w * d);
            }
        }
    }
    let mut pairs = KahanSum::default();
    for sol in &res.components {
        let k = sol.anchors.len();
        for l in 1..=depth {
            for a in 0..k {
                for b in (a + 1)..k {
                    let d = sol.g_at(b, l) - sol.g_at(a, l);
                    pairs.add(sol.trace[l - 1][(a, b)] * d * d);
                }
            }
        }
    }
    let direct = direct.value();
    KTerms {
        direct,
        x_side: xs.value(),
        y_side: ys.value(),
        pairs: pairs.value(),
        linear_x: direct + lx.value(),
        linear_y: direct + ly.value(),
    }
}

/// `𝔎_xy` at a fixed depth.
pub fn compute_kxy(g: &SiteGraph, cg: &ContractedGraph, lambda: f64, depth: usize) -> Result<KConstant> {
    let res = solve_resolvent(g, cg, depth, lambda)?;
    Ok(kconstant_from(g, cg, &res))
}

/// `𝔎_xy` from an existing resolvent solution.
pub fn kconstant_from(g: &SiteGraph, cg: &ContractedGraph, res: &LadderResolvent) -> KConstant {
    let t = k_terms(g, cg, res);
    let full = t.direct + t.x_side + t.y_side + t.pairs;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    let spread = rel(full, t.linear_x).max(rel(full, t.linear_y)).max(rel(t.linear_x, t.linear_y));
    KConstant {
        value: 1.0 / (6.0 * full),
        lambda: res.lambda,
        depth: res.depth,
        full_formula: full,
        simplified_x: t.linear_x,
        simplified_y: t.linear_y,
        spread,
        depth_change: None,
    }
}

/// `𝔎_xy` with depth doubling from `start` until the relative change drops
/// below [`DEPTH_TOL`] or [`MAX_DEPTH`] is reached.
pub fn kconstant_auto(
    g: &SiteGraph,
    cg: &ContractedGraph,
    lambda: f64,
    start: usize,
) -> Result<(KConstant, LadderResolvent)> {
    let mut depth = start.max(2);
    let mut res = solve_resolvent(g, cg, depth, lambda)?;
    let mut k = kconstant_from(g, cg, &res);
    while depth < MAX_DEPTH {
        let next_depth = (2 * depth).min(MAX_DEPTH);
        let next_res = solve_resolvent(g, cg, next_depth, lambda)?;
        let mut next = kconstant_from(g, cg, &next_res);
        let change = (next.value - k.value).abs() / next.value.abs();
        next.depth_change = Some(change);
        depth = next_depth;
        res = next_res;
        k = next;
        if change < DEPTH_TOL {
            break;
        }
    }
    if k.spread > SPREAD_TOL || !k.value.is_finite() || k.value <= 0.0 {
        return Err(Error::Diverged { spread: k.spread });
    }
    Ok((k, res))
}

/// Residuals of the balance identities satisfied by `g^L`.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    /// Largest normalized residual of the interior-level balance identity.
    pub interior_balance: f64,
    /// Same at the top level `ℓ = L`.
    pub top_balance: f64,
    /// Largest normalized residual of the flux identity between the `x`
    /// and `y` sides, over all levels.
    pub cross_flux: f64,
}

impl IdentityReport {
    pub fn max(&self) -> f64 {
        self.interior_balance.max(self.top_balance).max(self.cross_flux)
    }
}

/// Evaluates the per-level balance identities of `g^L` and the cross flux
/// identity. Each residual is the componentwise backward error
/// `|Σ c_i g_i + s| / (Σ |c_i g_i| + |s|)` with every difference expanded
/// into its two terms, so saturating profiles are not penalized for
/// cancellation.
pub fn verify_g_identities(g: &SiteGraph, cg: &ContractedGraph, res: &LadderResolvent) -> IdentityReport {
    let depth = res.depth;
    let mut interior: f64 = 0.0;
    let mut top: f64 = 0.0;
    for sol in &res.components {
        let k = sol.anchors.len();
        for (i, &v) in sol.anchors.iter().enumerate() {
            let m = g.m(v);
            for l in 1..=depth {
                let scale = m.powi(l as i32 - 1);
                let mut terms = Vec::new();
                let gl = sol.g_at(i, l);
                let down = sol.weight[i] * scale;
                if l < depth {
                    terms.push((1.0 - m) * sol.weight_x[i] * scale);
                    let up = down * m;
                    terms.extend([up * sol.g_at(i, l + 1), -up * gl]);
                } else {
                    terms.push(sol.weight_x[i] * scale);
                }
                terms.extend([down * sol.g_at(i, l - 1), -down * gl]);
                for j in (0..k).filter(|&j| j != i) {
                    let r = sol.trace[l - 1][(i, j)];
                    terms.extend([r * sol.g_at(j, l), -r * gl]);
                }
                let r = normalized(&terms);
                if l < depth {
                    interior = interior.max(r);
                } else {
                    top = top.max(r);
                }
            }
        }
    }
    let mut cross: f64 = 0.0;
    for l in 1..=depth {
        let mut terms = Vec::new();
        for &a in &cg.nx {
            for &b in &cg.anchors_x {
                let c = g.conductance(a, b) / (1.0 - g.m(a)) * g.m(b).powi(l as i32 - 1);
                if c > 0.0 {
                    let gb = |q| res.g(b, q).unwrap_or(0.0);
                    terms.extend([c, c * gb(l - 1), -c * gb(l)]);
                }
            }
        }
        for &b in &cg.ny {
            for &a in &cg.anchors_y {
                let c = g.conductance(a, b) / (1.0 - g.m(b)) * g.m(a).powi(l as i32 - 1);
                if c > 0.0 {
                    let ga = |q| res.g(a, q).unwrap_or(0.0);
                    terms.extend([-c * ga(l), c * ga(l - 1)]);
                }
            }
        }
        cross = cross.max(normalized(&terms));
    }
    IdentityReport { interior_balance: interior, top_balance: top, cross_flux: cross }
}

fn normalized(terms: &[f64]) -> f64 {
    let mut s = KahanSum::default();
    let mut mag = 0.0;
    for &t in terms {
        s.add(t);
        mag += t.abs();
    }
    if mag > 0.0 {
        s.value().abs() / mag
    } else {
        0.0
    }
}

/// Partial sums entering the two single-sum forms of `1/(6𝔎)`, per anchor.
#[derive(Debug, Clone, Serialize)]
pub struct PartialSums {
    pub depth: usize,
    /// `Σ_{ℓ<L} m_b^ℓ (1 + g^L(𝔟_ℓ) − g^L(𝔟_{ℓ+1}))` for `b ∈ 𝒜_x`.
    pub x_side: Vec<(usize, f64)>,
    /// `Σ_{ℓ<L} m_a^ℓ (g^L(𝔞_{ℓ+1}) − g^L(𝔞_ℓ))` for `a ∈ 𝒜_y`.
    pub y_side: Vec<(usize, f64)>,
}

pub fn partial_sums(g: &SiteGraph, cg: &ContractedGraph, res: &LadderResolvent) -> PartialSums {
    let sum = |v: usize, f: &dyn Fn(usize) -> f64| {
        let mut s = KahanSum::default();
        for l in 0..res.depth {
            s.add(g.m(v).powi(l as i32) * f(l));
        }
        s.value()
    };
    let gv = |v: usize, l: usize| res.g(v, l).unwrap_or(0.0);
    PartialSums {
        depth: res.depth,
        x_side: cg.anchors_x.iter().map(|&b| (b, sum(b, &|l| 1.0 + gv(b, l) - gv(b, l + 1)))).collect(),
        y_side: cg.anchors_y.iter().map(|&a| (a, sum(a, &|l| gv(a, l + 1) - gv(a, l)))).collect(),
    }
}

/// Largest absolute difference between successive entries of a depth sweep
/// of partial sums.
pub fn partial_sum_differences(sweep: &[PartialSums]) -> Vec<f64> {
    sweep
        .windows(2)
        .map(|w| {
            let a = w[0].x_side.iter().chain(&w[0].y_side);
            let b = w[1].x_side.iter().chain(&w[1].y_side);
            a.zip(b).map(|(p, q)| (p.1 - q.1).abs()).fold(0.0, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_model::{contract_graph, reference_path};
    use approx::assert_relative_eq;

    #[test]
    fn slice_counts() {
        assert_eq!(slice_cardinality(3, 4), 12);
        assert_eq!(slice_cardinality(3, 1), 3);
    }

    #[test]
    fn reference_path_g_is_linear() {
        let g = reference_path();
        let cg = contract_graph(&g, 0, 4).unwrap();
        let res = solve_resolvent(&g, &cg, 40, 0.8).unwrap();
        for l in 1..=40 {
            assert_relative_eq!(res.g(2, l).unwrap(), l as f64 / 2.0, max_relative = 1e-10);
        }
        let k = kconstant_from(&g, &cg, &res);
        assert_relative_eq!(k.value, 1.0 / 12.0, max_relative = 1e-10);
    }
}
