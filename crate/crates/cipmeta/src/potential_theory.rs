//! Potential theory of finite reversible Markov chains: Dirichlet forms,
//! equilibrium potentials, capacities, flows and the Thomson principle,
//! trace processes, harmonic extensions and mean hitting times.

use std::collections::HashMap;

use faer::sparse::linalg::solvers::{Cholesky, SpSolver};
use faer::sparse::SparseColMat;
use faer::{Col, Side};

use crate::error::{Error, Result};

/// Interiors up to this size are factorized directly; larger ones use
/// preconditioned conjugate gradients.
pub const DIRECT_LIMIT: usize = 20_000;
/// Relative residual target of the conjugate-gradient solver.
pub const CG_TOL: f64 = 1e-11;
/// Relative tolerance of the detailed-balance check on chain construction.
pub const CHAIN_BALANCE_TOL: f64 = 1e-12;

/// Continuous-time reversible chain stored in compressed rows.
#[derive(Debug, Clone)]
pub struct ReversibleChain {
    pi: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    rates: Vec<f64>,
}

impl ReversibleChain {
    /// Builds a chain from directed rates `(v, w, R(v, w))`, checking
    /// detailed balance and irreducibility. `pi` is normalized to sum one.
    pub fn new(pi: Vec<f64>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = pi.len();
        if n == 0 || pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("stationary weights must be positive".into()));
        }
        let total: f64 = pi.iter().sum();
        let pi: Vec<f64> = pi.iter().map(|p| p / total).collect();
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for &(v, w, r) in edges {
            if v >= n || w >= n || v == w || !(r >= 0.0) || !r.is_finite() {
                return Err(Error::InvalidInput(format!("bad rate entry ({v}, {w}, {r})")));
            }
            if r > 0.0 {
                rows[v].push((w as u32, r));
            }
        }
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut rates = Vec::new();
        for row in &mut rows {
            row.sort_unstable_by_key(|e| e.0);
            for pair in row.windows(2) {
                if pair[0].0 == pair[1].0 {
                    return Err(Error::InvalidInput("duplicate rate entry".into()));
                }
            }
            for &(w, r) in row.iter() {
                cols.push(w);
                rates.push(r);
            }
            row_ptr.push(cols.len());
        }
        let chain = ReversibleChain { pi, row_ptr, cols, rates };
        chain.check()?;
        Ok(chain)
    }

    /// Builds a chain from a dense rate matrix.
    pub fn from_dense(pi: Vec<f64>, rates: &[Vec<f64>]) -> Result<Self> {
        let mut edges = Vec::new();
        for (v, row) in rates.iter().enumerate() {
            for (w, &r) in row.iter().enumerate() {
                if v != w && r > 0.0 {
                    edges.push((v, w, r));
                }
            }
        }
        Self::new(pi, &edges)
    }

    /// Wraps prevalidated compressed rows (columns sorted within each row).
    pub(crate) fn from_csr_unchecked(
        pi: Vec<f64>,
        row_ptr: Vec<usize>,
        cols: Vec<u32>,
        rates: Vec<f64>,
    ) -> Self {
        ReversibleChain { pi, row_ptr, cols, rates }
    }

    fn check(&self) -> Result<()> {
        for v in 0..self.len() {
            for (w, r) in self.row(v) {
                let back = self.rate(w, v);
                let (a, b) = (self.pi[v] * r, self.pi[w] * back);
                let scale = a.max(b);
                if (a - b).abs() > CHAIN_BALANCE_TOL * scale {
                    return Err(Error::NotReversible { x: v, y: w, residual: (a - b).abs() / scale });
                }
            }
        }
        let mut seen = vec![false; self.len()];
        seen[0] = true;
        let mut stack = vec![0];
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for (w, _) in self.row(v) {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        if count != self.len() {
            return Err(Error::NotIrreducible { classes: 2 });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Outgoing `(w, R(v, w))` pairs of `v`.
    pub fn row(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[v], self.row_ptr[v + 1]);
        self.cols[s..e].iter().map(|&w| w as usize).zip(self.rates[s..e].iter().copied())
    }

    /// `R(v, w)`, zero when absent.
    pub fn rate(&self, v: usize, w: usize) -> f64 {
        let (s, e) = (self.row_ptr[v], self.row_ptr[v + 1]);
        match self.cols[s..e].binary_search(&(w as u32)) {
            Ok(k) => self.rates[s + k],
            Err(_) => 0.0,
        }
    }

    /// Symmetric conductance `π(v) R(v, w)`.
    pub fn conductance(&self, v: usize, w: usize) -> f64 {
        self.pi[v] * self.rate(v, w)
    }

    /// Number of stored directed edges.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `(𝓛f)(v) = Σ_w R(v, w) (f(w) − f(v))`.
    pub fn generator(&self, f: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|v| self.row(v).map(|(w, r)| r * (f[w] - f[v])).sum())
            .collect()
    }

    /// `𝒟(f) = ½ Σ_{v,w} π(v) R(v, w) (f(w) − f(v))²`.
    pub fn dirichlet_form(&self, f: &[f64]) -> f64 {
        let mut acc = KahanSum::default();
        for v in 0..self.len() {
            for (w, r) in self.row(v) {
                if w > v {
                    let df = f[w] - f[v];
                    acc.add(self.pi[v] * r * df * df);
                }
            }
        }
        acc.value()
    }

    /// `⟨f, −𝓛f⟩_π`.
    pub fn generator_pairing(&self, f: &[f64]) -> f64 {
        let lf = self.generator(f);
        let mut acc = KahanSum::default();
        for v in 0..self.len() {
            acc.add(-self.pi[v] * f[v] * lf[v]);
        }
        acc.value()
    }

    /// Equilibrium potential `h_{A,B}` and `cap(A, B) = 𝒟(h)`.
    pub fn equilibrium_potential(&self, a: &[usize], b: &[usize]) -> Result<PotentialSolution> {
        self.equilibrium_potential_with(a, b, &SolveOptions::default())
    }

    /// Equilibrium potential with solver hints.
    pub fn equilibrium_potential_with(
        &self,
        a: &[usize],
        b: &[usize],
        opts: &SolveOptions,
    ) -> Result<PotentialSolution> {
        let mut fixed = vec![None; self.len()];
        for &v in b {
            fixed[v] = Some(0.0);
        }
        for &v in a {
            if fixed[v].is_some() {
                return Err(Error::InvalidInput("A and B must be disjoint".into()));
            }
            fixed[v] = Some(1.0);
        }
        if a.is_empty() || b.is_empty() {
            return Err(Error::InvalidInput("A and B must be nonempty".into()));
        }
        let sys = InteriorSystem::new(self, &fixed, opts)?;
        let (h, residual) = sys.solve(&fixed, None, opts)?;
        let cap = self.dirichlet_form(&h);
        Ok(PotentialSolution { h, cap, residual })
    }

    /// `cap(A, B)`.
    pub fn capacity(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        Ok(self.equilibrium_potential(a, b)?.cap)
    }

    /// Harmonic extension of `g` given on `w_set` (values in the same order).
    pub fn harmonic_extension(&self, w_set: &[usize], g: &[f64]) -> Result<Vec<f64>> {
        let mut fixed = vec![None; self.len()];
        for (&w, &val) in w_set.iter().zip(g) {
            fixed[w] = Some(val);
        }
        let sys = InteriorSystem::new(self, &fixed, &SolveOptions::default())?;
        Ok(sys.solve(&fixed, None, &SolveOptions::default())?.0)
    }

    /// Mean hitting time `E_v[T_B]` from the magic formula and from the
    /// direct Poisson equation.
    pub fn mean_hitting_time(&self, v: usize, b: &[usize]) -> Result<HittingTime> {
        if b.contains(&v) {
            return Ok(HittingTime { magic: 0.0, direct: 0.0 });
        }
        let pot = self.equilibrium_potential(&[v], b)?;
        let mut num = KahanSum::default();
        for (p, h) in self.pi.iter().zip(&pot.h) {
            num.add(p * h);
        }
        let magic = num.value() / pot.cap;
        let mut fixed = vec![None; self.len()];
        for &w in b {
            fixed[w] = Some(0.0);
        }
        let sys = InteriorSystem::new(self, &fixed, &SolveOptions::default())?;
        let (e, _) = sys.solve(&fixed, Some(&self.pi), &SolveOptions::default())?;
        Ok(HittingTime { magic, direct: e[v] })
    }

    /// Trace of the chain on `w_set`; the returned chain is indexed by the
    /// positions in `w_set` and carries `π` restricted and renormalized.
    pub fn trace(&self, w_set: &[usize]) -> Result<ReversibleChain> {
        let k = w_set.len();
        if k == 0 {
            return Err(Error::InvalidInput("trace set must be nonempty".into()));
        }
        let rates = self.trace_rates(w_set)?;
        let pi: Vec<f64> = w_set.iter().map(|&w| self.pi[w]).collect();
        let total: f64 = pi.iter().sum();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (i, row) in rates.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if i != j && r > 0.0 {
                    cols.push(j as u32);
                    vals.push(r);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(ReversibleChain::from_csr_unchecked(
            pi.iter().map(|p| p / total).collect(),
            row_ptr,
            cols,
            vals,
        ))
    }

    /// Dense trace rates `R^W(w, w′)` on `w_set`, symmetrized through
    /// detailed balance. The diagonal is zero.
    pub fn trace_rates(&self, w_set: &[usize]) -> Result<Vec<Vec<f64>>> {
        let k = w_set.len();
        let mut out = vec![vec![0.0; k]; k];
        if k == self.len() {
            for (i, &v) in w_set.iter().enumerate() {
                for (j, &w) in w_set.iter().enumerate() {
                    if i != j {
                        out[i][j] = self.rate(v, w);
                    }
                }
            }
            return Ok(out);
        }
        let mut fixed = vec![None; self.len()];
        for &w in w_set {
            fixed[w] = Some(0.0);
        }
        let sys = InteriorSystem::new(self, &fixed, &SolveOptions::default())?;
        for (j, &wj) in w_set.iter().enumerate() {
            let mut vals = fixed.clone();
            vals[wj] = Some(1.0);
            let (u, _) = sys.solve(&vals, None, &SolveOptions::default())?;
            for (i, &wi) in w_set.iter().enumerate() {
                if i == j {
                    continue;
                }
                let mut acc = self.rate(wi, wj);
                for (v, r) in self.row(wi) {
                    if fixed[v].is_none() {
                        acc += r * u[v];
                    }
                }
                out[i][j] = acc;
            }
        }
        for i in 0..k {
            for j in (i + 1)..k {
                let (pi, pj) = (self.pi[w_set[i]], self.pi[w_set[j]]);
                let c = 0.5 * (pi * out[i][j] + pj * out[j][i]);
                out[i][j] = c / pi;
                out[j][i] = c / pj;
            }
        }
        Ok(out)
    }

    /// Divergence `(div φ)(v) = Σ_w φ(v, w)` at every state.
    pub fn flow_divergence(&self, phi: &FlowField) -> Vec<f64> {
        let mut div = vec![0.0; self.len()];
        for (&(v, w), &val) in &phi.values {
            div[v] += val;
            div[w] -= val;
        }
        div
    }

    /// `‖φ‖² = Σ_{unordered edges} φ(v, w)² / (π(v) R(v, w))`.
    pub fn flow_norm(&self, phi: &FlowField) -> Result<f64> {
        let mut acc = KahanSum::default();
        for (&(v, w), &val) in &phi.values {
            if val == 0.0 {
                continue;
            }
            let c = self.conductance(v, w);
            if !(c > 0.0) {
                return Err(Error::NotAFlow { state: v.to_string(), divergence: f64::NAN });
            }
            acc.add(val * val / c);
        }
        Ok(acc.value())
    }

    /// Checks that `φ` is a flow from `A` to `B` and returns its value.
    pub fn validate_flow(&self, phi: &FlowField, a: &[usize], b: &[usize]) -> Result<f64> {
        let div = self.flow_divergence(phi);
        let scale = phi.max_abs();
        let mut boundary = vec![false; self.len()];
        for &v in a.iter().chain(b) {
            boundary[v] = true;
        }
        for (&(v, w), &val) in &phi.values {
            if val != 0.0 && !(self.conductance(v, w) > 0.0) {
                return Err(Error::NotAFlow { state: v.to_string(), divergence: f64::NAN });
            }
        }
        let worst = (0..self.len())
            .filter(|&v| !boundary[v])
            .max_by(|&p, &q| div[p].abs().total_cmp(&div[q].abs()));
        if let Some(v) = worst {
            if div[v].abs() > 1e-12 * scale {
                return Err(Error::NotAFlow { state: v.to_string(), divergence: div[v] });
            }
        }
        let gamma: f64 = a.iter().map(|&v| div[v]).sum();
        let out: f64 = b.iter().map(|&v| div[v]).sum();
        if (gamma + out).abs() > 1e-10 * scale.max(gamma.abs()) {
            let v = b.first().copied().unwrap_or(0);
            return Err(Error::NotAFlow { state: v.to_string(), divergence: gamma + out });
        }
        Ok(gamma)
    }

    /// Thomson lower bound `γ² / ‖φ‖²` for a flow of value `γ` from A to B.
    pub fn thomson_bound(&self, phi: &FlowField, a: &[usize], b: &[usize]) -> Result<f64> {
        let gamma = self.validate_flow(phi, a, b)?;
        let norm = self.flow_norm(phi)?;
        Ok(if norm > 0.0 { gamma * gamma / norm } else { 0.0 })
    }

    /// Harmonic flow `Φ(v, w) = π(v) R(v, w) (h(v) − h(w))`.
    pub fn harmonic_flow(&self, h: &[f64]) -> FlowField {
        let mut phi = FlowField::default();
        for v in 0..self.len() {
            for (w, r) in self.row(v) {
                if w > v {
                    phi.set(v, w, self.pi[v] * r * (h[v] - h[w]));
                }
            }
        }
        phi
    }
}

/// Optional hints for the large-system iterative solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveOptions<'a> {
    /// Aggregate label per state; states sharing a label span one vector of
    /// the coarse space.
    pub coarse_labels: Option<&'a [u32]>,
    /// Initial guess on all states (boundary entries are ignored).
    pub initial: Option<&'a [f64]>,
}

/// Equilibrium potential with its capacity and solver diagnostics.
#[derive(Debug, Clone)]
pub struct PotentialSolution {
    pub h: Vec<f64>,
    pub cap: f64,
    /// Relative residual of the interior linear system.
    pub residual: f64,
}

/// Mean hitting time computed two ways.
#[derive(Debug, Clone, Copy)]
pub struct HittingTime {
    pub magic: f64,
    pub direct: f64,
}

/// Antisymmetric function on ordered edges, stored once per unordered pair.
#[derive(Debug, Clone, Default)]
pub struct FlowField {
    values: HashMap<(usize, usize), f64>,
}

impl FlowField {
    /// Builds a flow from directed entries; entries given in both
    /// directions must be exact negatives of each other.
    pub fn from_directed(entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut seen: HashMap<(usize, usize), f64> = HashMap::new();
        for &(v, w, val) in entries {
            if v == w {
                if val != 0.0 {
                    return Err(Error::NotAFlow { state: v.to_string(), divergence: val });
                }
                continue;
            }
            let (key, canon) = if v < w { ((v, w), val) } else { ((w, v), -val) };
            if let Some(&prev) = seen.get(&key) {
                if prev != canon {
                    return Err(Error::NotAFlow { state: v.to_string(), divergence: prev - canon });
                }
            }
            seen.insert(key, canon);
        }
        Ok(FlowField { values: seen })
    }

    /// `φ(v, w)`.
    pub fn get(&self, v: usize, w: usize) -> f64 {
        if v < w {
            self.values.get(&(v, w)).copied().unwrap_or(0.0)
        } else {
            -self.values.get(&(w, v)).copied().unwrap_or(0.0)
        }
    }

    /// Sets `φ(v, w) = val` and `φ(w, v) = −val`.
    pub fn set(&mut self, v: usize, w: usize, val: f64) {
        if v < w {
            self.values.insert((v, w), val);
        } else {
            self.values.insert((w, v), -val);
        }
    }

    /// Adds `val` to `φ(v, w)`.
    pub fn add(&mut self, v: usize, w: usize, val: f64) {
        if v < w {
            *self.values.entry((v, w)).or_insert(0.0) += val;
        } else {
            *self.values.entry((w, v)).or_insert(0.0) -= val;
        }
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

    /// Iterates over `((v, w), φ(v, w))` with `v < w`.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.values.values_mut() {
            *v *= s;
        }
    }
}

/// Compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Symmetric positive-definite system for the unknowns off a boundary set,
/// diagonally rescaled to unit diagonal.
struct InteriorSystem {
    interior: Vec<usize>,
    sqrt_diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    /// `(interior index, boundary state, conductance)`.
    coupling: Vec<(u32, usize, f64)>,
    factor: Option<Cholesky<usize, f64>>,
    coarse: Option<Coarse>,
}

/// Piecewise-constant coarse space used as an additive two-level
/// preconditioner for conjugate gradients.
struct Coarse {
    label: Vec<u32>,
    factor: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
}

const NOT_INTERIOR: u32 = u32::MAX;

impl InteriorSystem {
    fn new(chain: &ReversibleChain, fixed: &[Option<f64>], opts: &SolveOptions) -> Result<Self> {
        let n = chain.len();
        let interior: Vec<usize> = (0..n).filter(|&v| fixed[v].is_none()).collect();
        let mut local = vec![NOT_INTERIOR; n];
        for (i, &v) in interior.iter().enumerate() {
            local[v] = i as u32;
        }
        let sqrt_diag: Vec<f64> = interior
            .iter()
            .map(|&v| (chain.pi[v] * chain.row(v).map(|(_, r)| r).sum::<f64>()).sqrt())
            .collect();
        if let Some(i) = sqrt_diag.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::SingularSystem(format!("state {} has no outgoing rate", interior[i])));
        }
        let mut row_ptr = Vec::with_capacity(interior.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut coupling = Vec::new();
        row_ptr.push(0);
        for (i, &v) in interior.iter().enumerate() {
            for (w, r) in chain.row(v) {
                let c = chain.pi[v] * r;
                let j = local[w];
                if j != NOT_INTERIOR {
                    cols.push(j);
                    vals.push(-c / (sqrt_diag[i] * sqrt_diag[j as usize]));
                } else {
                    coupling.push((i as u32, w, c));
                }
            }
            row_ptr.push(cols.len());
        }
        let mut sys = InteriorSystem {
            interior,
            sqrt_diag,
            row_ptr,
            cols,
            vals,
            coupling,
            factor: None,
            coarse: None,
        };
        if sys.interior.is_empty() {
            return Ok(sys);
        }
        if sys.interior.len() <= DIRECT_LIMIT {
            sys.factorize()?;
        } else if let Some(labels) = opts.coarse_labels {
            sys.build_coarse(labels)?;
        }
        Ok(sys)
    }

    fn build_coarse(&mut self, labels: &[u32]) -> Result<()> {
        let mut index = std::collections::BTreeMap::new();
        for &v in &self.interior {
            let next = index.len() as u32;
            index.entry(labels[v]).or_insert(next);
        }
        let k = index.len();
        if k > 4096 {
            return Ok(());
        }
        let label: Vec<u32> = self.interior.iter().map(|&v| index[&labels[v]]).collect();
        // Coarse operator Pᵀ Ã P with P[i, t] = sqrt_diag[i] on aggregate t.
        let mut a = nalgebra::DMatrix::<f64>::zeros(k, k);
        for i in 0..self.interior.len() {
            let (t, di) = (label[i] as usize, self.sqrt_diag[i]);
            a[(t, t)] += di * di;
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[e] as usize;
                a[(t, label[j] as usize)] += self.vals[e] * di * self.sqrt_diag[j];
            }
        }
        let a = 0.5 * (&a + a.transpose());
        let factor = a
            .cholesky()
            .ok_or_else(|| Error::SingularSystem("coarse operator is not positive definite".into()))?;
        self.coarse = Some(Coarse { label, factor });
        Ok(())
    }

    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        if let Some(c) = &self.coarse {
            let k = c.factor.l_dirty().nrows();
            let mut rc = nalgebra::DVector::<f64>::zeros(k);
            for (i, &t) in c.label.iter().enumerate() {
                rc[t as usize] += self.sqrt_diag[i] * r[i];
            }
            c.factor.solve_mut(&mut rc);
            for (i, &t) in c.label.iter().enumerate() {
                z[i] += self.sqrt_diag[i] * rc[t as usize];
            }
        }
    }

    fn factorize(&mut self) -> Result<()> {
        let m = self.interior.len();
        let mut triplets = Vec::with_capacity(self.vals.len() + m);
        for i in 0..m {
            triplets.push((i, i, 1.0));
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                triplets.push((i, self.cols[k] as usize, self.vals[k]));
            }
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(m, m, &triplets)
            .map_err(|e| Error::SingularSystem(format!("{e:?}")))?;
        let chol = mat
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::SingularSystem(format!("{e:?}")))?;
        self.factor = Some(chol);
        Ok(())
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *yi = acc;
        }
    }

    /// Solves `Σ_w π(v)R(v,w)(u(v) − u(w)) = s(v)` off the boundary with
    /// `u = fixed` on it. Returns the full vector and the relative residual
    /// of the rescaled system.
    fn solve(
        &self,
        fixed: &[Option<f64>],
        source: Option<&[f64]>,
        opts: &SolveOptions,
    ) -> Result<(Vec<f64>, f64)> {
        let m = self.interior.len();
        let mut full: Vec<f64> = fixed.iter().map(|v| v.unwrap_or(0.0)).collect();
        if m == 0 {
            return Ok((full, 0.0));
        }
        let mut b = vec![0.0; m];
        if let Some(s) = source {
            for (i, &v) in self.interior.iter().enumerate() {
                b[i] = s[v];
            }
        }
        for &(i, w, c) in &self.coupling {
            b[i as usize] += c * full[w];
        }
        for (bi, d) in b.iter_mut().zip(&self.sqrt_diag) {
            *bi /= d;
        }
        let y = match &self.factor {
            Some(chol) => {
                let mut col = Col::<f64>::from_fn(m, |i| b[i]);
                chol.solve_in_place(col.as_mut());
                let mut y: Vec<f64> = (0..m).map(|i| col[i]).collect();
                // One step of iterative refinement.
                let mut r = vec![0.0; m];
                self.matvec(&y, &mut r);
                let mut corr = Col::<f64>::from_fn(m, |i| b[i] - r[i]);
                chol.solve_in_place(corr.as_mut());
                for (yi, i) in y.iter_mut().zip(0..m) {
                    *yi += corr[i];
                }
                y
            }
            None => {
                let x0 = opts.initial.map(|init| {
                    self.interior
                        .iter()
                        .zip(&self.sqrt_diag)
                        .map(|(&v, d)| init[v] * d)
                        .collect::<Vec<f64>>()
                });
                self.pcg(&b, x0)?
            }
        };
        let mut r = vec![0.0; m];
        self.matvec(&y, &mut r);
        let bnorm = norm(&b);
        let rnorm = r.iter().zip(&b).map(|(ri, bi)| (ri - bi) * (ri - bi)).sum::<f64>().sqrt();
        let residual = if bnorm > 0.0 { rnorm / bnorm } else { rnorm };
        for (i, &v) in self.interior.iter().enumerate() {
            full[v] = y[i] / self.sqrt_diag[i];
        }
        Ok((full, residual))
    }

    /// Preconditioned conjugate gradients on the unit-diagonal system.
    fn pcg(&self, b: &[f64], x0: Option<Vec<f64>>) -> Result<Vec<f64>> {
        let m = b.len();
        let bnorm = norm(b);
        let mut x = x0.unwrap_or_else(|| vec![0.0; m]);
        if bnorm == 0.0 {
            return Ok(vec![0.0; m]);
        }
        let mut r = vec![0.0; m];
        self.matvec(&x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let mut z = vec![0.0; m];
        self.precondition(&r, &mut z);
        let mut p = z.clone();
        let mut ap = vec![0.0; m];
        let mut rz = dot(&r, &z);
        let max_iter = 20 * m + 1000;
        for _ in 0..max_iter {
            if norm(&r) <= CG_TOL * bnorm {
                return Ok(x);
            }
            self.matvec(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..m {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            self.precondition(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..m {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::SingularSystem(format!(
            "conjugate gradients stalled at relative residual {:.3e}",
            norm(&r) / bnorm
        )))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
