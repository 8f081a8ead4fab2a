//! N-particle configuration space of the inclusion process, its jump rates
//! and the product-form stationary measure in log domain.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::graph_model::{MetastableHierarchy, SiteGraph};
use crate::potential_theory::ReversibleChain;

/// Default cap on the number of enumerated configurations.
pub const DEFAULT_BUDGET: usize = 5_000_000;

/// Occupation count type.
pub type Occ = u16;

/// Policy for the diffusion parameter `d_N`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "c", rename_all = "snake_case")]
pub enum DPolicy {
    /// `d_N = c`.
    Constant(f64),
    /// `d_N = c / log(N + e)`.
    Schedule(f64),
}

impl DPolicy {
    pub fn d(&self, n: usize) -> f64 {
        match *self {
            DPolicy::Constant(c) => c,
            DPolicy::Schedule(c) => c / (n as f64 + std::f64::consts::E).ln(),
        }
    }
}

/// Binomial coefficient as `u128`, saturating on overflow.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// `|ℋ_N| = C(N + |S| − 1, |S| − 1)`.
pub fn cardinality(n_sites: usize, n: usize) -> u128 {
    binomial((n + n_sites - 1) as u64, (n_sites - 1) as u64)
}

/// Enumerated `ℋ_N` with colexicographic indexing.
///
/// A configuration `η` is identified with the bar positions
/// `p_i = i + η_0 + … + η_i` for `i < |S| − 1`; its index is
/// `Σ_i C(p_i, i + 1)`.
#[derive(Debug, Clone)]
pub struct ConfigSpace {
    n_sites: usize,
    n: usize,
    d: f64,
    site_edges: Vec<(usize, usize, f64)>,
    site_measure: Vec<f64>,
    binom: Vec<Vec<u64>>,
    occ: Vec<Occ>,
}

impl ConfigSpace {
    /// Enumerates `ℋ_N` for the given graph.
    pub fn enumerate(g: &SiteGraph, n: usize, d: f64, budget: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("N must be at least 1".into()));
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::InvalidInput(format!("d_N = {d} must be positive")));
        }
        if n > Occ::MAX as usize {
            return Err(Error::InvalidInput(format!("N = {n} exceeds {}", Occ::MAX)));
        }
        let s = g.len();
        let card = cardinality(s, n);
        if card > budget as u128 {
            return Err(Error::SpaceTooLarge { cardinality: card, budget });
        }
        let count = card as usize;
        let top = n + s;
        let binom: Vec<Vec<u64>> = (0..=top)
            .map(|p| (0..s.max(2)).map(|k| binomial(p as u64, k as u64) as u64).collect())
            .collect();
        let mut cs = ConfigSpace {
            n_sites: s,
            n,
            d,
            site_edges: g.edges(),
            site_measure: g.measure().to_vec(),
            binom,
            occ: vec![0; count * s],
        };
        let mut eta = vec![0 as Occ; s];
        cs.fill(&mut eta, 0, n);
        Ok(cs)
    }

    fn fill(&mut self, eta: &mut [Occ], site: usize, left: usize) {
        let s = self.n_sites;
        if site == s - 1 {
            eta[site] = left as Occ;
            let i = self.rank(eta);
            self.occ[i * s..(i + 1) * s].copy_from_slice(eta);
            return;
        }
        for k in 0..=left {
            eta[site] = k as Occ;
            self.fill(eta, site + 1, left - k);
        }
        eta[site] = 0;
    }

    pub fn len(&self) -> usize {
        self.occ.len() / self.n_sites
    }

    pub fn is_empty(&self) -> bool {
        self.occ.is_empty()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Number of particles `N`.
    pub fn n_particles(&self) -> usize {
        self.n
    }

    /// Diffusion parameter `d_N`.
    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn site_measure(&self) -> &[f64] {
        &self.site_measure
    }

    /// Directed positive-rate site edges `(x, y, r(x, y))`.
    pub fn site_edges(&self) -> &[(usize, usize, f64)] {
        &self.site_edges
    }

    /// Occupations of configuration `i`.
    pub fn config(&self, i: usize) -> &[Occ] {
        &self.occ[i * self.n_sites..(i + 1) * self.n_sites]
    }

    /// Colex index of a configuration.
    pub fn rank(&self, eta: &[Occ]) -> usize {
        let mut p = 0usize;
        let mut r = 0u64;
        for (i, &e) in eta[..self.n_sites - 1].iter().enumerate() {
            p += e as usize;
            r += self.binom[p + i][i + 1];
        }
        r as usize
    }

    /// Colex index, or `None` if `eta` is not in `ℋ_N`.
    pub fn try_rank(&self, eta: &[Occ]) -> Option<usize> {
        (eta.len() == self.n_sites && eta.iter().map(|&e| e as usize).sum::<usize>() == self.n)
            .then(|| self.rank(eta))
    }

    /// Configuration with all particles at `x`.
    pub fn condensate(&self, x: usize) -> usize {
        let mut eta = vec![0; self.n_sites];
        eta[x] = self.n as Occ;
        self.rank(&eta)
    }

    /// Rate `η_x (d_N + η_y) r(x, y)` of moving one particle from `x` to `y`.
    pub fn move_rate(&self, eta: &[Occ], x: usize, y: usize, r: f64) -> f64 {
        eta[x] as f64 * (self.d + eta[y] as f64) * r
    }

    /// Positive-rate moves out of configuration `i` as `(target, rate)`.
    pub fn moves(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let eta = self.config(i);
        self.site_edges.iter().filter_map(move |&(x, y, r)| {
            if eta[x] == 0 {
                return None;
            }
            let mut zeta = eta.to_vec();
            zeta[x] -= 1;
            zeta[y] += 1;
            Some((self.rank(&zeta), self.move_rate(eta, x, y, r)))
        })
    }

    /// Stationary weights in log domain.
    pub fn stationary_measure(&self) -> MeasureTable {
        let log_w = log_w_table(self.n, self.d);
        let log_m: Vec<f64> = self.site_measure.iter().map(|m| m.ln()).collect();
        let log_weights: Vec<f64> = (0..self.len())
            .map(|i| {
                self.config(i)
                    .iter()
                    .zip(&log_m)
                    .map(|(&e, lm)| log_w[e as usize] + e as f64 * lm)
                    .sum()
            })
            .collect();
        let log_z = log_sum_exp(&log_weights);
        MeasureTable { log_w, log_m, log_weights, log_z }
    }

    /// Inclusion process as a generic reversible chain.
    pub fn chain(&self, mt: &MeasureTable) -> Result<ReversibleChain> {
        let pi: Vec<f64> = (0..self.len()).map(|i| mt.prob(i)).collect();
        if pi.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidInput(
                "stationary probabilities underflow; reduce N".into(),
            ));
        }
        let mut row_ptr = Vec::with_capacity(self.len() + 1);
        let mut cols = Vec::with_capacity(self.len() * self.site_edges.len());
        let mut rates = Vec::with_capacity(self.len() * self.site_edges.len());
        row_ptr.push(0);
        let mut row: Vec<(u32, f64)> = Vec::with_capacity(self.site_edges.len());
        for i in 0..self.len() {
            row.clear();
            row.extend(self.moves(i).map(|(j, r)| (j as u32, r)));
            row.sort_unstable_by_key(|e| e.0);
            for &(j, r) in &row {
                cols.push(j);
                rates.push(r);
            }
            row_ptr.push(cols.len());
        }
        Ok(ReversibleChain::from_csr_unchecked(pi, row_ptr, cols, rates))
    }

    /// `η(A) = Σ_{x ∈ A} η_x`.
    pub fn mass(&self, i: usize, sites: &[usize]) -> usize {
        let eta = self.config(i);
        sites.iter().map(|&x| eta[x] as usize).sum()
    }
}

/// `log w_N(n)` for `n = 0..=N`, with `w_N(n) = Γ(d + n) / (n! Γ(d))`.
pub fn log_w_table(n: usize, d: f64) -> Vec<f64> {
    let base = ln_gamma(d);
    (0..=n)
        .map(|k| ln_gamma(d + k as f64) - ln_gamma(k as f64 + 1.0) - base)
        .collect()
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let y = (x - max).exp() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    max + sum.ln()
}

/// Log-domain stationary weights of `ℋ_N`.
#[derive(Debug, Clone)]
pub struct MeasureTable {
    /// `log w_N(n)`.
    pub log_w: Vec<f64>,
    /// `log m_x`.
    pub log_m: Vec<f64>,
    /// Unnormalized `log Π_x w_N(η_x) m_x^{η_x}` per configuration.
    pub log_weights: Vec<f64>,
    /// `log Z_N`.
    pub log_z: f64,
}

impl MeasureTable {
    pub fn log_prob(&self, i: usize) -> f64 {
        self.log_weights[i] - self.log_z
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.log_prob(i).exp()
    }

    /// `μ_N(ξ^x)`.
    pub fn condensate_prob(&self, x: usize) -> f64 {
        let n = self.log_w.len() - 1;
        (self.log_w[n] + n as f64 * self.log_m[x] - self.log_z).exp()
    }

    /// `μ_N(ℰ^x)` for each `x ∈ S⋆` and the remaining mass.
    pub fn condensation_profile(&self, h: &MetastableHierarchy) -> CondensationProfile {
        let wells: Vec<(usize, f64)> =
            h.s_star.iter().map(|&x| (x, self.condensate_prob(x))).collect();
        let remainder = 1.0 - wells.iter().map(|w| w.1).sum::<f64>();
        CondensationProfile { wells, remainder }
    }
}

/// Equilibrium mass of each condensate and of everything else.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CondensationProfile {
    pub wells: Vec<(usize, f64)>,
    pub remainder: f64,
}

/// `log Z_N` by log-domain convolution over sites, without enumeration.
pub fn log_partition(measure: &[f64], n: usize, d: f64) -> f64 {
    let log_w = log_w_table(n, d);
    let mut acc: Vec<f64> = vec![f64::NEG_INFINITY; n + 1];
    acc[0] = 0.0;
    for &m in measure {
        let lm = m.ln();
        let term: Vec<f64> = (0..=n).map(|k| log_w[k] + k as f64 * lm).collect();
        let mut next = vec![f64::NEG_INFINITY; n + 1];
        let mut buf = Vec::with_capacity(n + 1);
        for (t, slot) in next.iter_mut().enumerate() {
            buf.clear();
            buf.extend((0..=t).map(|k| acc[t - k] + term[k]));
            *slot = log_sum_exp(&buf);
        }
        acc = next;
    }
    acc[n]
}

/// `μ_N(ℰ^x)` for each site in `S⋆` and the remainder, by convolution.
pub fn condensation_profile_from_graph(g: &SiteGraph, n: usize, d: f64) -> CondensationProfile {
    let log_z = log_partition(g.measure(), n, d);
    let log_wn = log_w_table(n, d)[n];
    let wells: Vec<(usize, f64)> = g
        .s_star()
        .into_iter()
        .map(|x| (x, (log_wn + n as f64 * g.m(x).ln() - log_z).exp()))
        .collect();
    let remainder = 1.0 - wells.iter().map(|w| w.1).sum::<f64>();
    CondensationProfile { wells, remainder }
}
