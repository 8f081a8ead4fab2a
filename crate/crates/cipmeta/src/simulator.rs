//! Exact-clock simulation of the inclusion process.
//!
//! Every replica draws from its own ChaCha stream keyed by `(seed, replica)`,
//! so results do not depend on how replicas are scheduled across threads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config_space::{ConfigSpace, MeasureTable, Occ};
use crate::error::{Error, Result};
use crate::graph_model::MetastableHierarchy;

pub const DEFAULT_MAX_EVENTS: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimConfig {
    pub seed: u64,
    pub replicas: u64,
    pub max_events: u64,
}

impl SimConfig {
    pub fn new(seed: u64, replicas: u64) -> Self {
        SimConfig { seed, replicas, max_events: DEFAULT_MAX_EVENTS }
    }

    fn check(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::InvalidInput("at least one replica is required".into()));
        }
        Ok(())
    }
}

/// Random stream of one replica.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

#[derive(Debug, Clone, Serialize)]
pub struct HittingSample {
    pub times: Vec<f64>,
    pub events: Vec<u64>,
    pub mean: f64,
    pub stderr: f64,
    pub exact_reference: Option<f64>,
}

impl HittingSample {
    fn from_runs(runs: Vec<(f64, u64)>) -> Self {
        let (times, events): (Vec<f64>, Vec<u64>) = runs.into_iter().unzip();
        let r = times.len() as f64;
        let mean = times.iter().sum::<f64>() / r;
        let var = if times.len() > 1 {
            times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (r - 1.0)
        } else {
            0.0
        };
        HittingSample { times, events, mean, stderr: (var / r).sqrt(), exact_reference: None }
    }
}

/// One Gillespie trajectory on the occupation vector.
struct Walker<'a> {
    cs: &'a ConfigSpace,
    eta: Vec<Occ>,
    rates: Vec<f64>,
}

impl<'a> Walker<'a> {
    fn new(cs: &'a ConfigSpace, start: usize) -> Self {
        Walker { cs, eta: cs.config(start).to_vec(), rates: vec![0.0; cs.site_edges().len()] }
    }

    /// Advances one event; returns the holding time spent before it.
    fn step(&mut self, rng: &mut ChaCha20Rng) -> f64 {
        let mut total = 0.0;
        for (slot, &(x, y, r)) in self.rates.iter_mut().zip(self.cs.site_edges()) {
            *slot = self.cs.move_rate(&self.eta, x, y, r);
            total += *slot;
        }
        let hold = -(1.0 - rng.gen::<f64>()).ln() / total;
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = self.rates.len() - 1;
        for (e, &r) in self.rates.iter().enumerate() {
            if pick < r {
                chosen = e;
                break;
            }
            pick -= r;
        }
        while self.rates[chosen] == 0.0 {
            chosen -= 1;
        }
        let (x, y, _) = self.cs.site_edges()[chosen];
        self.eta[x] -= 1;
        self.eta[y] += 1;
        hold
    }

    fn state(&self) -> usize {
        self.cs.rank(&self.eta)
    }
}

/// Hitting time of `targets` from configuration `start`, per replica.
pub fn simulate_until(cs: &ConfigSpace, start: usize, targets: &[usize], cfg: &SimConfig) -> Result<HittingSample> {
    cfg.check()?;
    if targets.is_empty() {
        return Err(Error::InvalidInput("empty target set".into()));
    }
    let mut is_target = vec![false; cs.len()];
    for &t in targets {
        *is_target
            .get_mut(t)
            .ok_or_else(|| Error::InvalidInput(format!("target {t} is not a configuration")))? = true;
    }
    let runs = (0..cfg.replicas)
        .into_par_iter()
        .map(|replica| {
            let mut rng = replica_rng(cfg.seed, replica);
            let mut w = Walker::new(cs, start);
            let (mut t, mut events) = (0.0, 0u64);
            while !is_target[w.state()] {
                if events >= cfg.max_events {
                    return Err(Error::EventCapExceeded { replica, cap: cfg.max_events });
                }
                t += w.step(&mut rng);
                events += 1;
            }
            Ok((t, events))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HittingSample::from_runs(runs))
}

/// Simulated mean hitting time against the exact value from the magic formula.
#[derive(Debug, Clone, Serialize)]
pub struct MagicComparison {
    pub sample: HittingSample,
    pub exact: f64,
    pub deviation: f64,
    pub pass: bool,
}

pub fn empirical_vs_magic(
    cs: &ConfigSpace,
    mt: &MeasureTable,
    start: usize,
    targets: &[usize],
    cfg: &SimConfig,
) -> Result<MagicComparison> {
    let exact = if targets.contains(&start) {
        0.0
    } else {
        cs.chain(mt)?.mean_hitting_time(start, targets)?.magic
    };
    let mut sample = simulate_until(cs, start, targets, cfg)?;
    sample.exact_reference = Some(exact);
    let deviation = (sample.mean - exact).abs();
    let pass = deviation <= 3.0 * sample.stderr;
    Ok(MagicComparison { sample, exact, deviation, pass })
}

/// Law of the projected state at time `α` and the time spent away from
/// the condensates of `S⋆`.
#[derive(Debug, Clone, Serialize)]
pub struct Census {
    pub alpha: f64,
    /// `(site, fraction of replicas condensed there at time α)`.
    pub at_alpha: Vec<(usize, f64)>,
    /// Fraction of replicas not condensed on `S⋆` at time `α`.
    pub outside_at_alpha: f64,
    /// Mean fraction of `[0, α]` spent outside the condensates.
    pub outside_occupation: f64,
    /// Mean fraction of `[0, α]` spent in the starting configuration.
    pub start_occupation: f64,
}

pub fn timescale_census(
    cs: &ConfigSpace,
    h: &MetastableHierarchy,
    start: usize,
    alpha: f64,
    cfg: &SimConfig,
) -> Result<Census> {
    cfg.check()?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("time horizon {alpha} must be positive")));
    }
    let wells: Vec<(usize, usize)> = h.s_star.iter().map(|&x| (x, cs.condensate(x))).collect();
    let well_of = |i: usize| wells.iter().position(|w| w.1 == i);
    let runs = (0..cfg.replicas)
        .into_par_iter()
        .map(|replica| {
            let mut rng = replica_rng(cfg.seed, replica);
            let mut w = Walker::new(cs, start);
            let (mut t, mut outside, mut home, mut events) = (0.0, 0.0, 0.0, 0u64);
            loop {
                let here = w.state();
                let hold = w.step(&mut rng);
                let dt = hold.min(alpha - t);
                if well_of(here).is_none() {
                    outside += dt;
                }
                if here == start {
                    home += dt;
                }
                t += hold;
                events += 1;
                if t >= alpha {
                    return Ok((well_of(here), outside / alpha, home / alpha));
                }
                if events >= cfg.max_events {
                    return Err(Error::EventCapExceeded { replica, cap: cfg.max_events });
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let r = runs.len() as f64;
    let at_alpha = wells
        .iter()
        .enumerate()
        .map(|(k, &(x, _))| (x, runs.iter().filter(|run| run.0 == Some(k)).count() as f64 / r))
        .collect::<Vec<_>>();
    Ok(Census {
        alpha,
        outside_at_alpha: runs.iter().filter(|run| run.0.is_none()).count() as f64 / r,
        at_alpha,
        outside_occupation: runs.iter().map(|run| run.1).sum::<f64>() / r,
        start_occupation: runs.iter().map(|run| run.2).sum::<f64>() / r,
    })
}

/// Jumps between configurations over `[0, horizon]`, summed over replicas;
/// `counts[(i, j)]` is the number of `i → j` moves.
pub fn jump_counts(
    cs: &ConfigSpace,
    start: usize,
    horizon: f64,
    cfg: &SimConfig,
) -> Result<BTreeMap<(usize, usize), u64>> {
    cfg.check()?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("time horizon {horizon} must be positive")));
    }
    let per_replica = (0..cfg.replicas)
        .into_par_iter()
        .map(|replica| {
            let mut rng = replica_rng(cfg.seed, replica);
            let mut w = Walker::new(cs, start);
            let mut counts = BTreeMap::new();
            let (mut t, mut events) = (0.0, 0u64);
            let mut here = start;
            loop {
                t += w.step(&mut rng);
                if t > horizon {
                    return Ok(counts);
                }
                let next = w.state();
                *counts.entry((here, next)).or_insert(0) += 1;
                here = next;
                events += 1;
                if events >= cfg.max_events {
                    return Err(Error::EventCapExceeded { replica, cap: cfg.max_events });
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = BTreeMap::new();
    for counts in per_replica {
        for (k, v) in counts {
            *total.entry(k).or_insert(0) += v;
        }
    }
    Ok(total)
}
