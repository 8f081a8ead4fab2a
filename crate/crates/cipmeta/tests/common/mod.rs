#![allow(dead_code)]

use cipmeta::graph_model::SiteGraph;
use cipmeta::potential_theory::{FlowField, ReversibleChain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Graph with symmetric conductances `c_uv` and measure `m`; rates `c_uv / m_u`.
pub fn geometry(names: &[&str], measure: &[f64], edges: &[(usize, usize, f64)]) -> SiteGraph {
    let mut rates = Vec::new();
    for &(u, v, c) in edges {
        rates.push((u, v, c / measure[u]));
        rates.push((v, u, c / measure[v]));
    }
    SiteGraph::with_measure(names.iter().map(|s| s.to_string()).collect(), &rates, measure).unwrap()
}

/// Nine sites, two components, every pair type of the test flow.
/// `x = 0`, `y = 6`.
pub fn nine_site() -> SiteGraph {
    geometry(
        &["x", "a", "u", "v", "w", "b", "y", "z", "q"],
        &[1.0, 0.4, 0.5, 0.3, 0.6, 0.45, 1.0, 0.35, 0.55],
        &[
            (0, 1, 1.0),
            (1, 2, 0.7),
            (1, 3, 1.3),
            (2, 3, 0.5),
            (2, 4, 0.9),
            (3, 4, 1.1),
            (4, 5, 0.8),
            (5, 6, 1.0),
            (1, 7, 0.6),
            (7, 5, 0.4),
            (0, 8, 0.5),
            (8, 5, 0.3),
        ],
    )
}

/// `1/(6𝔎)` on [`nine_site`], frozen from a depth-640 solve.
pub const NINE_SITE_FLOW_LIMIT: f64 = 3.4283336979116705;

/// `x – a – y` with `m_a = 1/2`.
pub fn three_site() -> SiteGraph {
    geometry(&["x", "a", "y"], &[1.0, 0.5, 1.0], &[(0, 1, 1.0), (1, 2, 1.0)])
}

/// Random reversible chain on `n` states: random `π`, a random spanning
/// tree plus extra edges, symmetric conductances (parallel ones summed).
pub fn random_chain(n: usize, seed: u64) -> ReversibleChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let mut edges = Vec::new();
    let mut link = |v: usize, w: usize, c: f64| {
        edges.push((v, w, c / pi[v]));
        edges.push((w, v, c / pi[w]));
    };
    for v in 1..n {
        let w = rng.gen_range(0..v);
        link(v, w, rng.gen_range(0.1..2.0));
    }
    for v in 0..n {
        for w in (v + 1)..n {
            if rng.gen_bool(0.3) {
                link(v, w, rng.gen_range(0.1..2.0));
            }
        }
    }
    dedup(&mut edges);
    ReversibleChain::new(pi, &edges).unwrap()
}

/// Merges parallel entries by summing their rates.
fn dedup(edges: &mut Vec<(usize, usize, f64)>) {
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(edges.len());
    for &e in edges.iter() {
        match out.last_mut() {
            Some(last) if last.0 == e.0 && last.1 == e.1 => last.2 += e.2,
            _ => out.push(e),
        }
    }
    *edges = out;
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Random unit flow from `a` to `b`: edge weights accumulated along a random
/// walk, so loops cancel and only the net `a → b` transport remains.
pub fn random_walk_flow(c: &ReversibleChain, a: usize, b: usize, rng: &mut ChaCha8Rng) -> FlowField {
    let mut phi = FlowField::default();
    for _ in 0..rng.gen_range(1..4) {
        let weight = rng.gen_range(0.2..1.0);
        let mut v = a;
        while v != b {
            let nbrs: Vec<usize> = c.row(v).map(|(w, _)| w).collect();
            let w = nbrs[rng.gen_range(0..nbrs.len())];
            phi.add(v, w, weight);
            v = w;
        }
    }
    phi
}
