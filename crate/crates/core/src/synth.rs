//! Synthetic event streams with a planted ground-truth graph.
//!
//! Every ordered pair of nodes fires as an independent homogeneous Poisson
//! process: at rate `mu * rho` on planted edges and `mu` elsewhere. Part of
//! the planted graph is handed out as initial associations and part is
//! revealed through association events, so the stream looks like a small
//! real dataset with a known answer for attention recovery.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{ensure, Error, Result};
use crate::events::{save_associations, save_events, AssociationState, Event, EventKind, EventStream};
use crate::model::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWorld {
    pub n_nodes: usize,
    /// Fraction of unordered pairs that are planted edges.
    pub density: f64,
    /// Rate multiplier on planted edges.
    pub rho: f64,
    /// Base rate per ordered pair.
    pub mu: f64,
    pub horizon: f64,
    /// Fraction of planted edges given as initial associations.
    pub init_fraction: f64,
    /// Fraction of planted edges revealed by association events.
    pub reveal_fraction: f64,
    pub seed: u64,
}

pub const DEFAULT_HORIZON: f64 = 100.0;

impl PlantedWorld {
    /// World over `n_nodes` whose base rate yields `expected_events`
    /// communications on average over [`DEFAULT_HORIZON`].
    pub fn with_expected_events(n_nodes: usize, density: f64, rho: f64, expected_events: f64, seed: u64) -> Self {
        let mut w = PlantedWorld {
            n_nodes,
            density,
            rho,
            mu: 1.0,
            horizon: DEFAULT_HORIZON,
            init_fraction: 0.25,
            reveal_fraction: 0.25,
            seed,
        };
        w.mu = expected_events / (w.total_rate_per_mu() * w.horizon);
        w
    }

    /// N = 20, 10% density, rho = 8, about 5000 events.
    pub fn acceptance_default(seed: u64) -> Self {
        Self::with_expected_events(20, 0.1, 8.0, 5000.0, seed)
    }

    /// Number of planted unordered pairs.
    pub fn planted_edges(&self) -> usize {
        let pairs = self.n_nodes * self.n_nodes.saturating_sub(1) / 2;
        ((self.density * pairs as f64).round() as usize).min(pairs)
    }

    fn total_rate_per_mu(&self) -> f64 {
        let ordered = (self.n_nodes * self.n_nodes.saturating_sub(1)) as f64;
        let on = 2.0 * self.planted_edges() as f64;
        on * self.rho + (ordered - on)
    }

    /// Expected number of communication events.
    pub fn expected_events(&self) -> f64 {
        self.mu * self.total_rate_per_mu() * self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_nodes >= 2, Config, "need at least two nodes");
        ensure!(self.rho > 1.0, Config, "rho must exceed 1, got {}", self.rho);
        ensure!(self.mu > 0.0 && self.mu.is_finite(), Config, "mu must be positive");
        ensure!(self.horizon > 0.0 && self.horizon.is_finite(), Config, "horizon must be positive");
        ensure!((0.0..=1.0).contains(&self.density), Config, "density must be in [0, 1]");
        ensure!(
            self.init_fraction >= 0.0 && self.reveal_fraction >= 0.0 && self.init_fraction + self.reveal_fraction <= 1.0,
            Config,
            "init and reveal fractions must be non-negative and sum to at most 1"
        );
        Ok(())
    }
}

/// A generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub stream: EventStream,
    pub planted: AssociationState,
    pub assoc_init: AssociationState,
}

impl SynthData {
    /// Writes `events.csv`, `assoc_init.csv` and `planted.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = [dir.join("events.csv"), dir.join("assoc_init.csv"), dir.join("planted.csv")];
        save_events(&self.stream, &paths[0])?;
        save_associations(&self.assoc_init, &paths[1])?;
        save_associations(&self.planted, &paths[2])?;
        Ok(paths)
    }
}

/// Arrival times of a rate-`rate` Poisson process on `[0, horizon)`.
fn poisson_times(rate: f64, horizon: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = exp.sample(rng);
    while t < horizon {
        out.push(t);
        t += exp.sample(rng);
    }
    out
}

pub fn generate(world: &PlantedWorld) -> Result<SynthData> {
    world.validate()?;
    ensure!(world.expected_events() > 0.0, Validation, "world produces no events");
    let n = world.n_nodes;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();

    let mut rng = rng_for(world.seed, 0);
    let k = world.planted_edges();
    let mut chosen: Vec<usize> = sample(&mut rng, pairs.len(), k).into_vec();
    chosen.sort_unstable();
    let planted_edges: Vec<(usize, usize)> = chosen.iter().map(|&i| pairs[i]).collect();
    let planted = AssociationState::from_edges(n, &planted_edges)?;

    // random split of the planted edges into initial / revealed / hidden
    let order: Vec<usize> = sample(&mut rng, k, k).into_vec();
    let n_init = (world.init_fraction * k as f64).round() as usize;
    let n_reveal = ((world.reveal_fraction * k as f64).round() as usize).min(k - n_init);
    let init_edges: Vec<(usize, usize)> = order[..n_init].iter().map(|&i| planted_edges[i]).collect();
    let assoc_init = AssociationState::from_edges(n, &init_edges)?;

    let mut events: Vec<(f64, usize, Event)> = Vec::new();
    for &i in &order[n_init..n_init + n_reveal] {
        let (u, v) = planted_edges[i];
        let t = rng.random_range(0.0..world.horizon);
        events.push((t, 0, Event::association(u, v, t)));
    }
    // one seeded substream per ordered pair
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let rate = if planted.contains(u, v) { world.mu * world.rho } else { world.mu };
            let mut pair_rng = rng_for(world.seed, 1 + (u * n + v) as u64);
            for t in poisson_times(rate, world.horizon, &mut pair_rng) {
                events.push((t, 1 + u * n + v, Event::communication(u, v, t)));
            }
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let stream = EventStream::new(events.into_iter().map(|x| x.2).collect(), n)?;
    ensure!(
        stream.count_kind(EventKind::Communication) > 0,
        Validation,
        "generated stream has no communication events"
    );
    Ok(SynthData {
        stream,
        planted,
        assoc_init,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::roc_auc;

    #[test]
    fn default_world_shape() {
        let w = PlantedWorld::acceptance_default(1);
        assert_eq!(w.planted_edges(), 19);
        assert!((w.expected_events() - 5000.0).abs() < 1e-6);
        let data = generate(&w).unwrap();
        assert_eq!(data.planted.edge_count(), 19);
        let comms = data.stream.count_kind(EventKind::Communication) as f64;
        assert!((comms - 5000.0).abs() < 4.0 * 5000f64.sqrt(), "{comms}");
        assert_eq!(data.stream.count_kind(EventKind::Association), 5);
        assert_eq!(data.assoc_init.edge_count(), 5);
        for (u, v) in data.assoc_init.edges() {
            assert!(data.planted.contains(u, v));
        }
        for e in data.stream.iter().filter(|e| e.kind == EventKind::Association) {
            assert!(data.planted.contains(e.u, e.v) && !data.assoc_init.contains(e.u, e.v));
        }
    }

    #[test]
    fn degenerate_rates_put_all_events_on_the_planted_pair() {
        let mut w = PlantedWorld::with_expected_events(5, 0.1, 1e7, 100.0, 3);
        w.init_fraction = 0.0;
        w.reveal_fraction = 0.0;
        let data = generate(&w).unwrap();
        let (a, b) = data.planted.edges()[0];
        assert!(data.stream.len() > 50);
        for e in data.stream.iter() {
            assert!((e.u, e.v) == (a, b) || (e.u, e.v) == (b, a));
        }
    }

    #[test]
    fn on_edge_fraction_matches_rate_ratio() {
        let w = PlantedWorld::with_expected_events(30, 0.1, 5.0, 40000.0, 4);
        let data = generate(&w).unwrap();
        let comms: Vec<&Event> = data.stream.iter().filter(|e| e.kind == EventKind::Communication).collect();
        let on = comms.iter().filter(|e| data.planted.contains(e.u, e.v)).count() as f64;
        let total = comms.len() as f64;
        let on_rate = 2.0 * w.planted_edges() as f64 * w.rho;
        let p = on_rate / w.total_rate_per_mu();
        let sd = (total * p * (1.0 - p)).sqrt();
        assert!((on - total * p).abs() < 3.0 * sd, "on {on} expected {} sd {sd}", total * p);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let w = PlantedWorld::acceptance_default(9);
        assert_eq!(generate(&w).unwrap(), generate(&w).unwrap());
        let other = PlantedWorld::acceptance_default(10);
        assert_ne!(generate(&w).unwrap().stream, generate(&other).unwrap().stream);
    }

    #[test]
    fn invalid_worlds_are_rejected() {
        let mut w = PlantedWorld::acceptance_default(0);
        w.rho = 1.0;
        assert!(generate(&w).is_err());
        let mut w = PlantedWorld::acceptance_default(0);
        w.mu = 0.0;
        assert!(generate(&w).is_err());
    }

    /// Kolmogorov distribution tail `P(K > x)`.
    fn kolmogorov_p(x: f64) -> f64 {
        let mut p = 0.0;
        for k in 1..100 {
            let k = k as f64;
            p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn inter_event_times_are_exponential() {
        let w = PlantedWorld::with_expected_events(12, 0.2, 4.0, 20000.0, 5);
        let data = generate(&w).unwrap();
        let n = w.n_nodes;
        let mut last = vec![None; n * n];
        let mut unit_gaps = Vec::new();
        for e in data.stream.iter().filter(|e| e.kind == EventKind::Communication) {
            let rate = if data.planted.contains(e.u, e.v) { w.mu * w.rho } else { w.mu };
            let slot = &mut last[e.u * n + e.v];
            if let Some(prev) = *slot {
                unit_gaps.push((e.tau - prev) * rate);
            }
            *slot = Some(e.tau);
        }
        unit_gaps.sort_by(f64::total_cmp);
        let m = unit_gaps.len() as f64;
        let d = unit_gaps
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = 1.0 - (-x).exp();
                (cdf - i as f64 / m).abs().max(((i + 1) as f64 / m - cdf).abs())
            })
            .fold(0.0, f64::max);
        let sq = m.sqrt();
        let p = kolmogorov_p((sq + 0.12 + 0.11 / sq) * d);
        assert!(m > 10000.0);
        assert!(p > 0.01, "KS p-value {p} (D = {d})");
    }

    #[test]
    fn frequency_counts_recover_the_planted_graph() {
        let data = generate(&PlantedWorld::acceptance_default(6)).unwrap();
        let n = data.stream.n_nodes();
        let mut counts = vec![0.0; n * n];
        for e in data.stream.iter() {
            counts[e.u * n + e.v] += 1.0;
            counts[e.v * n + e.u] += 1.0;
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    scores.push(counts[u * n + v]);
                    labels.push(data.planted.contains(u, v));
                }
            }
        }
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!(auc > 0.9, "frequency detector AUC {auc}");
    }

    #[test]
    fn save_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&PlantedWorld::with_expected_events(6, 0.3, 3.0, 200.0, 7)).unwrap();
        let paths = data.save(dir.path()).unwrap();
        for p in &paths {
            assert!(p.exists());
        }
        let loaded = crate::events::load_events(&paths[0], None, 0.5).unwrap();
        assert_eq!(loaded.stream.len(), data.stream.len());
    }
}
