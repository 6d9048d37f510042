//! Recursive node-embedding update, evaluated on plain values.
//!
//! When an event between `u` and `v` happens at time `tau`, both endpoints
//! are refreshed from three terms:
//!
//! ```text
//! z_v = sigma(W_S [h_u^1, .., h_u^r] + W_R z_v_prev + W_T dt_v)
//! h_u^c = f({ softmax(S_u^c over N_u)[i] * W_h z_i : i in N_u })
//! ```
//!
//! `h_u^c` aggregates the neighbors of the *other* endpoint, so information
//! flows from `u`'s neighborhood into `v` and vice versa. `dt_v` is the
//! waiting time since `v`'s previous event, divided by the median waiting
//! time of the training stream and clamped.
//!
//! The training engine evaluates the same recursion on a tape; these
//! functions are the reference and are used at the boundaries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionState;
use crate::autodiff::func;
use crate::config::{Activation, Aggregator, AttentionMode, ModelConfig};
use crate::error::{ensure, Result};
use crate::events::{create_csv, csv_err, AssociationState, EventStream};
use crate::params::ParamStore;
use crate::Error;

/// Embeddings plus the time and index of each node's latest event.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub z: Vec<Vec<f64>>,
    pub last_time: Vec<f64>,
    pub last_index: Vec<Option<usize>>,
}

impl NodeState {
    /// All-zero embeddings; every node's clock starts at `origin`.
    pub fn zeros(n: usize, dim: usize, origin: f64) -> Self {
        NodeState {
            z: vec![vec![0.0; dim]; n],
            last_time: vec![origin; n],
            last_index: vec![None; n],
        }
    }

    /// Embeddings drawn uniformly from `[-scale, scale]`.
    pub fn random(n: usize, dim: usize, origin: f64, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut s = Self::zeros(n, dim, origin);
        for row in &mut s.z {
            for x in row.iter_mut() {
                *x = rng.random_range(-scale..=scale);
            }
        }
        s
    }

    pub fn n_nodes(&self) -> usize {
        self.z.len()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().flatten().all(|x| x.is_finite())
    }

    /// Writes `node,dim0..dim{d-1}`.
    pub fn save_embeddings(&self, path: &std::path::Path) -> Result<()> {
        let mut w = create_csv(path)?;
        let d = self.z.first().map_or(0, Vec::len);
        let mut header = vec!["node".to_string()];
        header.extend((0..d).map(|i| format!("dim{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.z.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|x| format!("{x:?}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Plain copy of the recursion weights. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DyrepParams {
    pub dim: usize,
    pub edge_types: usize,
    /// `[dim, r * dim]`
    pub w_s: Vec<f64>,
    pub w_r: Vec<f64>,
    pub w_t: Vec<f64>,
    pub w_h: Vec<f64>,
}

impl DyrepParams {
    pub fn from_store(store: &ParamStore) -> Self {
        let l = store.layout().dyrep;
        let w_s = store.tensor(l.w_s);
        DyrepParams {
            dim: w_s.shape()[0],
            edge_types: w_s.shape()[1] / w_s.shape()[0],
            w_s: w_s.data().to_vec(),
            w_r: store.tensor(l.w_r).data().to_vec(),
            w_t: store.tensor(l.w_t).data().to_vec(),
            w_h: store.tensor(l.w_h).data().to_vec(),
        }
    }
}

pub(crate) fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Nodes whose features flow into `u`'s aggregate for edge type `c`:
/// association neighbors in DyRep mode, nonzero-attention partners otherwise.
pub fn neighbor_set(
    u: usize,
    c: usize,
    s: &AttentionState,
    assoc: &AssociationState,
    mode: AttentionMode,
) -> Vec<usize> {
    match mode {
        AttentionMode::DyRep => assoc.neighbors(u).iter().copied().collect(),
        _ => s.active_partners(u, c),
    }
}

/// `h_u^c`; the zero vector when `u` has no neighbors of type `c`.
pub fn aggregate_attention(
    u: usize,
    state: &NodeState,
    s: &AttentionState,
    assoc: &AssociationState,
    params: &DyrepParams,
    c: usize,
    cfg: &ModelConfig,
) -> Vec<f64> {
    let nb = neighbor_set(u, c, s, assoc, cfg.attention);
    if nb.is_empty() {
        return vec![0.0; params.dim];
    }
    let scores: Vec<f64> = nb.iter().map(|&i| s.get(u, i, c)).collect();
    let weights = func::softmax(&scores);
    let msgs = nb.iter().zip(&weights).map(|(&i, &a)| {
        matvec(&params.w_h, &state.z[i]).into_iter().map(move |x| a * x)
    });
    match cfg.aggregator {
        Aggregator::Sum => msgs.fold(vec![0.0; params.dim], |mut acc, m| {
            acc.iter_mut().zip(m).for_each(|(a, x)| *a += x);
            acc
        }),
        Aggregator::Max => msgs.fold(vec![f64::NEG_INFINITY; params.dim], |mut acc, m| {
            acc.iter_mut().zip(m).for_each(|(a, x)| *a = a.max(x));
            acc
        }),
    }
}

/// Waiting time since the node's previous event, divided by `time_scale` and
/// clamped to `[0, max_shift]`.
pub fn scaled_wait(tau: f64, last: f64, time_scale: f64, max_shift: f64) -> Result<f64> {
    ensure!(
        tau >= last,
        Contract,
        "negative waiting time: event at {tau} precedes previous event at {last}"
    );
    Ok(((tau - last) / time_scale).clamp(0.0, max_shift))
}

pub(crate) fn activate(x: f64, act: Activation) -> f64 {
    match act {
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => func::sigmoid(x),
    }
}

/// New embedding of `v` given the other endpoint's per-type aggregates.
pub fn update_node(
    v: usize,
    partner_agg: &[Vec<f64>],
    state: &NodeState,
    params: &DyrepParams,
    tau: f64,
    time_scale: f64,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    ensure!(
        partner_agg.len() == params.edge_types,
        Contract,
        "expected {} aggregates, got {}",
        params.edge_types,
        partner_agg.len()
    );
    let dt = scaled_wait(tau, state.last_time[v], time_scale, cfg.max_time_shift)?;
    let h: Vec<f64> = partner_agg.concat();
    let structural = matvec(&params.w_s, &h);
    let recurrent = matvec(&params.w_r, &state.z[v]);
    Ok((0..params.dim)
        .map(|i| activate(structural[i] + recurrent[i] + params.w_t[i] * dt, cfg.activation))
        .collect())
}

/// Median per-node waiting time of a stream: over every event endpoint,
/// the time since that node's previous event (or since `tau = 0`).
/// Falls back to the mean positive wait, then to 1, for degenerate streams.
pub fn time_scale(stream: &EventStream) -> f64 {
    let mut last = vec![0.0; stream.n_nodes()];
    let mut gaps = Vec::with_capacity(2 * stream.len());
    for e in stream.iter() {
        for node in [e.u, e.v] {
            gaps.push(e.tau - last[node]);
            last[node] = e.tau;
        }
    }
    if gaps.is_empty() {
        return 1.0;
    }
    gaps.sort_by(f64::total_cmp);
    let mid = gaps.len() / 2;
    let median = if gaps.len() % 2 == 1 {
        gaps[mid]
    } else {
        0.5 * (gaps[mid - 1] + gaps[mid])
    };
    if median > 0.0 {
        return median;
    }
    let positive: Vec<f64> = gaps.into_iter().filter(|&g| g > 0.0).collect();
    if positive.is_empty() {
        1.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn params(d: usize, r: usize, seed: u64) -> DyrepParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
        DyrepParams {
            dim: d,
            edge_types: r,
            w_s: v(d * r * d),
            w_r: v(d * d),
            w_t: v(d),
            w_h: v(d * d),
        }
    }

    fn dyrep_cfg(n: usize, d: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(n);
        cfg.dim = d;
        cfg.attention = AttentionMode::DyRep;
        cfg
    }

    #[test]
    fn aggregate_single_neighbor_and_ties() {
        let p = params(2, 1, 1);
        let mut state = NodeState::zeros(4, 2, 0.0);
        state.z[1] = vec![0.4, -1.0];
        state.z[2] = vec![1.0, 0.5];
        let cfg = dyrep_cfg(4, 2);

        let assoc = AssociationState::from_edges(4, &[(0, 1)]).unwrap();
        let s = AttentionState::uniform_over(&assoc);
        let h = aggregate_attention(0, &state, &s, &assoc, &p, 0, &cfg);
        assert_eq!(h, matvec(&p.w_h, &state.z[1]));

        let assoc = AssociationState::from_edges(4, &[(0, 1), (0, 2)]).unwrap();
        let s = AttentionState::uniform_over(&assoc);
        let h = aggregate_attention(0, &state, &s, &assoc, &p, 0, &cfg);
        let (a, b) = (matvec(&p.w_h, &state.z[1]), matvec(&p.w_h, &state.z[2]));
        for i in 0..2 {
            assert_abs_diff_eq!(h[i], 0.5 * a[i] + 0.5 * b[i], epsilon = 1e-12);
        }

        let h = aggregate_attention(3, &state, &s, &assoc, &p, 0, &cfg);
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn ldg_neighbors_come_from_attention() {
        let p = params(2, 2, 2);
        let mut state = NodeState::zeros(3, 2, 0.0);
        state.z[2] = vec![0.3, 0.7];
        let mut cfg = ModelConfig::new(3);
        cfg.dim = 2;
        let mut s = AttentionState::zeros(3, 2);
        s.set_fiber(0, 2, &[0.0, 1.0]);
        let assoc = AssociationState::empty(3);
        assert_eq!(aggregate_attention(0, &state, &s, &assoc, &p, 0, &cfg), vec![0.0, 0.0]);
        assert_eq!(
            aggregate_attention(0, &state, &s, &assoc, &p, 1, &cfg),
            matvec(&p.w_h, &state.z[2])
        );
    }

    #[test]
    fn zero_everything_stays_zero() {
        let mut p = params(3, 1, 3);
        p.w_t = vec![0.7; 3];
        let state = NodeState::zeros(2, 3, 0.0);
        let out = update_node(0, &[vec![0.0; 3]], &state, &p, 0.0, 1.0, &dyrep_cfg(2, 3)).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn term_isolation() {
        let cfg = dyrep_cfg(3, 2);
        let mut state = NodeState::zeros(3, 2, 0.0);
        state.z[1] = vec![0.2, -0.6];
        let agg = vec![vec![0.5, 0.1]];

        let mut p = params(2, 1, 4);
        p.w_t = vec![0.0; 2];
        let a = update_node(1, &agg, &state, &p, 1.0, 1.0, &cfg).unwrap();
        let b = update_node(1, &agg, &state, &p, 7.5, 1.0, &cfg).unwrap();
        assert_eq!(a, b);

        let mut p = params(2, 1, 4);
        p.w_s = vec![0.0; 4];
        let a = update_node(1, &agg, &state, &p, 1.0, 1.0, &cfg).unwrap();
        let b = update_node(1, &[vec![-3.0, 9.0]], &state, &p, 1.0, 1.0, &cfg).unwrap();
        assert_eq!(a, b);

        let mut p = params(2, 1, 4);
        p.w_r = vec![0.0; 4];
        let a = update_node(1, &agg, &state, &p, 1.0, 1.0, &cfg).unwrap();
        state.z[1] = vec![5.0, 5.0];
        let b = update_node(1, &agg, &state, &p, 1.0, 1.0, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn update_matches_hand_recomputation() {
        // N = 3, d = 2, one edge type, node 0 associated with 1 and 2
        let p = params(2, 1, 5);
        let cfg = dyrep_cfg(3, 2);
        let mut state = NodeState::zeros(3, 2, 0.0);
        state.z = vec![vec![0.1, -0.2], vec![0.3, 0.4], vec![-0.5, 0.25]];
        state.last_time = vec![0.0, 1.0, 0.5];
        let assoc = AssociationState::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let mut s = AttentionState::uniform_over(&assoc);
        s.set_fiber(0, 1, &[0.8]);
        s.set_fiber(0, 2, &[0.2]);

        // v = 1 receives the aggregate of u = 0
        let h = aggregate_attention(0, &state, &s, &assoc, &p, 0, &cfg);
        let out = update_node(1, &[h], &state, &p, 3.0, 2.0, &cfg).unwrap();

        let e1 = 0.8f64.exp();
        let e2 = 0.2f64.exp();
        let (a1, a2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let wh = &p.w_h;
        let m = |z: &[f64], r: usize| wh[r * 2] * z[0] + wh[r * 2 + 1] * z[1];
        let h0 = a1 * m(&state.z[1], 0) + a2 * m(&state.z[2], 0);
        let h1 = a1 * m(&state.z[1], 1) + a2 * m(&state.z[2], 1);
        let dt = (3.0 - 1.0) / 2.0;
        for r in 0..2 {
            let pre = p.w_s[r * 2] * h0
                + p.w_s[r * 2 + 1] * h1
                + p.w_r[r * 2] * 0.3
                + p.w_r[r * 2 + 1] * 0.4
                + p.w_t[r] * dt;
            assert_abs_diff_eq!(out[r], pre.tanh(), epsilon = 1e-12);
        }
    }

    #[test]
    fn negative_wait_is_rejected_and_large_wait_clamped() {
        assert!(scaled_wait(1.0, 2.0, 1.0, 100.0).is_err());
        assert_eq!(scaled_wait(1e9, 0.0, 1.0, 100.0).unwrap(), 100.0);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let p = params(4, 1, 6);
        let cfg = dyrep_cfg(5, 4);
        let events: Vec<Event> = (0..40)
            .map(|t| Event::communication(t % 5, (t * 3 + 1) % 5, t as f64 * 0.7))
            .filter(|e| e.u != e.v)
            .collect();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut state = NodeState::random(5, 4, 0.0, 0.5, &mut rng);
            let assoc = AssociationState::from_edges(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
            let s = AttentionState::uniform_over(&assoc);
            for (t, e) in events.iter().enumerate() {
                let hu = aggregate_attention(e.u, &state, &s, &assoc, &p, 0, &cfg);
                let hv = aggregate_attention(e.v, &state, &s, &assoc, &p, 0, &cfg);
                let zv = update_node(e.v, &[hu], &state, &p, e.tau, 1.3, &cfg).unwrap();
                let zu = update_node(e.u, &[hv], &state, &p, e.tau, 1.3, &cfg).unwrap();
                state.z[e.u] = zu;
                state.z[e.v] = zv;
                for n in [e.u, e.v] {
                    state.last_time[n] = e.tau;
                    state.last_index[n] = Some(t);
                }
            }
            state
        };
        let (a, b) = (run(), run());
        let bits = |s: &NodeState| s.z.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.last_index, b.last_index);
    }

    #[test]
    fn median_wait() {
        let ev = |e: &[(usize, usize, f64)]| {
            EventStream::new(e.iter().map(|&(u, v, t)| Event::communication(u, v, t)).collect(), 4).unwrap()
        };
        // waits: 1, 1 | 2, 2 | 1, 3 -> sorted 1 1 1 2 2 3
        assert_eq!(time_scale(&ev(&[(0, 1, 1.0), (0, 2, 3.0), (2, 3, 4.0)])), 1.5);
        // waits all zero -> fallback to 1
        assert_eq!(time_scale(&ev(&[(0, 1, 0.0)])), 1.0);
        assert_eq!(time_scale(&ev(&[(0, 1, 0.0), (0, 1, 0.0), (0, 1, 8.0)])), 8.0);
    }
}
