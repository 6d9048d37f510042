//! Latent-graph encoder: infers the edge-type posterior `q(S_uv | Z)` for the
//! pair involved in an event from the embeddings of *all* nodes.
//!
//! Two passes of node and edge mappings, each pair mapping bilinear:
//!
//! ```text
//! pass 1:  h1_j      = f_node1(z_j)                      for all j
//!          h1_(i,j)  = f_edge1(h1_i^T W1 h1_j)           for all i != j
//! pass 2:  h2_j      = f_node2(sum_{i != j} h1_(i,j))
//!          h2_(u,v)  = f_edge2(h2_u^T W2 h2_v)
//! q(S_uv | Z) = softmax(h2_(u,v))
//! ```
//!
//! Because `h2_u` sums edge messages from every other node, the posterior
//! for `(u, v)` depends on the whole graph, not just the two endpoints.
//!
//! Training only needs `h2_u` and `h2_v`, so [`posterior_logits`] evaluates
//! pass 1 for the incoming edges of those two nodes only. [`encode_edge`]
//! runs the full all-pairs computation and returns every intermediate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionState;
use crate::autodiff::{func, gumbel, GumbelConfig, Tape, Tensor, Var};
use crate::config::{PriorConfig, PriorKind};
use crate::error::{ensure, Result};
use crate::params::{EncoderWeights, Mlp, ParamStore};

/// `w2 relu(w1 x + b1) + b2` for a vector or a batch of rows.
pub fn mlp(tape: &mut Tape, x: Var, m: &Mlp<Var>) -> Var {
    let h = tape.linear(x, m.w1, Some(m.b1));
    let h = tape.relu(h);
    tape.linear(h, m.w2, Some(m.b2))
}

/// First-pass node features `h1_j` for one embedding row.
pub fn node_features(tape: &mut Tape, z_j: Var, w: &EncoderWeights<Var>) -> Var {
    mlp(tape, z_j, &w.node1)
}

/// Edge-type logits `h2_(u,v)` from the first-pass features of every node.
pub fn posterior_logits(tape: &mut Tape, u: usize, v: usize, h1: &[Var], w: &EncoderWeights<Var>) -> Var {
    let mut second = [u, v].map(|j| {
        let others: Vec<Var> = (0..h1.len()).filter(|&i| i != j).map(|i| h1[i]).collect();
        // h1_i^T W1 h1_j for every i at once: contract W1 with h1_j first
        let right = tape.contract_middle(w.bilinear1, h1[j]);
        let senders = tape.stack_rows(&others);
        let pre = tape.matmul(senders, right);
        let edges = mlp(tape, pre, &w.edge1);
        let incoming = tape.sum_rows(edges);
        Some(mlp(tape, incoming, &w.node2))
    });
    let (h2_u, h2_v) = (second[0].take().unwrap(), second[1].take().unwrap());
    let pair = tape.bilinear(h2_u, w.bilinear2, h2_v);
    mlp(tape, pair, &w.edge2)
}

/// Every intermediate of one full encoder evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    /// `h1_j`, `[N][d]`.
    pub h1_nodes: Vec<Vec<f64>>,
    /// `h1_(i,j)`, `[N][N][d]`; the diagonal is left empty.
    pub h1_edges: Vec<Vec<Vec<f64>>>,
    /// `h2_j`, `[N][d]`.
    pub h2_nodes: Vec<Vec<f64>>,
    /// `h2_(u,v)`, the edge-type logits.
    pub h2_edge: Vec<f64>,
}

/// Posterior over edge types for the pair `(u, v)` and the full trace,
/// computed pair by pair without shortcuts.
pub fn encode_edge(
    u: usize,
    v: usize,
    z: &[Vec<f64>],
    params: &ParamStore,
) -> Result<(Vec<f64>, EncoderTrace)> {
    ensure!(u != v, Contract, "encoder needs two distinct nodes, got ({u}, {v})");
    let n = z.len();
    ensure!(u < n && v < n, Contract, "node index out of range");
    let layout = params
        .layout()
        .encoder
        .ok_or_else(|| crate::Error::Contract("parameter store has no encoder".into()))?;
    let mut tape = Tape::new();
    let w = layout_on_tape(&mut tape, params, &layout);

    let rows: Vec<Var> = z.iter().map(|r| tape.constant(Tensor::vector(r.clone()))).collect();
    let h1: Vec<Var> = rows.iter().map(|&r| mlp(&mut tape, r, &w.node1)).collect();
    let mut h1_edge_vars = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let b = tape.bilinear(h1[i], w.bilinear1, h1[j]);
                h1_edge_vars[i][j] = Some(mlp(&mut tape, b, &w.edge1));
            }
        }
    }
    let h2: Vec<Var> = (0..n)
        .map(|j| {
            let incoming: Vec<Var> = (0..n).filter(|&i| i != j).map(|i| h1_edge_vars[i][j].unwrap()).collect();
            let total = tape.add_n(&incoming);
            mlp(&mut tape, total, &w.node2)
        })
        .collect();
    let pair = tape.bilinear(h2[u], w.bilinear2, h2[v]);
    let logits = mlp(&mut tape, pair, &w.edge2);

    let read = |t: &Tape, v: Var| t.data(v).to_vec();
    let trace = EncoderTrace {
        h1_nodes: h1.iter().map(|&x| read(&tape, x)).collect(),
        h1_edges: h1_edge_vars
            .iter()
            .map(|row| row.iter().map(|e| e.map(|x| read(&tape, x)).unwrap_or_default()).collect())
            .collect(),
        h2_nodes: h2.iter().map(|&x| read(&tape, x)).collect(),
        h2_edge: read(&tape, logits),
    };
    Ok((func::softmax(&trace.h2_edge), trace))
}

pub(crate) fn layout_on_tape(tape: &mut Tape, params: &ParamStore, layout: &EncoderWeights<usize>) -> EncoderWeights<Var> {
    let mut leaf = |i: usize| tape.constant(params.tensor(i).clone());
    let mut m = |x: &Mlp<usize>| Mlp {
        w1: leaf(x.w1),
        b1: leaf(x.b1),
        w2: leaf(x.w2),
        b2: leaf(x.b2),
    };
    let node1 = m(&layout.node1);
    let edge1 = m(&layout.edge1);
    let node2 = m(&layout.node2);
    let edge2 = m(&layout.edge2);
    EncoderWeights {
        node1,
        edge1,
        node2,
        edge2,
        bilinear1: tape.constant(params.tensor(layout.bilinear1).clone()),
        bilinear2: tape.constant(params.tensor(layout.bilinear2).clone()),
    }
}

/// Maps a sample over the prior's categories to an attention fiber over the
/// `r` usable edge types. For the sparse prior category 0 is the non-edge
/// and is dropped, so a non-edge sample becomes the all-zero fiber.
pub fn fiber_from_sample(sample: &[f64], prior: &PriorConfig) -> Vec<f64> {
    match prior.kind {
        PriorKind::Uniform => sample.to_vec(),
        PriorKind::Sparse => sample[1..].to_vec(),
    }
}

/// Tape version of [`fiber_from_sample`].
pub fn fiber_on_tape(tape: &mut Tape, sample: Var, prior: &PriorConfig) -> Var {
    match prior.kind {
        PriorKind::Uniform => sample,
        PriorKind::Sparse => tape.slice(sample, 1, prior.edge_types()),
    }
}

/// Hard Gumbel sample from a posterior, mapped to an attention fiber.
pub fn sample_attention(
    posterior: &[f64],
    prior: &PriorConfig,
    gumbel_cfg: GumbelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    ensure!(
        posterior.len() == prior.categories(),
        Contract,
        "posterior has {} categories, prior has {}",
        posterior.len(),
        prior.categories()
    );
    let logits: Vec<f64> = posterior.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
    let cfg = GumbelConfig {
        hard: true,
        ..gumbel_cfg
    };
    let sample = gumbel::gumbel_softmax_sample(&logits, cfg, rng)?;
    Ok(fiber_from_sample(&sample, prior))
}

/// Uniform-prior regularizer: minus the summed posterior entropies (the
/// constant `log r` per edge is dropped).
pub fn kl_uniform(posteriors: &[Vec<f64>]) -> f64 {
    -posteriors.iter().map(|q| func::entropy(q)).sum::<f64>()
}

/// Sparse-prior regularizer: summed `KL(q || p)`, i.e. cross-entropy minus
/// entropy.
pub fn kl_sparse(posteriors: &[Vec<f64>], prior: &PriorConfig) -> Result<f64> {
    ensure!(prior.kind == PriorKind::Sparse, Contract, "kl_sparse needs the sparse prior");
    let mut total = 0.0;
    for q in posteriors {
        ensure!(
            q.len() == prior.theta.len(),
            Contract,
            "posterior has {} categories, prior has {}",
            q.len(),
            prior.theta.len()
        );
        let cross: f64 = -q.iter().zip(&prior.theta).map(|(qi, p)| qi * p.ln()).sum::<f64>();
        total += cross - func::entropy(q);
    }
    Ok(total)
}

/// Per-edge regularizer on the tape from `q` and `log q`.
pub fn kl_on_tape(tape: &mut Tape, q: Var, log_q: Var, prior: &PriorConfig) -> Var {
    match prior.kind {
        PriorKind::Uniform => tape.dot(q, log_q),
        PriorKind::Sparse => {
            let neg_log_p: Vec<f64> = prior.theta.iter().map(|p| -p.ln()).collect();
            let ratio = tape.add_const(log_q, &neg_log_p);
            tape.dot(q, ratio)
        }
    }
}

/// Symmetric attention with every unordered pair's fiber drawn
/// independently from the prior. Used to initialize learned attention and
/// as the frozen random control.
pub fn init_random_attention(n: usize, prior: &PriorConfig, rng: &mut ChaCha8Rng) -> AttentionState {
    let r = prior.edge_types();
    let mut s = AttentionState::zeros(n, r);
    let cumulative: Vec<f64> = prior
        .theta
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    for u in 0..n {
        for v in u + 1..n {
            let x: f64 = rng.random();
            let cat = cumulative.iter().position(|&c| x < c).unwrap_or(cumulative.len() - 1);
            let fiber = fiber_from_sample(&gumbel::one_hot(prior.categories(), cat), prior);
            s.set_fiber(u, v, &fiber);
            s.set_fiber(v, u, &fiber);
        }
    }
    s
}
