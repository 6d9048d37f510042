//! The event sweep: advances model state one event at a time on a tape so
//! that a minibatch can be differentiated end to end.
//!
//! [`ModelState`] holds plain values and is always current. A [`Sweep`]
//! lives for one batch and keeps, next to those values, the tape variables
//! that produced them; nodes and attention entries not touched in the batch
//! enter the tape as constants. Dropping the sweep detaches the state.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionState;
use crate::autodiff::{gumbel, Gradients, Tape, Tensor, Var};
use crate::config::{Activation, Aggregator, AttentionMode, EmbeddingInit, ModelConfig};
use crate::dyrep::{neighbor_set, scaled_wait, NodeState};
use crate::encoder::{self, init_random_attention};
use crate::error::{ensure, Error, Result};
use crate::events::{AssociationState, Event, EventKind};
use crate::intensity::intensity_on_tape;
use crate::params::{ParamStore, Weights};

/// Scale of the uniform draw used by [`EmbeddingInit::Random`].
pub const RANDOM_EMBEDDING_SCALE: f64 = 0.5;

/// Everything that evolves along the event stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub nodes: NodeState,
    pub attention: AttentionState,
    pub assoc: AssociationState,
}

impl ModelState {
    /// State before the first event. DyRep attention starts uniform over the
    /// initial associations; latent attention starts as a draw from the prior.
    pub fn initial(cfg: &ModelConfig, assoc: &AssociationState, origin: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        ensure!(
            assoc.n_nodes() == cfg.n_nodes,
            Contract,
            "association state has {} nodes, model has {}",
            assoc.n_nodes(),
            cfg.n_nodes
        );
        let nodes = match cfg.embedding_init {
            EmbeddingInit::Zero => NodeState::zeros(cfg.n_nodes, cfg.dim, origin),
            EmbeddingInit::Random => NodeState::random(cfg.n_nodes, cfg.dim, origin, RANDOM_EMBEDDING_SCALE, rng),
        };
        let attention = match cfg.attention {
            AttentionMode::DyRep => AttentionState::uniform_over(assoc),
            _ => init_random_attention(cfg.n_nodes, &cfg.prior_config(), rng),
        };
        Ok(ModelState {
            nodes,
            attention,
            assoc: assoc.clone(),
        })
    }

    /// Text snapshot that restores every bit, used to resume evaluation
    /// from the end of training.
    pub fn to_text(&self) -> String {
        let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let n = self.nodes.n_nodes();
        let d = self.nodes.z.first().map_or(0, Vec::len);
        let mut out = format!(
            "ldg-state {STATE_VERSION}\nshape {n} {d} {}\n",
            self.attention.edge_types()
        );
        for u in 0..n {
            let last = self.nodes.last_index[u].map_or("-".to_string(), |i| i.to_string());
            out.push_str(&format!("node {:?} {last} {}\n", self.nodes.last_time[u], fmt(&self.nodes.z[u])));
        }
        out.push_str(&format!("attention {}\n", fmt(self.attention.values())));
        let edges: Vec<String> = self.assoc.edges().iter().map(|(u, v)| format!("{u}-{v}")).collect();
        out.push_str(&format!("assoc {}\n", edges.join(" ")));
        let last = self.assoc.last_mutation().map_or("-".to_string(), |t| format!("{t:?}"));
        out.push_str(&format!("assoc_last_mutation {last}\n"));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("state snapshot: {what}"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let mut lines = text.lines();
        ensure!(
            lines.next() == Some(format!("ldg-state {STATE_VERSION}").as_str()),
            Checkpoint,
            "state snapshot: unsupported header"
        );
        let shape: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("shape "))
            .ok_or_else(|| bad("missing shape"))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let [n, d, r] = shape[..] else {
            return Err(bad("shape needs three numbers"));
        };
        let mut nodes = NodeState::zeros(n, d, 0.0);
        for u in 0..n {
            let line = lines.next().and_then(|l| l.strip_prefix("node ")).ok_or_else(|| bad("missing node line"))?;
            let mut parts = line.split_whitespace();
            nodes.last_time[u] = num(parts.next().ok_or_else(|| bad("missing time"))?)?;
            nodes.last_index[u] = match parts.next() {
                Some("-") => None,
                Some(i) => Some(i.parse().map_err(|_| bad("bad event index"))?),
                None => return Err(bad("missing event index")),
            };
            nodes.z[u] = parts.map(num).collect::<Result<_>>()?;
            ensure!(nodes.z[u].len() == d, Checkpoint, "state snapshot: node {u} has wrong width");
        }
        let values = lines
            .next()
            .and_then(|l| l.strip_prefix("attention"))
            .ok_or_else(|| bad("missing attention"))?
            .split_whitespace()
            .map(num)
            .collect::<Result<_>>()?;
        let attention = AttentionState::from_values(n, r, values).map_err(|e| bad(&e.to_string()))?;
        let edges = lines
            .next()
            .and_then(|l| l.strip_prefix("assoc"))
            .ok_or_else(|| bad("missing assoc"))?
            .split_whitespace()
            .map(|p| {
                let (u, v) = p.split_once('-').ok_or_else(|| bad("bad edge"))?;
                Ok((u.parse().map_err(|_| bad("bad edge"))?, v.parse().map_err(|_| bad("bad edge"))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut assoc = AssociationState::from_edges(n, &edges)?;
        let last = lines
            .next()
            .and_then(|l| l.strip_prefix("assoc_last_mutation "))
            .ok_or_else(|| bad("missing assoc_last_mutation"))?;
        assoc.set_last_mutation(if last == "-" { None } else { Some(num(last)?) });
        Ok(ModelState { nodes, attention, assoc })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::events::write_text(path, &self.to_text())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

const STATE_VERSION: u32 = 1;

/// A sampled non-occurring pair, evaluated against the state just before
/// event `anchor` (an index into the batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonEvent {
    pub u: usize,
    pub v: usize,
    pub anchor: usize,
    pub kind: EventKind,
}

/// Tape outputs of one event.
#[derive(Debug, Clone)]
pub struct StepTerms {
    pub lambda: Var,
    pub nonevents: Vec<Var>,
    pub kl: Option<Var>,
}

/// One batch worth of tape.
pub struct Sweep<'a> {
    cfg: &'a ModelConfig,
    pub tape: Tape,
    leaves: Vec<Var>,
    w: Weights<Var>,
    psi: Var,
    time_scale: f64,
    z: Vec<Option<Var>>,
    h1: Vec<Option<Var>>,
    s: HashMap<(usize, usize), Var>,
}

impl<'a> Sweep<'a> {
    /// With `trainable`, parameters are differentiable leaves; otherwise
    /// constants.
    pub fn new(cfg: &'a ModelConfig, params: &ParamStore, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let w = params.layout().map(|i| leaves[i]);
        let psi = tape.softplus(w.intensity.psi_raw);
        Sweep {
            cfg,
            tape,
            leaves,
            w,
            psi,
            time_scale: params.time_scale,
            z: vec![None; cfg.n_nodes],
            h1: vec![None; cfg.n_nodes],
            s: HashMap::new(),
        }
    }

    /// Gradient of `loss` with respect to every parameter tensor, in store
    /// order.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Tensor>> {
        let g: Gradients = self.tape.backward(loss)?;
        Ok(self.leaves.iter().map(|&l| g.wrt(l)).collect())
    }

    fn z(&mut self, state: &ModelState, i: usize) -> Var {
        if let Some(v) = self.z[i] {
            return v;
        }
        let v = self.tape.constant(Tensor::vector(state.nodes.z[i].clone()));
        self.z[i] = Some(v);
        v
    }

    fn fiber(&mut self, state: &ModelState, u: usize, v: usize) -> Var {
        if let Some(&f) = self.s.get(&(u, v)) {
            return f;
        }
        let f = self.tape.constant(Tensor::vector(state.attention.fiber(u, v).to_vec()));
        self.s.insert((u, v), f);
        f
    }

    fn set_fiber(&mut self, state: &mut ModelState, u: usize, v: usize, f: Var) {
        state.attention.set_fiber(u, v, self.tape.data(f));
        self.s.insert((u, v), f);
    }

    fn lambda(&mut self, state: &ModelState, u: usize, v: usize, kind: EventKind) -> Var {
        let (zu, zv) = (self.z(state, u), self.z(state, v));
        intensity_on_tape(&mut self.tape, zu, zv, kind, &self.w.intensity, self.psi, self.cfg.interaction)
    }

    fn aggregate(&mut self, state: &ModelState, u: usize, c: usize) -> Var {
        let nb = neighbor_set(u, c, &state.attention, &state.assoc, self.cfg.attention);
        if nb.is_empty() {
            return self.tape.constant(Tensor::vector(vec![0.0; self.cfg.dim]));
        }
        let scores: Vec<Var> = nb
            .iter()
            .map(|&i| {
                let f = self.fiber(state, u, i);
                self.tape.index(f, c)
            })
            .collect();
        let scores = self.tape.concat(&scores);
        let weights = self.tape.softmax(scores);
        let rows: Vec<Var> = nb.iter().map(|&i| self.z(state, i)).collect();
        let rows = self.tape.stack_rows(&rows);
        let msgs = self.tape.linear(rows, self.w.dyrep.w_h, None);
        let weighted = self.tape.scale_rows(msgs, weights);
        match self.cfg.aggregator {
            Aggregator::Sum => self.tape.sum_rows(weighted),
            Aggregator::Max => self.tape.max_rows(weighted),
        }
    }

    fn update(&mut self, state: &ModelState, v: usize, partner_agg: &[Var], tau: f64) -> Result<Var> {
        let dt = scaled_wait(tau, state.nodes.last_time[v], self.time_scale, self.cfg.max_time_shift)?;
        let h = self.tape.concat(partner_agg);
        let zv = self.z(state, v);
        let d = &self.w.dyrep;
        let structural = self.tape.linear(h, d.w_s, None);
        let recurrent = self.tape.linear(zv, d.w_r, None);
        let temporal = self.tape.scale(d.w_t, dt);
        let pre = self.tape.add_n(&[structural, recurrent, temporal]);
        Ok(match self.cfg.activation {
            Activation::Tanh => self.tape.tanh(pre),
            Activation::Sigmoid => self.tape.sigmoid(pre),
        })
    }

    /// Edge-type logits of the encoder for `(u, v)` under the current state.
    pub fn encoder_logits(&mut self, state: &ModelState, u: usize, v: usize) -> Result<Var> {
        let w = self
            .w
            .encoder
            .ok_or_else(|| Error::Contract("learned attention needs encoder weights".into()))?;
        let h1: Vec<Var> = (0..self.cfg.n_nodes)
            .map(|j| match self.h1[j] {
                Some(h) => h,
                None => {
                    let zj = self.z(state, j);
                    let h = encoder::node_features(&mut self.tape, zj, &w);
                    self.h1[j] = Some(h);
                    h
                }
            })
            .collect();
        Ok(encoder::posterior_logits(&mut self.tape, u, v, &h1, &w))
    }

    /// DyRep rule on the tape: the intensity enters the attention of
    /// associated pairs, so later updates in the batch depend on it.
    fn dyrep_attention(&mut self, state: &mut ModelState, e: &Event, lambda: Var) -> Result<()> {
        match e.kind {
            EventKind::Association => {
                if state.assoc.apply_mut(e)? {
                    for node in [e.u, e.v] {
                        let nb: Vec<usize> = state.assoc.neighbors(node).iter().copied().collect();
                        let w = 1.0 / nb.len() as f64;
                        for i in nb {
                            let f = self.tape.constant(Tensor::vector(vec![w]));
                            self.set_fiber(state, node, i, f);
                        }
                    }
                }
            }
            EventKind::Communication => {
                if state.assoc.contains(e.u, e.v) {
                    let increment = self.tape.concat(&[lambda]);
                    for (node, partner) in [(e.u, e.v), (e.v, e.u)] {
                        let nb: Vec<usize> = state.assoc.neighbors(node).iter().copied().collect();
                        let mut entries: Vec<Var> = nb.iter().map(|&i| self.fiber(state, node, i)).collect();
                        let at = nb.iter().position(|&i| i == partner).expect("partner is a neighbor");
                        entries[at] = self.tape.add(entries[at], increment);
                        let total = self.tape.add_n(&entries);
                        let total = self.tape.sum(total);
                        let inv = self.tape.recip(total);
                        for (k, &i) in nb.iter().enumerate() {
                            let f = self.tape.scale_by(inv, entries[k]);
                            self.set_fiber(state, node, i, f);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Processes event `e` (stream position `index`): intensities of the
    /// event and its nonevents from the pre-event state, then the embedding
    /// and attention updates. `state` is advanced in place.
    pub fn step(
        &mut self,
        state: &mut ModelState,
        e: &Event,
        index: usize,
        nonevents: &[NonEvent],
        with_kl: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepTerms> {
        let lambda = self.lambda(state, e.u, e.v, e.kind);
        let value = self.tape.scalar(lambda);
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::NonFinite(format!("intensity {value} at event {index}")));
        }
        let nonevents: Vec<Var> = nonevents.iter().map(|n| self.lambda(state, n.u, n.v, n.kind)).collect();

        let mut kl = None;
        let mut sample = None;
        if self.cfg.attention == AttentionMode::LdgLearned {
            let prior = self.cfg.prior_config();
            let logits = self.encoder_logits(state, e.u, e.v)?;
            if with_kl {
                let q = self.tape.softmax(logits);
                let log_q = self.tape.log_softmax(logits);
                kl = Some(encoder::kl_on_tape(&mut self.tape, q, log_q, &prior));
            }
            let noise = gumbel::gumbel_noise(rng, prior.categories());
            let s = gumbel::gumbel_softmax(&mut self.tape, logits, &noise, self.cfg.gumbel);
            sample = Some(encoder::fiber_on_tape(&mut self.tape, s, &prior));
        }

        let r = self.cfg.relation_count();
        let agg_u: Vec<Var> = (0..r).map(|c| self.aggregate(state, e.u, c)).collect();
        let agg_v: Vec<Var> = (0..r).map(|c| self.aggregate(state, e.v, c)).collect();
        let new_v = self.update(state, e.v, &agg_u, e.tau)?;
        let new_u = self.update(state, e.u, &agg_v, e.tau)?;

        match self.cfg.attention {
            AttentionMode::DyRep => self.dyrep_attention(state, e, lambda)?,
            AttentionMode::LdgLearned => {
                let f = sample.expect("sampled above");
                self.set_fiber(state, e.u, e.v, f);
                self.set_fiber(state, e.v, e.u, f);
                if e.kind == EventKind::Association {
                    state.assoc.apply_mut(e)?;
                }
            }
            AttentionMode::LdgRandom => {
                if e.kind == EventKind::Association {
                    state.assoc.apply_mut(e)?;
                }
            }
        }

        for (node, var) in [(e.u, new_u), (e.v, new_v)] {
            let value = self.tape.data(var).to_vec();
            if value.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of node {node} at event {index}")));
            }
            state.nodes.z[node] = value;
            state.nodes.last_time[node] = e.tau;
            state.nodes.last_index[node] = Some(index);
            self.z[node] = Some(var);
            self.h1[node] = None;
        }
        Ok(StepTerms { lambda, nonevents, kl })
    }
}

/// Seeded generator for one purpose (parameter init, state init, sampling
/// in a given epoch, ...), independent of the others.
pub fn rng_for(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Advances `state` through `events` without gradients, in chunks of
/// `chunk` events per tape. `before` sees the state right before each event.
#[allow(clippy::too_many_arguments)]
pub fn advance(
    state: &mut ModelState,
    params: &ParamStore,
    cfg: &ModelConfig,
    events: &[Event],
    first_index: usize,
    chunk: usize,
    rng: &mut ChaCha8Rng,
    mut before: impl FnMut(usize, &Event, &ModelState) -> Result<()>,
) -> Result<()> {
    for (c, part) in events.chunks(chunk.max(1)).enumerate() {
        let mut sweep = Sweep::new(cfg, params, false);
        for (j, e) in part.iter().enumerate() {
            let index = first_index + c * chunk.max(1) + j;
            before(index, e, state)?;
            sweep.step(state, e, index, &[], false, rng)?;
        }
    }
    Ok(())
}
