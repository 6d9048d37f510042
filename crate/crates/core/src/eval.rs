//! Link-prediction ranking, attention-vs-graph AUC, and baselines.
//!
//! For a test event `(u, v)` every other node `v'` is scored by the
//! intensity `lambda_k(u, v')` under the current state, and the rank of the
//! true partner is recorded. Ties share the average of the positions they
//! span, so `n` equal scores all get rank `(n + 1) / 2`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionState;
use crate::config::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::events::{create_csv, csv_err, AssociationState, Event, EventKind, EventStream};
use crate::intensity::IntensityParams;
use crate::model::{advance, ModelState};
use crate::params::ParamStore;

/// Events processed per tape during evaluation.
pub const EVAL_CHUNK: usize = 200;
/// Default weight of the model in [`blend`].
pub const DEFAULT_BLEND_ALPHA: f64 = 0.5;

/// `1 + #{strictly higher} + #{ties} / 2`, where ties exclude the true entry.
pub fn tie_averaged_rank(scores: &[f64], true_idx: usize) -> f64 {
    let s = scores[true_idx];
    let mut higher = 0usize;
    let mut ties = 0usize;
    for (i, &x) in scores.iter().enumerate() {
        if i == true_idx {
            continue;
        }
        if x > s {
            higher += 1;
        } else if x == s {
            ties += 1;
        }
    }
    1.0 + higher as f64 + ties as f64 / 2.0
}

/// Rank of one scored test event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRank {
    pub event_index: usize,
    pub u: usize,
    pub true_v: usize,
    pub rank: f64,
}

impl EventRank {
    pub fn hit10(&self) -> bool {
        self.rank <= 10.0
    }
}

/// Scores of every node for one test event; the source node has `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDump {
    pub event_index: usize,
    pub u: usize,
    pub true_v: usize,
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub ranks: Vec<EventRank>,
    pub mar: f64,
    pub hits10: f64,
    pub dumps: Vec<ScoreDump>,
}

impl RankResult {
    pub fn from_ranks(ranks: Vec<EventRank>, dumps: Vec<ScoreDump>) -> Result<Self> {
        ensure!(!ranks.is_empty(), Validation, "no communication events to rank");
        let n = ranks.len() as f64;
        let mar = ranks.iter().map(|r| r.rank).sum::<f64>() / n;
        let hits10 = ranks.iter().filter(|r| r.hit10()).count() as f64 / n;
        Ok(RankResult {
            ranks,
            mar,
            hits10,
            dumps,
        })
    }

    /// `event_index,u,true_v,rank,hit10`
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = create_csv(path)?;
        w.write_record(["event_index", "u", "true_v", "rank", "hit10"])
            .map_err(csv_err)?;
        for r in &self.ranks {
            w.write_record([
                r.event_index.to_string(),
                r.u.to_string(),
                r.true_v.to_string(),
                format!("{:?}", r.rank),
                u8::from(r.hit10()).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One row per event: `event_index,u,true_v,score_0..score_{N-1}`, with
    /// the source node's cell left empty.
    pub fn save_dumps(&self, path: &Path) -> Result<()> {
        let mut w = create_csv(path)?;
        let n = self.dumps.first().map_or(0, |d| d.scores.len());
        let mut header = vec!["event_index".to_string(), "u".into(), "true_v".into()];
        header.extend((0..n).map(|i| format!("score_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for d in &self.dumps {
            let mut rec = vec![d.event_index.to_string(), d.u.to_string(), d.true_v.to_string()];
            rec.extend(d.scores.iter().map(|s| s.map(|x| format!("{x:?}")).unwrap_or_default()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores of every node as a partner of `u` (`None` at `u`) and the rank of
/// `true_v` among them.
pub fn rank_scores(u: usize, true_v: usize, scores: Vec<Option<f64>>) -> (f64, Vec<Option<f64>>) {
    let candidates: Vec<usize> = (0..scores.len()).filter(|&i| i != u).collect();
    let values: Vec<f64> = candidates.iter().map(|&i| scores[i].expect("candidate scored")).collect();
    let at = candidates.iter().position(|&i| i == true_v).expect("true partner is a candidate");
    (tie_averaged_rank(&values, at), scores)
}

/// Per-source empirical partner distribution from training communications.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    rows: Vec<Vec<f64>>,
}

impl FrequencyTable {
    /// Counts `u -> v` communications and row-normalizes.
    pub fn from_stream(stream: &EventStream) -> Self {
        let n = stream.n_nodes();
        let mut rows = vec![vec![0.0; n]; n];
        for e in stream.iter().filter(|e| e.kind == EventKind::Communication) {
            rows[e.u][e.v] += 1.0;
        }
        for row in &mut rows {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|x| *x /= total);
            }
        }
        FrequencyTable { rows }
    }

    /// The distribution for `u`, or `None` if `u` never communicated.
    pub fn row(&self, u: usize) -> Option<&[f64]> {
        let row = &self.rows[u];
        row.iter().any(|&x| x > 0.0).then_some(row.as_slice())
    }
}

/// `alpha * model / sum(model) + (1 - alpha) * frequency`, over candidates.
/// Without a frequency row the normalized model scores pass through.
pub fn blend(model_scores: &[f64], freq_row: Option<&[f64]>, alpha: f64) -> Result<Vec<f64>> {
    ensure!((0.0..=1.0).contains(&alpha), Config, "blend weight {alpha} outside [0, 1]");
    let total: f64 = model_scores.iter().sum();
    let normalized: Vec<f64> = model_scores
        .iter()
        .map(|&x| if total > 0.0 { x / total } else { x })
        .collect();
    Ok(match freq_row {
        None => normalized,
        Some(f) => normalized
            .iter()
            .zip(f)
            .map(|(m, q)| alpha * m + (1.0 - alpha) * q)
            .collect(),
    })
}

/// Frequency table and weight for blended ranking.
#[derive(Debug, Clone)]
pub struct BlendSpec {
    pub table: FrequencyTable,
    pub alpha: f64,
}

/// Evaluation settings.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Stream position of the first test event, for reporting.
    pub first_index: usize,
    pub dump_scores: bool,
    pub blend: Option<BlendSpec>,
}

/// Scores of all nodes as partners of `u` under the current state.
pub fn model_scores(
    e: &Event,
    state: &ModelState,
    intensity: &IntensityParams,
    blend_spec: Option<&BlendSpec>,
) -> Result<Vec<Option<f64>>> {
    let n = state.nodes.n_nodes();
    let z_u = &state.nodes.z[e.u];
    let mut raw: Vec<f64> = (0..n)
        .map(|v| if v == e.u { 0.0 } else { intensity.lambda(z_u, &state.nodes.z[v], e.kind) })
        .collect();
    if let Some(b) = blend_spec {
        raw = blend(&raw, b.table.row(e.u), b.alpha)?;
    }
    Ok(raw.into_iter().enumerate().map(|(v, x)| (v != e.u).then_some(x)).collect())
}

/// Rank of the true partner of `e`, scored against `state`.
pub fn rank_event(
    e: &Event,
    state: &ModelState,
    intensity: &IntensityParams,
    blend_spec: Option<&BlendSpec>,
) -> Result<(f64, Vec<Option<f64>>)> {
    Ok(rank_scores(e.u, e.v, model_scores(e, state, intensity, blend_spec)?))
}

/// Ranks every communication event of `test`, advancing `state` through all
/// test events (association events included) without gradients.
pub fn evaluate(
    test: &EventStream,
    state: &mut ModelState,
    params: &ParamStore,
    cfg: &ModelConfig,
    opts: &EvalOptions,
    rng: &mut ChaCha8Rng,
) -> Result<RankResult> {
    ensure!(
        test.count_kind(EventKind::Communication) > 0,
        Validation,
        "test stream has no communication events"
    );
    ensure!(params.is_usable(), NonFinite, "parameters are not finite or a rate is zero");
    let intensity = IntensityParams::from_store(params, cfg.interaction);
    let mut ranks = Vec::new();
    let mut dumps = Vec::new();
    advance(state, params, cfg, test.events(), opts.first_index, EVAL_CHUNK, rng, |index, e, s| {
        if e.kind == EventKind::Communication {
            let (rank, scores) = rank_event(e, s, &intensity, opts.blend.as_ref())?;
            ranks.push(EventRank {
                event_index: index,
                u: e.u,
                true_v: e.v,
                rank,
            });
            if opts.dump_scores {
                dumps.push(ScoreDump {
                    event_index: index,
                    u: e.u,
                    true_v: e.v,
                    scores,
                });
            }
        }
        Ok(())
    })?;
    RankResult::from_ranks(ranks, dumps)
}

fn rank_with(test: &EventStream, mut score: impl FnMut(&Event) -> Vec<f64>) -> Result<RankResult> {
    let ranks = test
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EventKind::Communication)
        .map(|(i, e)| {
            let s = score(e);
            let (rank, _) = rank_scores(e.u, e.v, s.into_iter().map(Some).collect());
            EventRank {
                event_index: i,
                u: e.u,
                true_v: e.v,
                rank,
            }
        })
        .collect();
    RankResult::from_ranks(ranks, Vec::new())
}

/// Ranking without learning. With associations, each source node's
/// associated partners share the probability of being picked uniformly and
/// all other nodes score zero; a node without associations (or `None`)
/// scores every candidate equally.
pub fn no_learn_baseline(assoc: Option<&AssociationState>, test: &EventStream) -> Result<RankResult> {
    let n = test.n_nodes();
    rank_with(test, |e| {
        let mut s = vec![1.0; n];
        if let Some(a) = assoc {
            let nb = a.neighbors(e.u);
            if !nb.is_empty() {
                s = vec![0.0; n];
                for &i in nb {
                    s[i] = 1.0 / nb.len() as f64;
                }
            }
        }
        s
    })
}

/// Ranks partners by the source node's training communication frequency.
pub fn frequency_baseline(freq: &FrequencyTable, test: &EventStream) -> Result<RankResult> {
    let n = test.n_nodes();
    rank_with(test, |e| freq.row(e.u).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
}

/// Mann-Whitney ROC-AUC with tied scores counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    ensure!(
        pos > 0 && neg > 0,
        Validation,
        "AUC undefined with {pos} positive and {neg} negative labels"
    );
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// AUC of attention against a binary graph over all off-diagonal pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub per_type: Vec<f64>,
    /// Best single edge type.
    pub max_over_types: f64,
    /// Attention summed over types ("any edge").
    pub pooled: f64,
}

pub fn attention_auc(s: &AttentionState, assoc: &AssociationState) -> Result<AucReport> {
    let n = s.n_nodes();
    ensure!(assoc.n_nodes() == n, Contract, "attention and graph sizes differ");
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v))).collect();
    let labels: Vec<bool> = pairs.iter().map(|&(u, v)| assoc.contains(u, v)).collect();
    let per_type = (0..s.edge_types())
        .map(|c| roc_auc(&pairs.iter().map(|&(u, v)| s.get(u, v, c)).collect::<Vec<_>>(), &labels))
        .collect::<Result<Vec<_>>>()?;
    let pooled_scores: Vec<f64> = pairs.iter().map(|&(u, v)| s.fiber(u, v).iter().sum()).collect();
    Ok(AucReport {
        max_over_types: per_type.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pooled: roc_auc(&pooled_scores, &labels)?,
        per_type,
    })
}

/// One `auc.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct AucRow {
    pub assoc_name: String,
    pub snapshot: String,
    /// Edge type index, `max`, or `pooled`.
    pub edge_type: String,
    pub auc: f64,
}

impl AucRow {
    pub fn from_report(assoc_name: &str, snapshot: &str, report: &AucReport) -> Vec<AucRow> {
        let row = |edge_type: String, auc| AucRow {
            assoc_name: assoc_name.to_string(),
            snapshot: snapshot.to_string(),
            edge_type,
            auc,
        };
        let mut rows: Vec<AucRow> = report
            .per_type
            .iter()
            .enumerate()
            .map(|(c, &a)| row(c.to_string(), a))
            .collect();
        rows.push(row("max".into(), report.max_over_types));
        rows.push(row("pooled".into(), report.pooled));
        rows
    }
}

/// `assoc_name,snapshot,edge_type,auc`
pub fn save_auc_csv(rows: &[AucRow], path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["assoc_name", "snapshot", "edge_type", "auc"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([r.assoc_name.clone(), r.snapshot.clone(), r.edge_type.clone(), format!("{:?}", r.auc)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
