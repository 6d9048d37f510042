//! Temporal attention `S`: an `N x N x r` tensor of per-pair, per-edge-type
//! weights that controls how neighbor features propagate into embedding
//! updates.
//!
//! In DyRep mode `r = 1` and `S` is maintained by a fixed rule from the
//! association graph. In the latent-graph modes each `(u, v)` fiber is a
//! sampled one-hot vector over edge types (or all zeros for a non-edge).

use std::path::Path;

use crate::error::{ensure, Result};
use crate::events::{create_csv, csv_err, AssociationState, Event, EventKind};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    n: usize,
    r: usize,
    values: Vec<f64>,
}

impl AttentionState {
    pub fn zeros(n: usize, r: usize) -> Self {
        AttentionState {
            n,
            r,
            values: vec![0.0; n * n * r],
        }
    }

    /// DyRep initialization: every row uniform over the node's association
    /// neighbors.
    pub fn uniform_over(assoc: &AssociationState) -> Self {
        let mut s = Self::zeros(assoc.n_nodes(), 1);
        for u in 0..s.n {
            s.reset_row_uniform(u, assoc);
        }
        s
    }

    /// Rebuilds a tensor from its row-major values.
    pub fn from_values(n: usize, r: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == n * n * r,
            Contract,
            "attention of shape ({n}, {n}, {r}) needs {} values, got {}",
            n * n * r,
            values.len()
        );
        Ok(AttentionState { n, r, values })
    }

    /// Row-major values, `(u, v, c)` order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn edge_types(&self) -> usize {
        self.r
    }

    pub fn fiber(&self, u: usize, v: usize) -> &[f64] {
        let base = (u * self.n + v) * self.r;
        &self.values[base..base + self.r]
    }

    pub fn get(&self, u: usize, v: usize, c: usize) -> f64 {
        self.values[(u * self.n + v) * self.r + c]
    }

    pub fn set_fiber(&mut self, u: usize, v: usize, fiber: &[f64]) {
        assert_ne!(u, v, "attention has no self-edges");
        assert_eq!(fiber.len(), self.r, "fiber length mismatch");
        let base = (u * self.n + v) * self.r;
        self.values[base..base + self.r].copy_from_slice(fiber);
    }

    /// Partners `i` of `u` with nonzero weight on edge type `c`.
    pub fn active_partners(&self, u: usize, c: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| i != u && self.get(u, i, c) != 0.0)
            .collect()
    }

    /// Off-diagonal `N x N` slice for one edge type.
    pub fn slice(&self, c: usize) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|u| (0..self.n).map(|v| self.get(u, v, c)).collect())
            .collect()
    }

    /// Sum over edge types, giving an "any edge" weight per pair.
    pub fn pooled(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|u| (0..self.n).map(|v| self.fiber(u, v).iter().sum()).collect())
            .collect()
    }

    fn reset_row_uniform(&mut self, u: usize, assoc: &AssociationState) {
        for v in 0..self.n {
            if v != u {
                let base = (u * self.n + v) * self.r;
                self.values[base..base + self.r].fill(0.0);
            }
        }
        let nb = assoc.neighbors(u);
        if nb.is_empty() {
            return;
        }
        let w = 1.0 / nb.len() as f64;
        for &v in nb {
            self.values[(u * self.n + v) * self.r] = w;
        }
    }

    fn renormalize_row(&mut self, u: usize, assoc: &AssociationState) {
        let nb = assoc.neighbors(u);
        let total: f64 = nb.iter().map(|&v| self.get(u, v, 0)).sum();
        if total > 0.0 {
            for &v in nb {
                self.values[(u * self.n + v) * self.r] /= total;
            }
        }
    }

    /// Writes one dense `N x N` CSV per edge type: `{prefix}_type{c}.csv`.
    pub fn save_csv(&self, prefix: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut paths = Vec::new();
        for c in 0..self.r {
            let mut name = prefix.file_name().unwrap_or_default().to_os_string();
            name.push(format!("_type{c}.csv"));
            let path = prefix.with_file_name(name);
            let mut w = create_csv(&path)?;
            for row in self.slice(c) {
                w.write_record(row.iter().map(|x| format!("{x:?}")))
                    .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// The hard-coded DyRep attention rule, reconstructed:
///
/// * association event: the edge is added to `A`, then the rows of both
///   endpoints are reset to uniform weights over their neighbors;
/// * communication between associated nodes: `lambda` is added to `S[u, v]`
///   and `S[v, u]`, then both rows are renormalized over their neighbors;
/// * communication between non-associated nodes: no change.
pub fn dyrep_attention_update(
    e: &Event,
    lambda: f64,
    s: &AttentionState,
    assoc: &AssociationState,
) -> Result<(AttentionState, AssociationState)> {
    ensure!(lambda > 0.0, Contract, "intensity must be positive, got {lambda}");
    ensure!(s.r == 1, Contract, "DyRep attention has one edge type, got {}", s.r);
    let mut s = s.clone();
    let mut assoc = assoc.clone();
    match e.kind {
        EventKind::Association => {
            if assoc.apply_mut(e)? {
                s.reset_row_uniform(e.u, &assoc);
                s.reset_row_uniform(e.v, &assoc);
            }
        }
        EventKind::Communication => {
            if assoc.contains(e.u, e.v) {
                let n = s.n;
                s.values[e.u * n + e.v] += lambda;
                s.values[e.v * n + e.u] += lambda;
                s.renormalize_row(e.u, &assoc);
                s.renormalize_row(e.v, &assoc);
            }
        }
    }
    Ok((s, assoc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn communication_without_association_leaves_s_untouched() {
        let assoc = AssociationState::from_edges(4, &[(0, 1), (1, 2)]).unwrap();
        let s = AttentionState::uniform_over(&assoc);
        let (next, _) = dyrep_attention_update(&Event::communication(0, 3, 1.0), 0.7, &s, &assoc).unwrap();
        assert_eq!(
            next.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            s.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn first_association_gets_full_weight() {
        let assoc = AssociationState::empty(4);
        let s = AttentionState::uniform_over(&assoc);
        let (s, assoc) = dyrep_attention_update(&Event::association(2, 3, 1.0), 0.4, &s, &assoc).unwrap();
        assert_eq!(s.get(2, 3, 0), 1.0);
        assert_eq!(s.get(3, 2, 0), 1.0);
        assert!(assoc.contains(2, 3));
    }

    #[test]
    fn associated_communication_shifts_weight() {
        let assoc = AssociationState::from_edges(4, &[(0, 1), (0, 2)]).unwrap();
        let s = AttentionState::uniform_over(&assoc);
        let (s, _) = dyrep_attention_update(&Event::communication(0, 1, 1.0), 1.0, &s, &assoc).unwrap();
        // row 0: (0.5 + 1, 0.5) / 2
        assert!((s.get(0, 1, 0) - 0.75).abs() < 1e-12);
        assert!((s.get(0, 2, 0) - 0.25).abs() < 1e-12);
        assert_eq!(s.get(1, 0, 0), 1.0);
    }

    #[test]
    fn rejects_non_positive_lambda() {
        let assoc = AssociationState::empty(3);
        let s = AttentionState::uniform_over(&assoc);
        assert!(dyrep_attention_update(&Event::communication(0, 1, 0.0), 0.0, &s, &assoc).is_err());
    }

    proptest! {
        #[test]
        fn rows_stay_normalized(
            init in prop::collection::vec((0usize..6, 1usize..6), 0..6),
            events in prop::collection::vec((0usize..6, 1usize..6, any::<bool>(), 0.01f64..5.0), 1..60),
        ) {
            let edges: Vec<_> = init.iter().map(|&(u, o)| (u, (u + o) % 6)).collect();
            let mut assoc = AssociationState::from_edges(6, &edges).unwrap();
            let mut s = AttentionState::uniform_over(&assoc);
            for (t, &(u, o, is_assoc, lambda)) in events.iter().enumerate() {
                let v = (u + o) % 6;
                let e = if is_assoc { Event::association(u, v, t as f64) } else { Event::communication(u, v, t as f64) };
                let (ns, na) = dyrep_attention_update(&e, lambda, &s, &assoc).unwrap();
                s = ns;
                assoc = na;
                for node in 0..6 {
                    let nb = assoc.neighbors(node);
                    let total: f64 = nb.iter().map(|&i| s.get(node, i, 0)).sum();
                    if nb.is_empty() {
                        prop_assert_eq!(total, 0.0);
                    } else {
                        prop_assert!((total - 1.0).abs() < 1e-9);
                    }
                    for i in 0..6 {
                        if !nb.contains(&i) {
                            prop_assert_eq!(s.get(node, i, 0), 0.0);
                        }
                    }
                }
            }
        }
    }
}
