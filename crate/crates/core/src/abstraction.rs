//! Graph algebra over thresholded dependence structures: ancestor closure,
//! the reward-preserving (bisimulation) state abstraction, the
//! controllability-based abstraction it is compared against, and abstraction
//! accuracy.
//!
//! The reward-preserving abstraction keeps a task's reward parents together
//! with every dynamical ancestor of those parents — the smallest variable
//! subset whose dynamics and reward are closed under the graph, which is
//! exactly what a policy needs to act optimally. The controllability
//! abstraction instead keeps everything the action can eventually influence
//! plus the immediate parents of that set; it ignores the reward, so
//! action-driven decoy variables keep it from being minimal.
//!
//! All functions here are pure graph algebra: no sampling, no models.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmi::CausalGraphEstimate;
use crate::env::GroundTruthGraph;
use crate::error::{Error, Result};

/// How an abstraction mask was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Ancestor closure of learned reward parents under the learned graph.
    Bisimulation,
    /// Controllable variables plus their immediate parents; reward-agnostic.
    Cdl,
    /// Ancestor closure computed from the ground-truth graph.
    Oracle,
    /// All variables kept.
    Full,
}

/// A task-specific selection of state variables, as handed to the policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionMask {
    /// One flag per state variable; `true` keeps the variable.
    pub keep: Vec<bool>,
    /// The task the mask was derived for, when there is one.
    pub task: Option<usize>,
    pub provenance: Provenance,
}

impl AbstractionMask {
    /// The all-true mask.
    pub fn full(d_s: usize) -> Self {
        AbstractionMask { keep: vec![true; d_s], task: None, provenance: Provenance::Full }
    }

    /// Tags the mask with the task it will serve.
    pub fn with_task(mut self, task: usize) -> Self {
        self.task = Some(task);
        self
    }

    pub fn d_s(&self) -> usize {
        self.keep.len()
    }

    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    /// Indices of kept variables, increasing.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Writes `{"task": ..., "provenance": ..., "kept": [indices]}`.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct MaskJson {
            task: Option<usize>,
            provenance: Provenance,
            kept: Vec<usize>,
        }
        let doc =
            MaskJson { task: self.task, provenance: self.provenance, kept: self.kept_indices() };
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &doc)?;
        Ok(())
    }
}

/// Checks an edge matrix: one row per candidate parent — `d_s` state rows
/// optionally followed by one action row — and `d_s` columns (children).
fn check_edges(edges: &[Vec<bool>]) -> Result<usize> {
    let d_s = edges.first().map(|r| r.len()).unwrap_or(0);
    if d_s == 0 || edges.iter().any(|r| r.len() != d_s) {
        return Err(Error::ShapeMismatch("edge matrix must be rectangular and nonempty".into()));
    }
    if edges.len() != d_s && edges.len() != d_s + 1 {
        return Err(Error::ShapeMismatch(format!(
            "edge matrix has {} parent rows for {} children; expected {} or {}",
            edges.len(),
            d_s,
            d_s,
            d_s + 1
        )));
    }
    Ok(d_s)
}

/// Transitive ancestor closure of `seeds` over the state-variable edges of
/// `edges` (entry `[j][i]` means unit `j` is a parent of variable `i`). The
/// action row, when present, never contributes members. Includes the seeds;
/// terminates on cyclic graphs by fixed-point iteration. The result is
/// sorted.
pub fn ancestors(edges: &[Vec<bool>], seeds: &[usize]) -> Result<Vec<usize>> {
    let d_s = check_edges(edges)?;
    let mut member = vec![false; d_s];
    for &s in seeds {
        if s >= d_s {
            return Err(Error::InvalidArgument(format!(
                "seed {s} out of range for {d_s} state variables"
            )));
        }
        member[s] = true;
    }
    // Each pass adds the state parents of every current member; the member
    // set grows monotonically, so d_s passes suffice even with cycles.
    loop {
        let mut changed = false;
        for i in 0..d_s {
            if !member[i] {
                continue;
            }
            for (j, row) in edges.iter().take(d_s).enumerate() {
                if row[i] && !member[j] {
                    member[j] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok((0..d_s).filter(|&i| member[i]).collect())
}

/// The reward-preserving abstraction: the reward's parents plus all their
/// dynamical ancestors under `graph`. Fails on an empty parent set — a task
/// whose reward has no detected parents cannot be abstracted and should fall
/// back to the full mask upstream.
pub fn bisim_abstraction(
    graph: &CausalGraphEstimate,
    reward_parents: &[usize],
) -> Result<AbstractionMask> {
    if reward_parents.is_empty() {
        return Err(Error::InvalidArgument(
            "no reward parents detected: cannot derive a reward-preserving abstraction".into(),
        ));
    }
    let d_s = check_edges(&graph.edges)?;
    let members = ancestors(&graph.edges, reward_parents)?;
    let mut keep = vec![false; d_s];
    for m in members {
        keep[m] = true;
    }
    Ok(AbstractionMask { keep, task: None, provenance: Provenance::Bisimulation })
}

/// The controllability abstraction: variables forward-reachable from the
/// action, plus every non-controllable variable that is an immediate parent
/// of a controllable one. Requires the action row.
pub fn cdl_abstraction(graph: &CausalGraphEstimate) -> Result<AbstractionMask> {
    let d_s = check_edges(&graph.edges)?;
    if graph.edges.len() != d_s + 1 {
        return Err(Error::ShapeMismatch(
            "controllability abstraction needs the action row of the graph".into(),
        ));
    }
    // Forward reachability from the action.
    let mut controllable = vec![false; d_s];
    for (i, c) in controllable.iter_mut().enumerate() {
        *c = graph.edges[d_s][i];
    }
    loop {
        let mut changed = false;
        for j in 0..d_s {
            if !controllable[j] {
                continue;
            }
            for i in 0..d_s {
                if graph.edges[j][i] && !controllable[i] {
                    controllable[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    // Non-controllable parents of controllable children.
    let mut keep = controllable.clone();
    for j in 0..d_s {
        if controllable[j] {
            continue;
        }
        if (0..d_s).any(|i| controllable[i] && graph.edges[j][i]) {
            keep[j] = true;
        }
    }
    Ok(AbstractionMask { keep, task: None, provenance: Provenance::Cdl })
}

/// The reward-preserving abstraction computed from ground truth, for scoring
/// learned masks against.
pub fn oracle_abstraction(truth: &GroundTruthGraph, task: usize) -> Result<AbstractionMask> {
    if task >= truth.reward_parents.len() {
        return Err(Error::InvalidArgument(format!(
            "task {task} out of range for {} tasks",
            truth.reward_parents.len()
        )));
    }
    let parents: Vec<usize> = truth.reward_parents[task]
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    let mask = bisim_abstraction(
        &CausalGraphEstimate { edges: truth.dyn_parents.clone(), threshold: 0.0 },
        &parents,
    )?;
    Ok(AbstractionMask { provenance: Provenance::Oracle, task: Some(task), ..mask })
}

/// Fraction of variables on which the two masks agree (kept or dropped
/// alike).
pub fn abstraction_accuracy(mask: &AbstractionMask, oracle: &AbstractionMask) -> Result<f64> {
    if mask.keep.len() != oracle.keep.len() || mask.keep.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "mask lengths differ or are empty: {} vs {}",
            mask.keep.len(),
            oracle.keep.len()
        )));
    }
    let agree = mask.keep.iter().zip(&oracle.keep).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / mask.keep.len() as f64)
}

/// Zeroes the ignored components of `state`, leaving kept ones unchanged.
pub fn apply_mask(mask: &AbstractionMask, state: &[f64]) -> Result<Vec<f64>> {
    if state.len() != mask.keep.len() {
        return Err(Error::ShapeMismatch(format!(
            "state length {} does not match mask length {}",
            state.len(),
            mask.keep.len()
        )));
    }
    Ok(state.iter().zip(&mask.keep).map(|(v, &k)| if k { *v } else { 0.0 }).collect())
}
