//! Conditional-dependence estimation from implicit dynamics models.
//!
//! For a child variable `i` and a candidate parent unit `j` (a state variable
//! or the action), the estimator averages, over evaluation transitions,
//!
//! ```text
//!   log [ (N+1) e^{phi(y*)} / ( e^{phi(y*)} + N * sum_n w_n e^{phi(y_n)} ) ]
//! ```
//!
//! where `y*` is the observed normalized change, `y_n` are `N` fresh uniform
//! negatives, and `w_n` are self-normalized importance weights built from the
//! masked scores `psi_j`. The corrected scorer uses `phi = g - psi_j`, both
//! read off the same per-variable network; the baseline scorer uses a
//! separately learned `phi` trained against the frozen `psi_j` (the
//! overfitting-prone construction this crate exists to compare against).

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GroundTruthGraph, ReplayBuffer};
use crate::error::{Error, Result};
use crate::exec;
use crate::implicit::DynModel;
use crate::nn::{
    reg_nce_grads, AdamState, InputMask, NceBatch, RegWeights, RoleMasks, ScoreNet, ScoreNetGrad,
};
use crate::oracle::KahanSum;
use crate::rng::SeedTree;

/// Default decision threshold for declaring an edge.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.02;

/// Which scoring construction produced a dependence matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    CbmGMinusPsi,
    DemiLearnedPhi,
    ExplicitLikelihood,
    OracleExact,
}

/// Dependence estimates in nats. Rows index candidate parents (state
/// variables first, the action last), columns index child variables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CmiMatrix {
    pub values: Vec<Vec<f64>>,
    pub n_eval_transitions: usize,
    pub n_negatives: usize,
    pub estimator_kind: EstimatorKind,
}

impl CmiMatrix {
    pub fn n_parents(&self) -> usize {
        self.values.len()
    }

    pub fn n_children(&self) -> usize {
        self.values.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn get(&self, parent_unit: usize, child: usize) -> f64 {
        self.values[parent_unit][child]
    }

    fn validate_rect(&self) -> Result<()> {
        let c = self.n_children();
        if self.values.is_empty() || c == 0 || self.values.iter().any(|r| r.len() != c) {
            return Err(Error::ShapeMismatch("dependence matrix must be rectangular".into()));
        }
        Ok(())
    }

    /// Writes the matrix as CSV: one row per candidate parent labeled
    /// `s1..s_d, action`, one column per child labeled `s1..s_d`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.validate_rect()?;
        let d_s = self.n_children();
        if self.n_parents() != d_s + 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parent rows for {} children, found {}",
                d_s + 1,
                d_s,
                self.n_parents()
            )));
        }
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "parent")?;
        for i in 0..d_s {
            write!(w, ",s{}", i + 1)?;
        }
        writeln!(w)?;
        for (j, row) in self.values.iter().enumerate() {
            if j < d_s {
                write!(w, "s{}", j + 1)?;
            } else {
                write!(w, "action")?;
            }
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Thresholded dependence structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalGraphEstimate {
    pub edges: Vec<Vec<bool>>,
    pub threshold: f64,
}

impl CausalGraphEstimate {
    /// Edge list as `(parent_unit, child)` pairs in row-major order.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, row) in self.edges.iter().enumerate() {
            for (i, e) in row.iter().enumerate() {
                if *e {
                    out.push((j, i));
                }
            }
        }
        out
    }

    /// Writes `{"threshold": eps, "edges": [[parent, child], ...]}`.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct GraphJson {
            threshold: f64,
            edges: Vec<[usize; 2]>,
        }
        let doc = GraphJson {
            threshold: self.threshold,
            edges: self.edge_list().into_iter().map(|(j, i)| [j, i]).collect(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &doc)?;
        Ok(())
    }
}

/// Evaluation settings for dependence estimation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CmiConfig {
    pub n_eval_transitions: usize,
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for CmiConfig {
    fn default() -> Self {
        CmiConfig { n_eval_transitions: 2000, n_negatives: 512, seed: 0 }
    }
}

/// Self-normalized importance weights: a stabilized softmax of the masked
/// scores.
pub fn importance_weights(psi_scores: &[f64]) -> Result<Vec<f64>> {
    if psi_scores.is_empty() {
        return Err(Error::InvalidArgument("need at least one negative score".into()));
    }
    if psi_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("masked scores contain NaN or infinity".into()));
    }
    let m = psi_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = psi_scores.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// A separately learned scorer for one (child, parent) pair, trained to
/// complement the frozen masked score.
pub struct LearnedPhi {
    pub net: ScoreNet,
    pub child: usize,
    pub parent_unit: usize,
}

/// Which `phi` the estimator evaluates.
#[derive(Clone, Copy)]
pub enum PhiSource<'a> {
    /// `phi = g - psi_j`, both from the dynamics model's own network.
    CbmGMinusPsi,
    /// A separately learned full-context scorer.
    Learned(&'a LearnedPhi),
}

/// Per-candidate `phi` values for one context, computed exactly as
/// [`cmi_pair`] computes them. Candidate order matches `cands`.
pub fn phi_values(
    model: &DynModel,
    phi: PhiSource<'_>,
    child: usize,
    parent_unit: usize,
    s: &[f64],
    a: &[f64],
    cands: &[f64],
) -> Result<Vec<f64>> {
    let d_s = model.d_s();
    let x: Vec<f64> = s.iter().chain(a).cloned().collect();
    let mask = InputMask::without_unit(d_s, parent_unit)?;
    let full = InputMask::full(d_s);
    let net = model.net(child);
    match phi {
        PhiSource::CbmGMinusPsi => {
            let feat_full = net.trunk_feature(&x, &full)?;
            let feat_masked = net.trunk_feature(&x, &mask)?;
            let g = net.score_candidates(&feat_full.view(), cands);
            let psi = net.score_candidates(&feat_masked.view(), cands);
            Ok(g.iter().zip(&psi).map(|(g, p)| g - p).collect())
        }
        PhiSource::Learned(lp) => {
            if lp.child != child || lp.parent_unit != parent_unit {
                return Err(Error::InvalidArgument(format!(
                    "learned scorer is for pair ({}, {}), asked about ({parent_unit}, {child})",
                    lp.parent_unit, lp.child
                )));
            }
            let feat = lp.net.trunk_feature(&x, &full)?;
            Ok(lp.net.score_candidates(&feat.view(), cands))
        }
    }
}

/// Dependence estimate in nats for one (parent unit, child) pair, averaged
/// over the first `cfg.n_eval_transitions` transitions of `buffer`.
///
/// Negatives are drawn fresh per transition from the normalized change range,
/// the same proposal the model was trained against. The value may be slightly
/// negative from sampling variance; matrix assembly clamps at zero.
pub fn cmi_pair(
    model: &DynModel,
    phi: PhiSource<'_>,
    child: usize,
    parent_unit: usize,
    buffer: &ReplayBuffer,
    cfg: &CmiConfig,
) -> Result<f64> {
    let d_s = model.d_s();
    if child >= d_s || parent_unit > d_s {
        return Err(Error::InvalidArgument(format!(
            "pair ({parent_unit}, {child}) out of range for {d_s} variables"
        )));
    }
    if cfg.n_eval_transitions == 0 || cfg.n_negatives == 0 {
        return Err(Error::InvalidArgument("evaluation needs transitions and negatives".into()));
    }
    if buffer.len() < cfg.n_eval_transitions {
        return Err(Error::InvalidArgument(format!(
            "buffer holds {} transitions, evaluation needs {}",
            buffer.len(),
            cfg.n_eval_transitions
        )));
    }
    if buffer.d_s() != d_s || buffer.d_a() != model.d_a() {
        return Err(Error::ShapeMismatch("buffer shapes do not match the model".into()));
    }

    let n = cfg.n_negatives;
    let n_f = n as f64;
    let ln_np1 = (n_f + 1.0).ln();
    let ln_n = n_f.ln();
    let tree = SeedTree::new(cfg.seed).child("cmi-eval");
    let stream = format!("pair-{parent_unit}-{child}");
    let mask = InputMask::without_unit(d_s, parent_unit)?;
    let net = model.net(child);
    let values = model.value_range();

    let mut acc = KahanSum::new();
    let mut cands = vec![0.0; n + 1];
    let mut terms = vec![0.0; n + 1];
    for t_idx in 0..cfg.n_eval_transitions {
        let mut rng = tree.item_rng(&stream, t_idx as u64);
        let t = buffer.get(t_idx);
        let x: Vec<f64> = t.s.iter().chain(&t.a).cloned().collect();
        cands[0] = values.to_unit(child, t.s_next[child]);
        for c in cands[1..].iter_mut() {
            *c = rng.gen_range(-1.0..1.0);
        }

        let feat_masked = net.trunk_feature(&x, &mask)?;
        let psi = net.score_candidates(&feat_masked.view(), &cands);
        let weights = importance_weights(&psi[1..])?;
        let phi_vals = phi_values(model, phi, child, parent_unit, &t.s, &t.a, &cands)?;

        terms[0] = phi_vals[0];
        for (k, (p, w)) in phi_vals[1..].iter().zip(&weights).enumerate() {
            terms[k + 1] = p + ln_n + w.ln();
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        acc.add(ln_np1 + phi_vals[0] - lse);
    }
    Ok(acc.value() / cfg.n_eval_transitions as f64)
}

/// Full dependence matrix under the corrected scorer, parallel over pairs.
/// Entries are clamped below at zero.
pub fn cmi_matrix(model: &DynModel, buffer: &ReplayBuffer, cfg: &CmiConfig) -> Result<CmiMatrix> {
    let d_s = model.d_s();
    let flat = exec::map_indexed((d_s + 1) * d_s, |k| {
        cmi_pair(model, PhiSource::CbmGMinusPsi, k % d_s, k / d_s, buffer, cfg)
    });
    assemble_matrix(flat, d_s, cfg, EstimatorKind::CbmGMinusPsi)
}

/// Full dependence matrix under the learned-scorer baseline: per pair, a
/// fresh scorer is trained for `train_steps` against the frozen masked score,
/// then evaluated. Far more expensive than [`cmi_matrix`] by construction.
pub fn cmi_matrix_demi(
    model: &DynModel,
    train_buffer: &ReplayBuffer,
    train_steps: usize,
    eval_buffer: &ReplayBuffer,
    cfg: &CmiConfig,
) -> Result<CmiMatrix> {
    let d_s = model.d_s();
    let flat = exec::map_indexed((d_s + 1) * d_s, |k| {
        let (child, parent_unit) = (k % d_s, k / d_s);
        let (phi, _) =
            train_demi_phi(model, train_buffer, child, parent_unit, train_steps, cfg.seed)?;
        cmi_pair(model, PhiSource::Learned(&phi), child, parent_unit, eval_buffer, cfg)
    });
    assemble_matrix(flat, d_s, cfg, EstimatorKind::DemiLearnedPhi)
}

fn assemble_matrix(
    flat: Vec<Result<f64>>,
    d_s: usize,
    cfg: &CmiConfig,
    kind: EstimatorKind,
) -> Result<CmiMatrix> {
    let mut it = flat.into_iter();
    let mut values = vec![vec![0.0; d_s]; d_s + 1];
    for row in values.iter_mut() {
        for v in row.iter_mut() {
            *v = it.next().unwrap()?.max(0.0);
        }
    }
    Ok(CmiMatrix {
        values,
        n_eval_transitions: cfg.n_eval_transitions,
        n_negatives: cfg.n_negatives,
        estimator_kind: kind,
    })
}

/// Trains the baseline's learned scorer for one pair by minimizing the
/// contrastive loss of `phi + psi*`, with `psi*` read from the dynamics model
/// and never updated. Returns the scorer and the per-step loss trace.
///
/// Batch size, negative count, learning rate, and tower shape follow the
/// dynamics model's own training configuration.
pub fn train_demi_phi(
    model: &DynModel,
    buffer: &ReplayBuffer,
    child: usize,
    parent_unit: usize,
    steps: usize,
    seed: u64,
) -> Result<(LearnedPhi, Vec<f64>)> {
    let d_s = model.d_s();
    let d_a = model.d_a();
    if child >= d_s || parent_unit > d_s {
        return Err(Error::InvalidArgument(format!(
            "pair ({parent_unit}, {child}) out of range for {d_s} variables"
        )));
    }
    if buffer.d_s() != d_s || buffer.d_a() != d_a {
        return Err(Error::ShapeMismatch("buffer shapes do not match the model".into()));
    }
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("training buffer is empty".into()));
    }
    let cfg = model.config().clone();
    let tree = SeedTree::new(seed).child("demi-phi");
    let stream = format!("pair-{parent_unit}-{child}");
    let mut init_rng = tree.rng(&format!("init-{parent_unit}-{child}"));
    let mut net = ScoreNet::new(child, d_s, d_a, &cfg.score, &mut init_rng)?;
    let mut adam = AdamState::new(net.n_params(), cfg.learning_rate);
    let mut grad = ScoreNetGrad::zeros_like(&net);

    let b = cfg.batch_size;
    let n = cfg.n_negatives;
    let d = d_s + d_a;
    let full = InputMask::full(d_s);
    let mask = InputMask::without_unit(d_s, parent_unit)?;
    let psi_net = model.net(child);
    let values = model.value_range();
    let mut trace = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut rng = tree.item_rng(&stream, step as u64);
        let idx = buffer.sample_indices_with(&mut rng, b);
        let mut contexts = Array2::zeros((b, d));
        let mut labels = vec![0.0; b];
        let mut negatives = Array2::zeros((b, n));
        let mut offsets = Array2::zeros((b, n + 1));
        let mut cands = vec![0.0; n + 1];
        for (bi, &t_idx) in idx.iter().enumerate() {
            let t = buffer.get(t_idx);
            let x: Vec<f64> = t.s.iter().chain(&t.a).cloned().collect();
            for (v, xv) in x.iter().enumerate() {
                contexts[(bi, v)] = *xv;
            }
            labels[bi] = values.to_unit(child, t.s_next[child]);
            cands[0] = labels[bi];
            for nn in 0..n {
                let y = rng.gen_range(-1.0..1.0);
                negatives[(bi, nn)] = y;
                cands[nn + 1] = y;
            }
            // Frozen masked scores enter the loss as fixed additive offsets.
            let feat = psi_net.trunk_feature(&x, &mask)?;
            for (k, v) in psi_net.score_candidates(&feat.view(), &cands).into_iter().enumerate() {
                offsets[(bi, k)] = v;
            }
        }
        grad.fill_zero();
        let batch = NceBatch { contexts: &contexts, labels: &labels, negatives: &negatives };
        let stats = reg_nce_grads(
            &net,
            &batch,
            &[RoleMasks::Shared(&full)],
            Some(std::slice::from_ref(&offsets)),
            RegWeights { reg_score: 0.0, reg_grad: 0.0 },
            &mut grad,
        )?;
        let g = grad.param_slices();
        let mut params = net.param_slices_mut();
        adam.step(&mut params, &g)?;
        drop(params);
        trace.push(stats.nce_per_role[0]);
    }
    Ok((LearnedPhi { net, child, parent_unit }, trace))
}

/// Thresholds a dependence matrix into a graph estimate; an entry exactly at
/// the threshold counts as an edge.
pub fn binarize(cmi: &CmiMatrix, threshold: f64) -> Result<CausalGraphEstimate> {
    if threshold <= 0.0 {
        return Err(Error::InvalidArgument("threshold must be positive".into()));
    }
    cmi.validate_rect()?;
    Ok(CausalGraphEstimate {
        edges: cmi.values.iter().map(|row| row.iter().map(|v| *v >= threshold).collect()).collect(),
        threshold,
    })
}

/// Fraction of cells (edges and non-edges alike) where the estimate agrees
/// with the ground truth.
pub fn graph_accuracy(est: &CausalGraphEstimate, truth: &GroundTruthGraph) -> Result<f64> {
    let t = &truth.dyn_parents;
    if est.edges.len() != t.len()
        || est.edges.iter().zip(t).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::ShapeMismatch("graph shapes differ".into()));
    }
    let mut cells = 0usize;
    let mut agree = 0usize;
    for (ea, ta) in est.edges.iter().zip(t) {
        for (e, tv) in ea.iter().zip(ta) {
            cells += 1;
            if e == tv {
                agree += 1;
            }
        }
    }
    if cells == 0 {
        return Err(Error::InvalidArgument("empty graphs".into()));
    }
    Ok(agree as f64 / cells as f64)
}
