//! Implicit per-variable dynamics models.
//!
//! Each state variable owns a two-tower score network trained with the
//! regularized contrastive loss under two scoring roles per batch: the full
//! context, and the context with one input unit masked out. The same network
//! therefore serves both the joint score `g(y; x)` and every masked score
//! `psi_j(y; x^{not j})`, which is what the information estimates in
//! [`crate::cmi`] subtract from each other.
//!
//! Labels are next-state values `s'_i`, mapped affinely onto `[-1, 1]` using
//! each variable's observed value range widened by 5%; negatives and
//! prediction candidates are drawn uniformly from that same normalized range.
//! Scoring next values directly (rather than changes) keeps the information
//! the estimators measure aligned with `p(s'_i | ...)`: a change `s'_i - s_i`
//! would smuggle `s_i` into the label and fabricate self-dependence for every
//! variable when `s_i` is the masked-out unit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::ReplayBuffer;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{
    reg_nce_grads, AdamState, InputMask, NceBatch, RegWeights, RoleMasks, ScoreNet,
    ScoreNetCheckpoint, ScoreNetConfig, ScoreNetGrad,
};
use crate::rng::SeedTree;

/// Fraction by which observed ranges are widened on each use.
pub const RANGE_WIDEN_FRACTION: f64 = 0.05;

/// Per-variable affine maps between raw values and the normalized `[-1, 1]`
/// candidate space. Degenerate ranges (constant variables) map to 0 and back
/// to the constant.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RangeMap {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl RangeMap {
    pub fn from_bounds(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::ShapeMismatch("bound vectors differ in length".into()));
        }
        for (l, h) in lo.iter().zip(&hi) {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(Error::InvalidArgument(format!("bad range [{l}, {h}]")));
            }
        }
        Ok(RangeMap { lo, hi })
    }

    /// Widens every range symmetrically by `frac` of its width.
    pub fn widened(mut self, frac: f64) -> Self {
        for (l, h) in self.lo.iter_mut().zip(self.hi.iter_mut()) {
            let pad = (*h - *l) * frac * 0.5;
            *l -= pad;
            *h += pad;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn lo(&self, i: usize) -> f64 {
        self.lo[i]
    }

    pub fn hi(&self, i: usize) -> f64 {
        self.hi[i]
    }

    pub fn to_unit(&self, i: usize, v: f64) -> f64 {
        let (l, h) = (self.lo[i], self.hi[i]);
        if h > l {
            2.0 * (v - l) / (h - l) - 1.0
        } else {
            0.0
        }
    }

    pub fn from_unit(&self, i: usize, y: f64) -> f64 {
        let (l, h) = (self.lo[i], self.hi[i]);
        l + (y + 1.0) * 0.5 * (h - l)
    }

    pub fn clip(&self, i: usize, v: f64) -> f64 {
        v.clamp(self.lo[i], self.hi[i])
    }

    /// Observed per-variable value ranges (both endpoints of each transition).
    pub fn values_of(buffer: &ReplayBuffer) -> Result<Self> {
        Self::scan(buffer, |t, i| vec![t.s[i], t.s_next[i]])
    }

    fn scan(
        buffer: &ReplayBuffer,
        f: impl Fn(&crate::env::Transition, usize) -> Vec<f64>,
    ) -> Result<Self> {
        if buffer.is_empty() {
            return Err(Error::InvalidArgument("cannot take ranges of an empty buffer".into()));
        }
        let d_s = buffer.d_s();
        let mut lo = vec![f64::INFINITY; d_s];
        let mut hi = vec![f64::NEG_INFINITY; d_s];
        for t in buffer.iter() {
            for i in 0..d_s {
                for v in f(t, i) {
                    lo[i] = lo[i].min(v);
                    hi[i] = hi[i].max(v);
                }
            }
        }
        Self::from_bounds(lo, hi)
    }
}

/// Optional multi-step training: the owner variable's value is rolled forward
/// by the model's own prediction for `horizon` steps while the remaining
/// context comes from the recorded trajectory, and the single-step losses
/// along the way are averaged.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MultiStepCfg {
    pub horizon: usize,
    pub n_samples: usize,
}

/// Hyperparameters of the implicit dynamics learner.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DynConfig {
    pub score: ScoreNetConfig,
    pub n_negatives: usize,
    pub reg_score: f64,
    pub reg_grad: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub multi_step: Option<MultiStepCfg>,
}

impl Default for DynConfig {
    fn default() -> Self {
        DynConfig {
            score: ScoreNetConfig::default(),
            n_negatives: 512,
            reg_score: 1e-6,
            reg_grad: 1e-6,
            batch_size: 32,
            learning_rate: 3e-4,
            multi_step: None,
        }
    }
}

impl DynConfig {
    /// Small-scale settings for laptop runs and tests.
    pub fn desk() -> Self {
        DynConfig {
            score: ScoreNetConfig::desk(),
            n_negatives: 48,
            batch_size: 16,
            ..DynConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_negatives == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size and negatives must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.reg_score < 0.0 || self.reg_grad < 0.0 {
            return Err(Error::InvalidArgument("bad optimization weights".into()));
        }
        if let Some(ms) = &self.multi_step {
            if ms.horizon < 2 || ms.n_samples == 0 {
                return Err(Error::InvalidArgument("multi-step needs horizon >= 2 and samples".into()));
            }
        }
        Ok(())
    }
}

/// Which masked role(s) accompany the full-context role at each datapoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSchedule {
    /// One uniformly random unit (state variable or action) per datapoint.
    /// Cheapest schedule, but each specific masked conditional only receives
    /// a 1/(d_S+1) share of the gradient traffic and can lag behind the
    /// full-context role, which inflates dependence estimates on pairs whose
    /// masked conditional is context-dependent.
    FullPlusRandomUnit,
    /// Always the given unit; mainly for focused studies.
    FullPlusFixedUnit(usize),
    /// Every unit masked once per datapoint (d_S+2 loss terms per datapoint).
    /// Costs proportionally more per step but trains every masked conditional
    /// at the same rate as the full one; preferred when the estimates must be
    /// calibrated in nats rather than merely ranked.
    FullPlusAllUnits,
}

/// Masks realizing a schedule for one batch: either one mask per datapoint or
/// one mask per unit shared by all datapoints.
pub(crate) enum ScheduleMasks {
    PerDatapoint(Vec<InputMask>),
    AllUnits(Vec<InputMask>),
}

impl ScheduleMasks {
    pub(crate) fn draw(
        d_s: usize,
        schedule: MaskSchedule,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        match schedule {
            MaskSchedule::FullPlusRandomUnit => Ok(Self::PerDatapoint(
                (0..batch)
                    .map(|_| InputMask::without_unit(d_s, rng.gen_range(0..=d_s)))
                    .collect::<Result<_>>()?,
            )),
            MaskSchedule::FullPlusFixedUnit(u) => Ok(Self::PerDatapoint(
                (0..batch).map(|_| InputMask::without_unit(d_s, u)).collect::<Result<_>>()?,
            )),
            MaskSchedule::FullPlusAllUnits => Ok(Self::AllUnits(
                (0..=d_s).map(|u| InputMask::without_unit(d_s, u)).collect::<Result<_>>()?,
            )),
        }
    }

    /// Role list for the loss engine: the full-context role first, then the
    /// masked role(s).
    pub(crate) fn roles<'a>(&'a self, full: &'a InputMask) -> Vec<RoleMasks<'a>> {
        let mut roles = vec![RoleMasks::Shared(full)];
        match self {
            Self::PerDatapoint(masks) => roles.push(RoleMasks::PerDatapoint(masks)),
            Self::AllUnits(unit_masks) => {
                roles.extend(unit_masks.iter().map(RoleMasks::Shared));
            }
        }
        roles
    }

    /// A representative masked-role mask (for invariance spot checks).
    pub(crate) fn first_mask(&self) -> &InputMask {
        match self {
            Self::PerDatapoint(masks) => &masks[0],
            Self::AllUnits(unit_masks) => &unit_masks[0],
        }
    }
}

/// Mean of the masked-role losses (all roles after the leading full one).
pub(crate) fn mean_masked_loss(nce_per_role: &[f64]) -> f64 {
    let masked = &nce_per_role[1..];
    masked.iter().sum::<f64>() / masked.len() as f64
}

/// One loss-trace record; mirrors the CSV columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub variable: usize,
    pub loss_full: f64,
    pub loss_masked: f64,
    pub reg_l1: f64,
    pub reg_grad: f64,
}

/// Writes a loss trace as `step,variable,loss_full,loss_masked,reg_l1,reg_grad`.
pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,variable,loss_full,loss_masked,reg_l1,reg_grad")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, r.variable, r.loss_full, r.loss_masked, r.reg_l1, r.reg_grad
        )?;
    }
    w.flush()?;
    Ok(())
}

struct VarModel {
    net: ScoreNet,
    adam: AdamState,
}

/// Collection of per-variable implicit models plus their shared
/// normalization, optimizer states, and training stream seed.
pub struct DynModel {
    vars: Vec<VarModel>,
    d_a: usize,
    values: RangeMap,
    cfg: DynConfig,
    seed: u64,
    steps_done: usize,
}

/// Index of the first maximal score; ties resolve to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in scores.iter().enumerate() {
        if *v > best_v {
            best_v = *v;
            best = k;
        }
    }
    best
}

impl DynModel {
    /// Builds fresh networks sized to `buffer`'s shapes, with normalization
    /// ranges taken from its contents.
    pub fn from_buffer(cfg: DynConfig, buffer: &ReplayBuffer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d_s = buffer.d_s();
        let d_a = buffer.d_a();
        let tree = SeedTree::new(seed).child("dyn-init");
        let vars = (0..d_s)
            .map(|i| {
                let mut rng = tree.item_rng("net", i as u64);
                let net = ScoreNet::new(i, d_s, d_a, &cfg.score, &mut rng)?;
                let adam = AdamState::new(net.n_params(), cfg.learning_rate);
                Ok(VarModel { net, adam })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DynModel {
            vars,
            d_a,
            values: RangeMap::values_of(buffer)?.widened(RANGE_WIDEN_FRACTION),
            cfg,
            seed,
            steps_done: 0,
        })
    }

    pub fn d_s(&self) -> usize {
        self.vars.len()
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn config(&self) -> &DynConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn net(&self, variable: usize) -> &ScoreNet {
        &self.vars[variable].net
    }

    pub fn value_range(&self) -> &RangeMap {
        &self.values
    }

    /// Raw context vector `(s, a)` checked against the model's shape.
    fn context(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.d_s() || a.len() != self.d_a {
            return Err(Error::ShapeMismatch(format!(
                "state/action lengths ({}, {}) do not match model ({}, {})",
                s.len(),
                a.len(),
                self.d_s(),
                self.d_a
            )));
        }
        Ok(s.iter().chain(a).cloned().collect())
    }

    /// Full-context score `g_i(y; s, a)` of a normalized candidate.
    pub fn score_full(&self, variable: usize, y_unit: f64, s: &[f64], a: &[f64]) -> Result<f64> {
        let x = self.context(s, a)?;
        self.vars[variable].net.score(y_unit, &x, &InputMask::full(self.d_s()))
    }

    /// Masked-context score `psi_j` of a normalized candidate.
    pub fn score_masked(
        &self,
        variable: usize,
        masked_unit: usize,
        y_unit: f64,
        s: &[f64],
        a: &[f64],
    ) -> Result<f64> {
        let x = self.context(s, a)?;
        let mask = InputMask::without_unit(self.d_s(), masked_unit)?;
        self.vars[variable].net.score(y_unit, &x, &mask)
    }

    /// Runs `steps` gradient steps on every per-variable network and returns
    /// the loss trace ordered by step, then variable.
    ///
    /// Batches, negatives, and mask draws come from a stateless stream keyed
    /// by (variable, global step), so training is identical whether the
    /// variables run in parallel or not, and a reloaded checkpoint continues
    /// exactly where it stopped.
    pub fn train(
        &mut self,
        buffer: &ReplayBuffer,
        steps: usize,
        schedule: MaskSchedule,
    ) -> Result<Vec<LossRow>> {
        if buffer.is_empty() {
            return Err(Error::InvalidArgument("training buffer is empty".into()));
        }
        if buffer.d_s() != self.d_s() || buffer.d_a() != self.d_a {
            return Err(Error::ShapeMismatch("buffer shapes do not match the model".into()));
        }
        if let MaskSchedule::FullPlusFixedUnit(u) = schedule {
            if u > self.d_s() {
                return Err(Error::InvalidArgument(format!("masked unit {u} out of range")));
            }
        }
        if steps == 0 {
            return Ok(vec![]);
        }
        let start = self.steps_done;
        let tree = SeedTree::new(self.seed).child("dyn-train");
        let cfg = self.cfg.clone();
        let values = self.values.clone();

        let mut work: Vec<(usize, &mut VarModel, Result<Vec<LossRow>>)> = self
            .vars
            .iter_mut()
            .enumerate()
            .map(|(i, v)| (i, v, Ok(vec![])))
            .collect();
        exec::for_each_mut(&mut work, |_, (i, var, out)| {
            *out = train_one_variable(*i, var, buffer, &cfg, &values, schedule, &tree, start, steps);
        });

        let mut per_var = Vec::with_capacity(work.len());
        for (_, _, r) in work {
            per_var.push(r?);
        }
        self.steps_done += steps;

        let mut rows = Vec::with_capacity(steps * per_var.len());
        for k in 0..steps {
            for trace in &per_var {
                rows.push(trace[k].clone());
            }
        }
        Ok(rows)
    }

    /// Predicts the next state under the full context: per variable, the
    /// candidate with the highest score among `n_samples` uniform draws
    /// (ties to the lowest-index draw), mapped back to a raw change.
    ///
    /// Candidates are drawn from `rng` variable by variable (d_S blocks of
    /// `n_samples` draws) before any scoring, so the stream consumption does
    /// not depend on evaluation order.
    pub fn predict_next(
        &self,
        s: &[f64],
        a: &[f64],
        n_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("prediction needs at least one sample".into()));
        }
        let x = self.context(s, a)?;
        let d_s = self.d_s();
        let candidates: Vec<Vec<f64>> = (0..d_s)
            .map(|_| (0..n_samples).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let picks = exec::map_indexed(d_s, |i| -> Result<f64> {
            let net = &self.vars[i].net;
            let feat = net.trunk_feature(&x, &InputMask::full(d_s))?;
            let scores = net.score_candidates(&feat.view(), &candidates[i]);
            let best = argmax_first(&scores);
            Ok(self.values.from_unit(i, candidates[i][best]))
        });
        picks.into_iter().collect()
    }

    /// Iterates [`DynModel::predict_next`], feeding predictions back and
    /// clipping to the observed value ranges. Returns the `actions.len()`
    /// predicted states (excluding `s0`).
    pub fn rollout(
        &self,
        s0: &[f64],
        actions: &[Vec<f64>],
        n_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        if actions.is_empty() {
            return Err(Error::InvalidArgument("rollout needs at least one action".into()));
        }
        let mut s = s0.to_vec();
        let mut out = Vec::with_capacity(actions.len());
        for a in actions {
            let mut next = self.predict_next(&s, a, n_samples, rng)?;
            for (i, v) in next.iter_mut().enumerate() {
                *v = self.values.clip(i, *v);
            }
            out.push(next.clone());
            s = next;
        }
        Ok(out)
    }

    /// Writes the manifest, per-variable networks, and optimizer states under
    /// `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut nets = Vec::new();
        let mut adams = Vec::new();
        for (i, var) in self.vars.iter().enumerate() {
            let net_name = format!("score_net_{i}.json");
            let adam_name = format!("adam_{i}.json");
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join(&net_name))?),
                &var.net.to_checkpoint(),
            )?;
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join(&adam_name))?),
                &var.adam,
            )?;
            nets.push(net_name);
            adams.push(adam_name);
        }
        let manifest = DynManifest {
            version: 1,
            d_a: self.d_a,
            seed: self.seed,
            steps_done: self.steps_done,
            cfg: self.cfg.clone(),
            values: self.values.clone(),
            nets,
            adams,
        };
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(dir.join("dyn_model.json"))?),
            &manifest,
        )?;
        Ok(())
    }

    /// Zeroes every network parameter, making all scores identically zero.
    /// A diagnostic hook for tests and calibration checks.
    #[doc(hidden)]
    pub fn zero_params(&mut self) {
        for var in self.vars.iter_mut() {
            for slice in var.net.param_slices_mut() {
                for v in slice {
                    *v = 0.0;
                }
            }
        }
    }

    /// Loads a model saved by [`DynModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DynManifest =
            serde_json::from_reader(BufReader::new(File::open(dir.join("dyn_model.json"))?))?;
        if manifest.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported dynamics manifest version {}",
                manifest.version
            )));
        }
        manifest.cfg.validate()?;
        let d_s = manifest.nets.len();
        if manifest.adams.len() != d_s || manifest.values.len() != d_s
        {
            return Err(Error::Checkpoint("manifest component counts disagree".into()));
        }
        let mut vars = Vec::with_capacity(d_s);
        for (i, (net_name, adam_name)) in manifest.nets.iter().zip(&manifest.adams).enumerate() {
            let chk: ScoreNetCheckpoint =
                serde_json::from_reader(BufReader::new(File::open(dir.join(net_name))?))?;
            let net = ScoreNet::from_checkpoint(&chk, d_s, manifest.d_a)?;
            if net.owner_variable() != i {
                return Err(Error::Checkpoint(format!(
                    "network file {net_name} belongs to variable {}, expected {i}",
                    net.owner_variable()
                )));
            }
            let adam: AdamState =
                serde_json::from_reader(BufReader::new(File::open(dir.join(adam_name))?))?;
            vars.push(VarModel { net, adam });
        }
        Ok(DynModel {
            vars,
            d_a: manifest.d_a,
            values: manifest.values,
            cfg: manifest.cfg,
            seed: manifest.seed,
            steps_done: manifest.steps_done,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DynManifest {
    version: u32,
    d_a: usize,
    seed: u64,
    steps_done: usize,
    cfg: DynConfig,
    values: RangeMap,
    nets: Vec<String>,
    adams: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn train_one_variable(
    i: usize,
    var: &mut VarModel,
    buffer: &ReplayBuffer,
    cfg: &DynConfig,
    values: &RangeMap,
    schedule: MaskSchedule,
    tree: &SeedTree,
    start: usize,
    steps: usize,
) -> Result<Vec<LossRow>> {
    let d_s = buffer.d_s();
    let d_a = buffer.d_a();
    let d = d_s + d_a;
    let full = InputMask::full(d_s);
    let reg = RegWeights { reg_score: cfg.reg_score, reg_grad: cfg.reg_grad };
    let stream = format!("var-{i}");
    let mut grad = ScoreNetGrad::zeros_like(&var.net);
    let mut rows = Vec::with_capacity(steps);

    for k in 0..steps {
        let step = start + k;
        let mut rng = tree.item_rng(&stream, step as u64);
        let b = cfg.batch_size;

        let stats = if let Some(ms) = &cfg.multi_step {
            grad.fill_zero();
            multi_step_losses(i, var, buffer, cfg, ms, values, schedule, &mut rng, &mut grad)?
        } else {
            let idx = buffer.sample_indices_with(&mut rng, b);
            let mut contexts = Array2::zeros((b, d));
            let mut labels = vec![0.0; b];
            let mut negatives = Array2::zeros((b, cfg.n_negatives));
            for (bi, &t_idx) in idx.iter().enumerate() {
                let t = buffer.get(t_idx);
                fill_context(&mut contexts, bi, &t.s, &t.a);
                labels[bi] = values.to_unit(i, t.s_next[i]);
                for n in 0..cfg.n_negatives {
                    negatives[(bi, n)] = rng.gen_range(-1.0..1.0);
                }
            }
            let masks = ScheduleMasks::draw(d_s, schedule, b, &mut rng)?;
            grad.fill_zero();
            let batch = NceBatch { contexts: &contexts, labels: &labels, negatives: &negatives };
            let stats =
                reg_nce_grads(&var.net, &batch, &masks.roles(&full), None, reg, &mut grad)?;

            // Invariant spot check: the masked role must ignore the masked
            // unit's value entirely.
            #[cfg(debug_assertions)]
            if step % 997 == 0 {
                let mask = masks.first_mask();
                let x: Vec<f64> = contexts.row(0).to_vec();
                let mut x2 = x.clone();
                for u in 0..=d_s {
                    if !mask.keeps(u) {
                        if u == d_s {
                            for v in x2[d_s..].iter_mut() {
                                *v += 0.9;
                            }
                        } else {
                            x2[u] += 1.7;
                        }
                    }
                }
                let s1 = var.net.score(labels[0], &x, mask)?;
                let s2 = var.net.score(labels[0], &x2, mask)?;
                debug_assert_eq!(s1.to_bits(), s2.to_bits(), "masked score leaked masked input");
            }
            stats
        };

        let g = grad.param_slices();
        let mut params = var.net.param_slices_mut();
        var.adam.step(&mut params, &g)?;
        drop(params);

        rows.push(LossRow {
            step,
            variable: i,
            loss_full: stats.nce_per_role[0],
            loss_masked: mean_masked_loss(&stats.nce_per_role),
            reg_l1: stats.reg_score,
            reg_grad: stats.reg_grad,
        });
    }
    Ok(rows)
}

fn fill_context(contexts: &mut Array2<f64>, row: usize, s: &[f64], a: &[f64]) {
    for (v, x) in s.iter().chain(a).enumerate() {
        contexts[(row, v)] = *x;
    }
}

/// Multi-step variant of one gradient step: pick episode segments, roll the
/// owner variable forward with the model's own argmax prediction while other
/// variables follow the recorded data, and average the single-step losses.
#[allow(clippy::too_many_arguments)]
fn multi_step_losses(
    i: usize,
    var: &mut VarModel,
    buffer: &ReplayBuffer,
    cfg: &DynConfig,
    ms: &MultiStepCfg,
    values: &RangeMap,
    schedule: MaskSchedule,
    rng: &mut ChaCha8Rng,
    grad: &mut ScoreNetGrad,
) -> Result<crate::nn::RegNceStats> {
    let d_s = buffer.d_s();
    let d_a = buffer.d_a();
    let d = d_s + d_a;
    let h = ms.horizon;
    let b = cfg.batch_size;
    let full = InputMask::full(d_s);
    let reg = RegWeights { reg_score: cfg.reg_score, reg_grad: cfg.reg_grad };

    // Segment starts whose whole window stays inside one episode.
    let mut starts = Vec::with_capacity(b);
    let mut attempts = 0;
    while starts.len() < b {
        attempts += 1;
        if attempts > 200 * b {
            return Err(Error::InvalidArgument(format!(
                "could not find {h}-step in-episode segments; horizon too long for the data"
            )));
        }
        let idx = buffer.sample_indices_with(rng, 1)[0];
        if idx + h > buffer.len() {
            continue;
        }
        let t0 = buffer.get(idx).t_in_episode;
        let contiguous =
            (0..h).all(|k| buffer.get(idx + k).t_in_episode == t0 + k as u32);
        if contiguous {
            starts.push(idx);
        }
    }

    // Owner-variable value carried forward by the model.
    let mut own: Vec<f64> = starts.iter().map(|&idx| buffer.get(idx).s[i]).collect();
    let mut total: Option<crate::nn::RegNceStats> = None;

    for k in 0..h {
        let mut contexts = Array2::zeros((b, d));
        let mut labels = vec![0.0; b];
        let mut negatives = Array2::zeros((b, cfg.n_negatives));
        for (bi, &idx) in starts.iter().enumerate() {
            let t = buffer.get(idx + k);
            let mut s = t.s.clone();
            s[i] = own[bi];
            fill_context(&mut contexts, bi, &s, &t.a);
            labels[bi] = values.to_unit(i, t.s_next[i]);
            for n in 0..cfg.n_negatives {
                negatives[(bi, n)] = rng.gen_range(-1.0..1.0);
            }
        }
        let masks = ScheduleMasks::draw(d_s, schedule, b, rng)?;
        let batch = NceBatch { contexts: &contexts, labels: &labels, negatives: &negatives };
        let stats = reg_nce_grads(&var.net, &batch, &masks.roles(&full), None, reg, grad)?;
        total = Some(match total {
            None => stats,
            Some(mut acc) => {
                for (a, s) in acc.nce_per_role.iter_mut().zip(&stats.nce_per_role) {
                    *a += s;
                }
                acc.reg_score += stats.reg_score;
                acc.reg_grad += stats.reg_grad;
                acc
            }
        });

        // Advance the owner variable by its own argmax prediction.
        if k + 1 < h {
            for (bi, &idx) in starts.iter().enumerate() {
                let t = buffer.get(idx + k);
                let mut s = t.s.clone();
                s[i] = own[bi];
                let x: Vec<f64> = s.iter().chain(&t.a).cloned().collect();
                let cands: Vec<f64> = (0..ms.n_samples).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let feat = var.net.trunk_feature(&x, &full)?;
                let scores = var.net.score_candidates(&feat.view(), &cands);
                own[bi] = values.from_unit(i, cands[argmax_first(&scores)]);
            }
        }
    }

    let mut stats = total.expect("horizon >= 2");
    let scale = 1.0 / h as f64;
    for v in stats.nce_per_role.iter_mut() {
        *v *= scale;
    }
    stats.reg_score *= scale;
    stats.reg_grad *= scale;
    grad.trunk.scale(scale);
    grad.label.scale(scale);
    Ok(stats)
}
