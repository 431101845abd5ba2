//! Explicit Gaussian baseline dynamics models.
//!
//! The mirror image of [`crate::implicit`]: each state variable owns a dense
//! network mapping the encoded masked context to the mean and log-std of a
//! Gaussian over the variable's normalized next value, trained by maximum
//! likelihood under the same full-plus-masked role schedule. Dependence of
//! child `i` on unit `j` is then the empirical log-likelihood ratio between
//! the full-context and `j`-masked densities — the direct-prediction
//! construction the contrastive estimators are compared against.
//!
//! Labels use the same normalized next-state convention as the implicit
//! models (see the module notes there on why changes are not used), so the
//! two estimators measure dependence on identical targets.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cmi::{CmiMatrix, EstimatorKind};
use crate::env::ReplayBuffer;
use crate::error::{Error, Result};
use crate::exec;
use crate::implicit::{
    mean_masked_loss, DynConfig, LossRow, RangeMap, ScheduleMasks, MaskSchedule,
    RANGE_WIDEN_FRACTION,
};
use crate::nn::{AdamState, InputMask, Mlp, MlpCheckpoint, MlpGrad};
use crate::oracle::KahanSum;
use crate::rng::SeedTree;

/// Clamp bounds on predicted log standard deviations. The lower bound keeps
/// densities finite on deterministic data; the upper bound keeps early
/// training from drowning the mean gradient in noise.
pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Log-density of `y` under a Gaussian with the given mean and (pre-clamp)
/// log standard deviation. Always finite for finite arguments.
pub fn gauss_log_density(y: f64, mean: f64, log_std: f64) -> f64 {
    let ls = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
    let z = (y - mean) * (-ls).exp();
    -0.5 * (2.0 * std::f64::consts::PI).ln() - ls - 0.5 * z * z
}

/// Hyperparameters of the Gaussian baseline learner.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExplicitConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ExplicitConfig {
    fn default() -> Self {
        ExplicitConfig { hidden: vec![128, 128], batch_size: 32, learning_rate: 3e-4 }
    }
}

impl ExplicitConfig {
    /// Small-scale settings for laptop runs and tests.
    pub fn desk() -> Self {
        ExplicitConfig { hidden: vec![32, 32], batch_size: 16, ..ExplicitConfig::default() }
    }

    /// Settings matched to an implicit configuration (same context network
    /// width, batch size, and learning rate), for controlled comparisons.
    pub fn matched(cfg: &DynConfig) -> Self {
        ExplicitConfig {
            hidden: cfg.score.trunk_widths.clone(),
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

struct GaussVar {
    net: Mlp,
    adam: AdamState,
}

/// Collection of per-variable Gaussian predictors plus their shared
/// normalization, optimizer states, and training stream seed.
pub struct ExplicitDynModel {
    vars: Vec<GaussVar>,
    d_a: usize,
    values: RangeMap,
    cfg: ExplicitConfig,
    seed: u64,
    steps_done: usize,
}

impl ExplicitDynModel {
    /// Builds fresh networks sized to `buffer`'s shapes, with normalization
    /// ranges taken from its contents.
    pub fn from_buffer(cfg: ExplicitConfig, buffer: &ReplayBuffer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d_s = buffer.d_s();
        let d_a = buffer.d_a();
        let mut widths = vec![InputMask::encoded_len(d_s, d_a)];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(2);
        let tree = SeedTree::new(seed).child("explicit-init");
        let vars = (0..d_s)
            .map(|i| {
                let mut rng = tree.item_rng("net", i as u64);
                let net = Mlp::new(&widths, &mut rng)?;
                let adam = AdamState::new(net.n_params(), cfg.learning_rate);
                Ok(GaussVar { net, adam })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExplicitDynModel {
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

    pub fn config(&self) -> &ExplicitConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn value_range(&self) -> &RangeMap {
        &self.values
    }

    fn check_context(&self, s: &[f64], a: &[f64], mask: &InputMask) -> Result<Vec<f64>> {
        if s.len() != self.d_s() || a.len() != self.d_a {
            return Err(Error::ShapeMismatch(format!(
                "state/action lengths ({}, {}) do not match model ({}, {})",
                s.len(),
                a.len(),
                self.d_s(),
                self.d_a
            )));
        }
        if mask.n_state_vars() != self.d_s() {
            return Err(Error::ShapeMismatch(format!(
                "mask covers {} state variables, model expects {}",
                mask.n_state_vars(),
                self.d_s()
            )));
        }
        let x: Vec<f64> = s.iter().chain(a).cloned().collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context contains NaN or infinity".into()));
        }
        Ok(x)
    }

    /// Predicted `(mean, log_std)` of the normalized next value of `variable`
    /// under the masked context. The log-std is already clamped.
    pub fn params(
        &self,
        variable: usize,
        s: &[f64],
        a: &[f64],
        mask: &InputMask,
    ) -> Result<(f64, f64)> {
        let x = self.check_context(s, a, mask)?;
        let encoded = mask.encode(&x, self.d_a);
        let out = self.vars[variable].net.forward(&encoded)?;
        Ok((out[0], out[1].clamp(LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// Runs `steps` maximum-likelihood gradient steps on every per-variable
    /// network and returns the loss trace ordered by step, then variable.
    /// The loss columns carry per-role negative log-likelihoods; the penalty
    /// columns are identically zero for this model family.
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
        let tree = SeedTree::new(self.seed).child("explicit-train");
        let cfg = self.cfg.clone();
        let values = self.values.clone();

        let mut work: Vec<(usize, &mut GaussVar, Result<Vec<LossRow>>)> = self
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

    /// Predicts the next state as the per-variable full-context Gaussian
    /// means, mapped back to raw values. Deterministic.
    pub fn predict_next(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let full = InputMask::full(self.d_s());
        (0..self.d_s())
            .map(|i| {
                let (mean, _) = self.params(i, s, a, &full)?;
                Ok(self.values.from_unit(i, mean))
            })
            .collect()
    }

    /// Writes the manifest, per-variable networks, and optimizer states under
    /// `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut nets = Vec::new();
        let mut adams = Vec::new();
        for (i, var) in self.vars.iter().enumerate() {
            let net_name = format!("gauss_net_{i}.json");
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
        let manifest = ExplicitManifest {
            version: 1,
            kind: "explicit".into(),
            d_a: self.d_a,
            seed: self.seed,
            steps_done: self.steps_done,
            cfg: self.cfg.clone(),
            values: self.values.clone(),
            nets,
            adams,
        };
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(dir.join("explicit_model.json"))?),
            &manifest,
        )?;
        Ok(())
    }

    /// Loads a model saved by [`ExplicitDynModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ExplicitManifest =
            serde_json::from_reader(BufReader::new(File::open(dir.join("explicit_model.json"))?))?;
        if manifest.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported explicit manifest version {}",
                manifest.version
            )));
        }
        if manifest.kind != "explicit" {
            return Err(Error::Checkpoint(format!(
                "manifest kind {:?} is not an explicit model",
                manifest.kind
            )));
        }
        manifest.cfg.validate()?;
        let d_s = manifest.nets.len();
        if manifest.adams.len() != d_s || manifest.values.len() != d_s {
            return Err(Error::Checkpoint("manifest component counts disagree".into()));
        }
        let mut vars = Vec::with_capacity(d_s);
        for (net_name, adam_name) in manifest.nets.iter().zip(&manifest.adams) {
            let chk: MlpCheckpoint =
                serde_json::from_reader(BufReader::new(File::open(dir.join(net_name))?))?;
            let net = Mlp::from_checkpoint(&chk)?;
            if net.input_dim() != InputMask::encoded_len(d_s, manifest.d_a) {
                return Err(Error::Checkpoint(format!(
                    "network input width {} != encoded context width {}",
                    net.input_dim(),
                    InputMask::encoded_len(d_s, manifest.d_a)
                )));
            }
            if net.output_dim() != 2 {
                return Err(Error::Checkpoint(
                    "explicit head must output mean and log-std".into(),
                ));
            }
            let adam: AdamState =
                serde_json::from_reader(BufReader::new(File::open(dir.join(adam_name))?))?;
            vars.push(GaussVar { net, adam });
        }
        Ok(ExplicitDynModel {
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
struct ExplicitManifest {
    version: u32,
    kind: String,
    d_a: usize,
    seed: u64,
    steps_done: usize,
    cfg: ExplicitConfig,
    values: RangeMap,
    nets: Vec<String>,
    adams: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn train_one_variable(
    i: usize,
    var: &mut GaussVar,
    buffer: &ReplayBuffer,
    cfg: &ExplicitConfig,
    values: &RangeMap,
    schedule: MaskSchedule,
    tree: &SeedTree,
    start: usize,
    steps: usize,
) -> Result<Vec<LossRow>> {
    let d_s = buffer.d_s();
    let d_a = buffer.d_a();
    let enc = InputMask::encoded_len(d_s, d_a);
    let full = InputMask::full(d_s);
    let stream = format!("var-{i}");
    let mut grad = MlpGrad::zeros_like(&var.net);
    let mut rows = Vec::with_capacity(steps);
    let b = cfg.batch_size;
    let inv_b = 1.0 / b as f64;

    for k in 0..steps {
        let step = start + k;
        let mut rng = tree.item_rng(&stream, step as u64);
        let idx = buffer.sample_indices_with(&mut rng, b);
        let mut raw = vec![0.0; d_s + d_a];
        let mut labels = vec![0.0; b];
        let masks = ScheduleMasks::draw(d_s, schedule, b, &mut rng)?;
        let roles = masks.roles(&full);
        let n_roles = roles.len();

        let mut ctx_rows = Array2::zeros((b * n_roles, enc));
        for (bi, &t_idx) in idx.iter().enumerate() {
            let t = buffer.get(t_idx);
            for (v, x) in t.s.iter().chain(&t.a).enumerate() {
                raw[v] = *x;
            }
            labels[bi] = values.to_unit(i, t.s_next[i]);
            for (r, role) in roles.iter().enumerate() {
                let mut row = ctx_rows.row_mut(bi * n_roles + r);
                role.mask(bi).encode_into(&raw, d_a, row.as_slice_mut().unwrap());
            }
        }

        let cache = var.net.forward_batch_cached(&ctx_rows);
        let out = cache.acts.last().unwrap();
        let mut cot = Array2::zeros((b * n_roles, 2));
        let mut nll_per_role = vec![0.0; n_roles];
        for bi in 0..b {
            for r in 0..n_roles {
                let row = bi * n_roles + r;
                let mean = out[(row, 0)];
                let raw_ls = out[(row, 1)];
                let ls = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let inv_sigma = (-ls).exp();
                let z = (labels[bi] - mean) * inv_sigma;
                let nll = 0.5 * (2.0 * std::f64::consts::PI).ln() + ls + 0.5 * z * z;
                if !nll.is_finite() {
                    return Err(Error::NonFinite("likelihood loss diverged".into()));
                }
                nll_per_role[r] += nll * inv_b;
                cot[(row, 0)] = -z * inv_sigma * inv_b;
                // The clamp gates the log-std gradient outside its window.
                if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls) {
                    cot[(row, 1)] = (1.0 - z * z) * inv_b;
                }
            }
        }

        grad.fill_zero();
        var.net.backward_batch(&cache, &cot, &mut grad);
        let g = grad.param_slices();
        let mut params = var.net.param_slices_mut();
        var.adam.step(&mut params, &g)?;
        drop(params);

        // Invariant spot check: the masked role must ignore the masked
        // unit's value entirely.
        #[cfg(debug_assertions)]
        if step % 997 == 0 {
            let mask = masks.first_mask();
            let t = buffer.get(idx[0]);
            let mut s2 = t.s.clone();
            let mut a2 = t.a.clone();
            for u in 0..=d_s {
                if !mask.keeps(u) {
                    if u == d_s {
                        for v in a2.iter_mut() {
                            *v += 0.9;
                        }
                    } else {
                        s2[u] += 1.7;
                    }
                }
            }
            let enc1 = mask.encode(
                &t.s.iter().chain(&t.a).cloned().collect::<Vec<_>>(),
                d_a,
            );
            let enc2 = mask.encode(
                &s2.iter().chain(&a2).cloned().collect::<Vec<_>>(),
                d_a,
            );
            let o1 = var.net.forward(&enc1)?;
            let o2 = var.net.forward(&enc2)?;
            debug_assert_eq!(o1[0].to_bits(), o2[0].to_bits(), "masked mean leaked masked input");
            debug_assert_eq!(o1[1].to_bits(), o2[1].to_bits(), "masked std leaked masked input");
        }

        rows.push(LossRow {
            step,
            variable: i,
            loss_full: nll_per_role[0],
            loss_masked: mean_masked_loss(&nll_per_role),
            reg_l1: 0.0,
            reg_grad: 0.0,
        });
    }
    Ok(rows)
}

/// Dependence estimate in nats for one (parent unit, child) pair: the mean,
/// over the first `n_eval` transitions of `buffer`, of the log-ratio between
/// the full-context and masked-context densities of the observed next value.
/// Deterministic given the model and buffer; may be slightly negative when
/// the masked head happens to fit better. Matrix assembly clamps at zero.
pub fn explicit_cmi(
    model: &ExplicitDynModel,
    child: usize,
    parent_unit: usize,
    buffer: &ReplayBuffer,
    n_eval: usize,
) -> Result<f64> {
    let d_s = model.d_s();
    if child >= d_s || parent_unit > d_s {
        return Err(Error::InvalidArgument(format!(
            "pair ({parent_unit}, {child}) out of range for {d_s} variables"
        )));
    }
    if n_eval == 0 {
        return Err(Error::InvalidArgument("evaluation needs transitions".into()));
    }
    if buffer.len() < n_eval {
        return Err(Error::InvalidArgument(format!(
            "buffer holds {} transitions, evaluation needs {n_eval}",
            buffer.len()
        )));
    }
    if buffer.d_s() != d_s || buffer.d_a() != model.d_a() {
        return Err(Error::ShapeMismatch("buffer shapes do not match the model".into()));
    }
    let mask = InputMask::without_unit(d_s, parent_unit)?;
    let full = InputMask::full(d_s);
    let values = model.value_range();

    let mut acc = KahanSum::new();
    for t_idx in 0..n_eval {
        let t = buffer.get(t_idx);
        let y = values.to_unit(child, t.s_next[child]);
        let (m_f, ls_f) = model.params(child, &t.s, &t.a, &full)?;
        let (m_m, ls_m) = model.params(child, &t.s, &t.a, &mask)?;
        acc.add(gauss_log_density(y, m_f, ls_f) - gauss_log_density(y, m_m, ls_m));
    }
    Ok(acc.value() / n_eval as f64)
}

/// Full dependence matrix under the likelihood-ratio construction, parallel
/// over pairs. Entries are clamped below at zero.
pub fn explicit_cmi_matrix(
    model: &ExplicitDynModel,
    buffer: &ReplayBuffer,
    n_eval: usize,
) -> Result<CmiMatrix> {
    let d_s = model.d_s();
    let flat = exec::map_indexed((d_s + 1) * d_s, |k| {
        explicit_cmi(model, k % d_s, k / d_s, buffer, n_eval)
    });
    let mut it = flat.into_iter();
    let mut values = vec![vec![0.0; d_s]; d_s + 1];
    for row in values.iter_mut() {
        for v in row.iter_mut() {
            *v = it.next().unwrap()?.max(0.0);
        }
    }
    Ok(CmiMatrix {
        values,
        n_eval_transitions: n_eval,
        n_negatives: 0,
        estimator_kind: EstimatorKind::ExplicitLikelihood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{
        collect_dataset, copy_chain, discrete_chain, CollectPolicy, CopyChainCfg,
        DiscreteChainCfg, Env, Transition,
    };
    use crate::nn::Dense;
    use crate::oracle::{oracle_cmi_matrix, OraclePolicy};
    use ndarray::Array1;
    use rand::Rng as _;

    fn chain_buffer(n: usize, seed: u64, noise: f64) -> ReplayBuffer {
        let env = Env::new(copy_chain(&CopyChainCfg {
            n_real: 2,
            d_a: 1,
            noise_std: noise,
            n_controllable: 0,
            n_uncontrollable: 0,
            horizon: 10,
            seed,
        }))
        .unwrap();
        collect_dataset(&env, &mut CollectPolicy::UniformRandom, n, seed).unwrap()
    }

    fn fingerprint(model: &ExplicitDynModel) -> Vec<String> {
        model
            .vars
            .iter()
            .map(|v| serde_json::to_string(&v.net.to_checkpoint()).unwrap())
            .collect()
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let buffer = chain_buffer(100, 1, 0.0);
        let mut model = ExplicitDynModel::from_buffer(ExplicitConfig::desk(), &buffer, 5).unwrap();
        let before = fingerprint(&model);
        let rows = model.train(&buffer, 0, MaskSchedule::FullPlusRandomUnit).unwrap();
        assert!(rows.is_empty());
        assert_eq!(before, fingerprint(&model));
    }

    #[test]
    fn log_density_is_finite_and_clamped() {
        assert!(gauss_log_density(0.5, 0.0, -1000.0).is_finite());
        assert!(gauss_log_density(0.5, 0.0, 1000.0).is_finite());
        // Clamped tails match the boundary values exactly.
        assert_eq!(gauss_log_density(0.3, 0.1, -9.0), gauss_log_density(0.3, 0.1, LOG_STD_MIN));
        assert_eq!(gauss_log_density(0.3, 0.1, 9.0), gauss_log_density(0.3, 0.1, LOG_STD_MAX));
    }

    #[test]
    fn log_density_shift_equivariance() {
        // log N(y + c; mu + c, sigma) = log N(y; mu, sigma): shifting a
        // variable's data and the model's means together leaves every
        // likelihood ratio, hence the dependence estimate, unchanged.
        let mut rng = crate::rng::seeded_rng(3);
        for _ in 0..200 {
            let y = rng.gen_range(-2.0..2.0);
            let mu = rng.gen_range(-2.0..2.0);
            let ls = rng.gen_range(-5.0..1.5);
            let c = rng.gen_range(-10.0..10.0);
            let a = gauss_log_density(y + c, mu + c, ls);
            let b = gauss_log_density(y, mu, ls);
            assert!((a - b).abs() < 1e-9, "shift broke the density: {a} vs {b}");
        }
    }

    #[test]
    fn predicted_log_std_respects_clamp() {
        // A crafted head with a huge log-std bias still reports values inside
        // the clamp window.
        let d_s = 2;
        let d_a = 1;
        let enc = InputMask::encoded_len(d_s, d_a);
        for bias in [1000.0, -1000.0] {
            let net = Mlp::from_layers(vec![Dense {
                w: Array2::zeros((2, enc)),
                b: Array1::from(vec![0.0, bias]),
            }])
            .unwrap();
            let model = ExplicitDynModel {
                vars: vec![
                    GaussVar { net: net.clone(), adam: AdamState::new(net.n_params(), 1e-3) },
                    GaussVar { net: net.clone(), adam: AdamState::new(net.n_params(), 1e-3) },
                ],
                d_a,
                values: RangeMap::from_bounds(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
                cfg: ExplicitConfig::desk(),
                seed: 0,
                steps_done: 0,
            };
            let (_, ls) = model.params(0, &[0.2, -0.3], &[0.1], &InputMask::full(d_s)).unwrap();
            assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(&ls));
        }
    }

    #[test]
    fn training_beats_the_no_change_baseline_on_a_noiseless_chain() {
        let buffer = chain_buffer(1500, 2, 0.0);
        let eval = chain_buffer(300, 77, 0.0);
        let mut model = ExplicitDynModel::from_buffer(ExplicitConfig::desk(), &buffer, 7).unwrap();
        let rows = model.train(&buffer, 2500, MaskSchedule::FullPlusRandomUnit).unwrap();
        let early: f64 = rows[..20].iter().map(|r| r.loss_full).sum::<f64>() / 20.0;
        let late: f64 = rows[rows.len() - 20..].iter().map(|r| r.loss_full).sum::<f64>() / 20.0;
        assert!(late < early, "no learning: {early} -> {late}");

        let mut err_model = 0.0;
        let mut err_frozen = 0.0;
        for t in eval.iter() {
            let pred = model.predict_next(&t.s, &t.a).unwrap();
            for i in 0..2 {
                err_model += (pred[i] - t.s_next[i]).abs();
                err_frozen += (t.s[i] - t.s_next[i]).abs();
            }
        }
        assert!(
            err_model < err_frozen,
            "mean prediction ({err_model}) no better than predicting no change ({err_frozen})"
        );
    }

    #[test]
    fn identical_roles_give_exactly_zero_dependence() {
        let buffer = chain_buffer(50, 3, 0.0);
        let mut model = ExplicitDynModel::from_buffer(ExplicitConfig::desk(), &buffer, 9).unwrap();
        for var in model.vars.iter_mut() {
            for slice in var.net.param_slices_mut() {
                for v in slice {
                    *v = 0.0;
                }
            }
        }
        for child in 0..2 {
            for parent in 0..=2 {
                assert_eq!(explicit_cmi(&model, child, parent, &buffer, 50).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn constant_density_ratio_recovers_its_log() {
        // A linear head reading only the keep-bit of unit 0: full role gets
        // log-std -ln 2, masked role log-std 0, means both zero. At y = 0 the
        // density ratio is exactly 2 for every transition, so the estimate is
        // ln 2.
        let d_s = 2;
        let d_a = 1;
        let enc = InputMask::encoded_len(d_s, d_a);
        let mut w = Array2::zeros((2, enc));
        w[(1, d_s + d_a)] = -std::f64::consts::LN_2;
        let net = Mlp::from_layers(vec![Dense { w, b: Array1::zeros(2) }]).unwrap();
        let model = ExplicitDynModel {
            vars: vec![
                GaussVar { net: net.clone(), adam: AdamState::new(net.n_params(), 1e-3) },
                GaussVar { net: net.clone(), adam: AdamState::new(net.n_params(), 1e-3) },
            ],
            d_a,
            values: RangeMap::from_bounds(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
            cfg: ExplicitConfig::desk(),
            seed: 0,
            steps_done: 0,
        };
        let mut buffer = ReplayBuffer::new(d_s, d_a, 0, 10, 100, 0);
        for k in 0..20 {
            buffer
                .push(Transition {
                    s: vec![0.3, -0.4],
                    a: vec![0.1],
                    r: vec![],
                    s_next: vec![0.0, 0.0],
                    t_in_episode: k,
                })
                .unwrap();
        }
        let est = explicit_cmi(&model, 0, 0, &buffer, 20).unwrap();
        assert!((est - std::f64::consts::LN_2).abs() < 1e-12, "estimate {est}");
    }

    #[test]
    fn masked_role_ignores_masked_inputs() {
        let buffer = chain_buffer(400, 4, 0.0);
        let mut model = ExplicitDynModel::from_buffer(ExplicitConfig::desk(), &buffer, 11).unwrap();
        model.train(&buffer, 40, MaskSchedule::FullPlusRandomUnit).unwrap();
        let mask = InputMask::without_unit(2, 0).unwrap();
        let p1 = model.params(1, &[0.3, -0.4], &[0.1], &mask).unwrap();
        let p2 = model.params(1, &[9.9, -0.4], &[0.1], &mask).unwrap();
        assert_eq!(p1.0.to_bits(), p2.0.to_bits());
        assert_eq!(p1.1.to_bits(), p2.1.to_bits());
        let full = InputMask::full(2);
        let f1 = model.params(1, &[0.3, -0.4], &[0.1], &full).unwrap();
        let f2 = model.params(1, &[9.9, -0.4], &[0.1], &full).unwrap();
        assert_ne!(f1.0.to_bits(), f2.0.to_bits());
    }

    #[test]
    fn save_load_resume_is_bit_exact() {
        let buffer = chain_buffer(400, 10, 0.05);
        let mut a = ExplicitDynModel::from_buffer(ExplicitConfig::desk(), &buffer, 21).unwrap();
        a.train(&buffer, 30, MaskSchedule::FullPlusRandomUnit).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let mut b = ExplicitDynModel::load(dir.path()).unwrap();
        assert_eq!(b.steps_done(), 30);
        let rows_a = a.train(&buffer, 30, MaskSchedule::FullPlusRandomUnit).unwrap();
        let rows_b = b.train(&buffer, 30, MaskSchedule::FullPlusRandomUnit).unwrap();
        assert_eq!(rows_a, rows_b);
        assert_eq!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn discrete_chain_estimates_agree_in_sign_with_enumeration() {
        let env = Env::new(discrete_chain(&DiscreteChainCfg {
            n_vars: 2,
            support: 3,
            action_levels: 3,
            flip_prob: 0.2,
            horizon: 20,
            seed: 0,
        }))
        .unwrap();
        let exact = oracle_cmi_matrix(&env, &OraclePolicy::Uniform).unwrap();
        let train = collect_dataset(&env, &mut CollectPolicy::UniformRandom, 3000, 0).unwrap();
        let eval = collect_dataset(&env, &mut CollectPolicy::UniformRandom, 1000, 100).unwrap();
        let mut model = ExplicitDynModel::from_buffer(ExplicitConfig::desk(), &train, 5).unwrap();
        model.train(&train, 4000, MaskSchedule::FullPlusAllUnits).unwrap();
        let m = explicit_cmi_matrix(&model, &eval, 1000).unwrap();
        assert_eq!(m.estimator_kind, EstimatorKind::ExplicitLikelihood);
        let threshold = 0.02;
        for j in 0..3 {
            for i in 0..2 {
                let oracle_edge = exact[(j, i)] > 1e-9;
                let est_edge = m.values[j][i] > threshold;
                assert_eq!(
                    oracle_edge, est_edge,
                    "pair ({j}->{i}): oracle {} vs estimate {}",
                    exact[(j, i)],
                    m.values[j][i]
                );
            }
        }
    }
}
