//! Masked reward predictors and the reward-dependence test.
//!
//! Each task owns a dense network mapping the encoded masked context
//! `(M ⊙ x_t)` to the mean and log-std of a Gaussian over the task's
//! normalized reward, trained by maximum likelihood with two roles per
//! datapoint: the full context and the context with one uniformly random
//! state variable masked out. The reward's dependence on variable `j` is the
//! empirical mean log-ratio between the full-context and `j`-masked
//! densities, and thresholding that vector yields the reward's causal
//! parents.
//!
//! The action is never a masking candidate here: dependence is only tested
//! against state variables, so the action stays in every context and the
//! per-task masks range over `0..d_S`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::ReplayBuffer;
use crate::error::{Error, Result};
use crate::exec;
use crate::explicit::{gauss_log_density, LOG_STD_MAX, LOG_STD_MIN};
use crate::implicit::{mean_masked_loss, LossRow, RangeMap, ScheduleMasks, RANGE_WIDEN_FRACTION};
use crate::nn::{AdamState, InputMask, Mlp, MlpCheckpoint, MlpGrad};
use crate::oracle::KahanSum;
use crate::rng::SeedTree;

/// Hyperparameters of the reward learner.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { hidden: vec![64, 64], batch_size: 64, learning_rate: 3e-4 }
    }
}

impl RewardConfig {
    /// Small-scale settings for laptop runs and tests.
    pub fn desk() -> Self {
        RewardConfig { hidden: vec![32, 32], batch_size: 16, ..RewardConfig::default() }
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

struct TaskHead {
    net: Mlp,
    adam: AdamState,
}

/// Per-task Gaussian reward predictors plus their shared context shape,
/// per-task reward normalization, optimizer states, and training stream seed.
pub struct RewardModel {
    tasks: Vec<TaskHead>,
    d_s: usize,
    d_a: usize,
    rewards: RangeMap,
    cfg: RewardConfig,
    seed: u64,
    steps_done: usize,
}

impl RewardModel {
    /// Builds fresh networks sized to `buffer`'s shapes, one per task, with
    /// reward normalization ranges taken from its contents.
    pub fn from_buffer(cfg: RewardConfig, buffer: &ReplayBuffer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if buffer.n_tasks() == 0 {
            return Err(Error::InvalidArgument("buffer carries no task rewards".into()));
        }
        if buffer.is_empty() {
            return Err(Error::InvalidArgument("cannot take reward ranges of an empty buffer".into()));
        }
        let d_s = buffer.d_s();
        let d_a = buffer.d_a();
        let mut widths = vec![InputMask::encoded_len(d_s, d_a)];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(2);
        let tree = SeedTree::new(seed).child("reward-init");
        let tasks = (0..buffer.n_tasks())
            .map(|k| {
                let mut rng = tree.item_rng("net", k as u64);
                let net = Mlp::new(&widths, &mut rng)?;
                let adam = AdamState::new(net.n_params(), cfg.learning_rate);
                Ok(TaskHead { net, adam })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RewardModel {
            tasks,
            d_s,
            d_a,
            rewards: reward_ranges(buffer)?.widened(RANGE_WIDEN_FRACTION),
            cfg,
            seed,
            steps_done: 0,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn config(&self) -> &RewardConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Per-task reward normalization ranges.
    pub fn reward_range(&self) -> &RangeMap {
        &self.rewards
    }

    fn check_context(&self, task: usize, s: &[f64], a: &[f64], mask: &InputMask) -> Result<Vec<f64>> {
        if task >= self.n_tasks() {
            return Err(Error::InvalidArgument(format!(
                "task {task} out of range for {} tasks",
                self.n_tasks()
            )));
        }
        if s.len() != self.d_s || a.len() != self.d_a {
            return Err(Error::ShapeMismatch(format!(
                "state/action lengths ({}, {}) do not match model ({}, {})",
                s.len(),
                a.len(),
                self.d_s,
                self.d_a
            )));
        }
        if mask.n_state_vars() != self.d_s {
            return Err(Error::ShapeMismatch(format!(
                "mask covers {} state variables, model expects {}",
                mask.n_state_vars(),
                self.d_s
            )));
        }
        let x: Vec<f64> = s.iter().chain(a).cloned().collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context contains NaN or infinity".into()));
        }
        Ok(x)
    }

    /// Predicted `(mean, log_std)` of the task's normalized reward under the
    /// masked context. The log-std is already clamped.
    pub fn params(&self, task: usize, s: &[f64], a: &[f64], mask: &InputMask) -> Result<(f64, f64)> {
        let x = self.check_context(task, s, a, mask)?;
        let encoded = mask.encode(&x, self.d_a);
        let out = self.tasks[task].net.forward(&encoded)?;
        Ok((out[0], out[1].clamp(LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// Predicted reward as the full-context Gaussian mean mapped back to raw
    /// values. Deterministic.
    pub fn predict(&self, task: usize, s: &[f64], a: &[f64]) -> Result<f64> {
        let full = InputMask::full(self.d_s);
        let (mean, _) = self.params(task, s, a, &full)?;
        Ok(self.rewards.from_unit(task, mean))
    }

    /// Runs `steps` maximum-likelihood gradient steps on every task network
    /// and returns the loss trace ordered by step, then task (in the
    /// `variable` column). Each datapoint contributes its negative
    /// log-likelihood under the full context and under one uniformly random
    /// single-state-variable-masked context; the penalty columns are
    /// identically zero for this model family.
    pub fn train(&mut self, buffer: &ReplayBuffer, steps: usize) -> Result<Vec<LossRow>> {
        if buffer.is_empty() {
            return Err(Error::InvalidArgument("training buffer is empty".into()));
        }
        if buffer.d_s() != self.d_s || buffer.d_a() != self.d_a {
            return Err(Error::ShapeMismatch("buffer shapes do not match the model".into()));
        }
        if buffer.n_tasks() != self.n_tasks() {
            return Err(Error::ShapeMismatch(format!(
                "buffer carries {} tasks, model has {}",
                buffer.n_tasks(),
                self.n_tasks()
            )));
        }
        if steps == 0 {
            return Ok(vec![]);
        }
        let start = self.steps_done;
        let tree = SeedTree::new(self.seed).child("reward-train");
        let cfg = self.cfg.clone();
        let rewards = self.rewards.clone();

        let mut work: Vec<(usize, &mut TaskHead, Result<Vec<LossRow>>)> = self
            .tasks
            .iter_mut()
            .enumerate()
            .map(|(k, t)| (k, t, Ok(vec![])))
            .collect();
        exec::for_each_mut(&mut work, |_, (k, head, out)| {
            *out = train_one_task(*k, head, buffer, &cfg, &rewards, &tree, start, steps);
        });

        let mut per_task = Vec::with_capacity(work.len());
        for (_, _, r) in work {
            per_task.push(r?);
        }
        self.steps_done += steps;

        let mut rows = Vec::with_capacity(steps * per_task.len());
        for k in 0..steps {
            for trace in &per_task {
                rows.push(trace[k].clone());
            }
        }
        Ok(rows)
    }

    /// Writes the manifest, per-task networks, and optimizer states under
    /// `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut nets = Vec::new();
        let mut adams = Vec::new();
        for (k, head) in self.tasks.iter().enumerate() {
            let net_name = format!("reward_net_{k}.json");
            let adam_name = format!("reward_adam_{k}.json");
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join(&net_name))?),
                &head.net.to_checkpoint(),
            )?;
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join(&adam_name))?),
                &head.adam,
            )?;
            nets.push(net_name);
            adams.push(adam_name);
        }
        let manifest = RewardManifest {
            version: 1,
            kind: "reward".into(),
            d_s: self.d_s,
            d_a: self.d_a,
            seed: self.seed,
            steps_done: self.steps_done,
            cfg: self.cfg.clone(),
            rewards: self.rewards.clone(),
            nets,
            adams,
        };
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(dir.join("reward_model.json"))?),
            &manifest,
        )?;
        Ok(())
    }

    /// Loads a model saved by [`RewardModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: RewardManifest =
            serde_json::from_reader(BufReader::new(File::open(dir.join("reward_model.json"))?))?;
        if manifest.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported reward manifest version {}",
                manifest.version
            )));
        }
        if manifest.kind != "reward" {
            return Err(Error::Checkpoint(format!(
                "manifest kind {:?} is not a reward model",
                manifest.kind
            )));
        }
        manifest.cfg.validate()?;
        let n_tasks = manifest.nets.len();
        if manifest.adams.len() != n_tasks || manifest.rewards.len() != n_tasks {
            return Err(Error::Checkpoint("manifest component counts disagree".into()));
        }
        let enc = InputMask::encoded_len(manifest.d_s, manifest.d_a);
        let mut tasks = Vec::with_capacity(n_tasks);
        for (net_name, adam_name) in manifest.nets.iter().zip(&manifest.adams) {
            let chk: MlpCheckpoint =
                serde_json::from_reader(BufReader::new(File::open(dir.join(net_name))?))?;
            let net = Mlp::from_checkpoint(&chk)?;
            if net.input_dim() != enc {
                return Err(Error::Checkpoint(format!(
                    "network input width {} != encoded context width {enc}",
                    net.input_dim()
                )));
            }
            if net.output_dim() != 2 {
                return Err(Error::Checkpoint("reward head must output mean and log-std".into()));
            }
            let adam: AdamState =
                serde_json::from_reader(BufReader::new(File::open(dir.join(adam_name))?))?;
            tasks.push(TaskHead { net, adam });
        }
        Ok(RewardModel {
            tasks,
            d_s: manifest.d_s,
            d_a: manifest.d_a,
            rewards: manifest.rewards,
            cfg: manifest.cfg,
            seed: manifest.seed,
            steps_done: manifest.steps_done,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RewardManifest {
    version: u32,
    kind: String,
    d_s: usize,
    d_a: usize,
    seed: u64,
    steps_done: usize,
    cfg: RewardConfig,
    rewards: RangeMap,
    nets: Vec<String>,
    adams: Vec<String>,
}

/// Observed per-task reward ranges.
fn reward_ranges(buffer: &ReplayBuffer) -> Result<RangeMap> {
    let n_tasks = buffer.n_tasks();
    let mut lo = vec![f64::INFINITY; n_tasks];
    let mut hi = vec![f64::NEG_INFINITY; n_tasks];
    for t in buffer.iter() {
        for (k, r) in t.r.iter().enumerate() {
            lo[k] = lo[k].min(*r);
            hi[k] = hi[k].max(*r);
        }
    }
    RangeMap::from_bounds(lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn train_one_task(
    k: usize,
    head: &mut TaskHead,
    buffer: &ReplayBuffer,
    cfg: &RewardConfig,
    rewards: &RangeMap,
    tree: &SeedTree,
    start: usize,
    steps: usize,
) -> Result<Vec<LossRow>> {
    let d_s = buffer.d_s();
    let d_a = buffer.d_a();
    let enc = InputMask::encoded_len(d_s, d_a);
    let full = InputMask::full(d_s);
    let stream = format!("task-{k}");
    let mut grad = MlpGrad::zeros_like(&head.net);
    let mut rows = Vec::with_capacity(steps);
    let b = cfg.batch_size;
    let inv_b = 1.0 / b as f64;

    for step_k in 0..steps {
        let step = start + step_k;
        let mut rng = tree.item_rng(&stream, step as u64);
        let idx = buffer.sample_indices_with(&mut rng, b);
        let mut raw = vec![0.0; d_s + d_a];
        let mut labels = vec![0.0; b];
        // One uniformly random masked state variable per datapoint; the
        // action is never masked.
        let masks = ScheduleMasks::PerDatapoint(
            (0..b)
                .map(|_| InputMask::without_unit(d_s, rng.gen_range(0..d_s)))
                .collect::<Result<_>>()?,
        );
        let roles = masks.roles(&full);
        let n_roles = roles.len();

        let mut ctx_rows = Array2::zeros((b * n_roles, enc));
        for (bi, &t_idx) in idx.iter().enumerate() {
            let t = buffer.get(t_idx);
            for (v, x) in t.s.iter().chain(&t.a).enumerate() {
                raw[v] = *x;
            }
            labels[bi] = rewards.to_unit(k, t.r[k]);
            for (r, role) in roles.iter().enumerate() {
                let mut row = ctx_rows.row_mut(bi * n_roles + r);
                role.mask(bi).encode_into(&raw, d_a, row.as_slice_mut().unwrap());
            }
        }

        let cache = head.net.forward_batch_cached(&ctx_rows);
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
        head.net.backward_batch(&cache, &cot, &mut grad);
        let g = grad.param_slices();
        let mut params = head.net.param_slices_mut();
        head.adam.step(&mut params, &g)?;
        drop(params);

        // Invariant spot check: the masked role must ignore the masked
        // variable's value entirely.
        #[cfg(debug_assertions)]
        if step % 997 == 0 {
            let mask = masks.first_mask();
            let t = buffer.get(idx[0]);
            let mut s2 = t.s.clone();
            for u in 0..d_s {
                if !mask.keeps(u) {
                    s2[u] += 1.7;
                }
            }
            let enc1 = mask.encode(&t.s.iter().chain(&t.a).cloned().collect::<Vec<_>>(), d_a);
            let enc2 = mask.encode(&s2.iter().chain(&t.a).cloned().collect::<Vec<_>>(), d_a);
            let o1 = head.net.forward(&enc1)?;
            let o2 = head.net.forward(&enc2)?;
            debug_assert_eq!(o1[0].to_bits(), o2[0].to_bits(), "masked mean leaked masked input");
            debug_assert_eq!(o1[1].to_bits(), o2[1].to_bits(), "masked std leaked masked input");
        }

        rows.push(LossRow {
            step,
            variable: k,
            loss_full: nll_per_role[0],
            loss_masked: mean_masked_loss(&nll_per_role),
            reg_l1: 0.0,
            reg_grad: 0.0,
        });
    }
    Ok(rows)
}

/// Dependence of task `task`'s reward on state variable `j`, in nats: the
/// mean, over the first `n_eval` transitions of `buffer`, of the log-ratio
/// between the full-context and `j`-masked densities of the observed reward.
/// Deterministic given the model and buffer; may be slightly negative when
/// the masked head happens to fit better. Vector assembly clamps at zero.
pub fn reward_cmi(
    model: &RewardModel,
    task: usize,
    j: usize,
    buffer: &ReplayBuffer,
    n_eval: usize,
) -> Result<f64> {
    let d_s = model.d_s();
    if task >= model.n_tasks() {
        return Err(Error::InvalidArgument(format!(
            "task {task} out of range for {} tasks",
            model.n_tasks()
        )));
    }
    if j >= d_s {
        return Err(Error::InvalidArgument(format!(
            "variable {j} out of range: reward dependence is tested against the {d_s} state variables only"
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
    if buffer.d_s() != d_s || buffer.d_a() != model.d_a() || buffer.n_tasks() != model.n_tasks() {
        return Err(Error::ShapeMismatch("buffer shapes do not match the model".into()));
    }
    let mask = InputMask::without_unit(d_s, j)?;
    let full = InputMask::full(d_s);
    let rewards = model.reward_range();

    let mut acc = KahanSum::new();
    for t_idx in 0..n_eval {
        let t = buffer.get(t_idx);
        let y = rewards.to_unit(task, t.r[task]);
        let (m_f, ls_f) = model.params(task, &t.s, &t.a, &full)?;
        let (m_m, ls_m) = model.params(task, &t.s, &t.a, &mask)?;
        acc.add(gauss_log_density(y, m_f, ls_f) - gauss_log_density(y, m_m, ls_m));
    }
    Ok(acc.value() / n_eval as f64)
}

/// Dependence of one task's reward on every state variable, parallel over
/// variables. Entries are clamped below at zero.
pub fn reward_cmi_vector(
    model: &RewardModel,
    task: usize,
    buffer: &ReplayBuffer,
    n_eval: usize,
) -> Result<Vec<f64>> {
    exec::map_indexed(model.d_s(), |j| reward_cmi(model, task, j, buffer, n_eval))
        .into_iter()
        .map(|r| r.map(|v| v.max(0.0)))
        .collect()
}

/// Indices whose dependence estimate meets `epsilon`; an entry exactly at the
/// threshold counts as a parent.
pub fn threshold_parents(cmi: &[f64], epsilon: f64) -> Result<Vec<usize>> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("threshold must be positive".into()));
    }
    Ok(cmi
        .iter()
        .enumerate()
        .filter_map(|(j, v)| (*v >= epsilon).then_some(j))
        .collect())
}

/// Estimated causal parents of task `task`'s reward: state variables whose
/// dependence estimate meets `epsilon`, in increasing index order.
pub fn reward_parents(
    model: &RewardModel,
    task: usize,
    buffer: &ReplayBuffer,
    n_eval: usize,
    epsilon: f64,
) -> Result<Vec<usize>> {
    threshold_parents(&reward_cmi_vector(model, task, buffer, n_eval)?, epsilon)
}

/// Writes per-task dependence vectors as CSV: one row per task labeled by its
/// index, one column per state variable labeled `s1..s_d`.
pub fn write_reward_cmi_csv(path: &Path, vectors: &[Vec<f64>]) -> Result<()> {
    let d_s = vectors.first().map(|v| v.len()).unwrap_or(0);
    if vectors.is_empty() || d_s == 0 || vectors.iter().any(|v| v.len() != d_s) {
        return Err(Error::ShapeMismatch("dependence vectors must be nonempty and rectangular".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "task")?;
    for i in 0..d_s {
        write!(w, ",s{}", i + 1)?;
    }
    writeln!(w)?;
    for (k, row) in vectors.iter().enumerate() {
        write!(w, "{k}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// One task's recovered parent set, as exported to JSON.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RewardParentsReport {
    pub task: usize,
    pub parents: Vec<usize>,
}

impl RewardParentsReport {
    /// Writes `{"task": k, "parents": [...]}`.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }
}
