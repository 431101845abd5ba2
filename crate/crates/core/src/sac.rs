//! Soft actor-critic task learner driven by a state-variable mask, plus the
//! training loop that couples it to the learned causal structure.
//!
//! The agent is deliberately minimal: a squashed-Gaussian actor, twin critics
//! with Polyak-averaged targets, a manual entropy-coefficient schedule, and a
//! policy-reset protocol that reinitializes the networks while keeping the
//! replay buffer. Every network consumes the state only through
//! [`crate::abstraction::apply_mask`], so the policy is bitwise invariant to
//! variables its abstraction drops.
//!
//! Episodes end by time limit, never by termination, so target values always
//! bootstrap through the final step of an episode.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::abstraction::{oracle_abstraction, AbstractionMask, Provenance};
use crate::cmi::{binarize, cmi_matrix, CmiConfig};
use crate::env::{Env, ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::implicit::DynModel;
use crate::nn::{AdamState, Mlp, MlpCheckpoint, MlpGrad};
use crate::reward::{reward_cmi_vector, threshold_parents, RewardConfig, RewardModel};
use crate::rng::SeedTree;

/// Clamp bounds on the actor's predicted log standard deviations.
pub const ACTOR_LOG_STD_MIN: f64 = -5.0;
pub const ACTOR_LOG_STD_MAX: f64 = 2.0;
/// Numerical guard inside the tanh change-of-variables correction.
pub const TANH_EPS: f64 = 1e-6;

/// Manual entropy-coefficient decay schedule.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EntropySchedule {
    pub alpha_start: f64,
    pub alpha_finish: f64,
    pub alpha_decay: f64,
    pub t_total: usize,
}

impl EntropySchedule {
    /// `alpha(t) = (start - finish) * exp(-decay * t / t_total) + finish`.
    pub fn alpha_at(&self, t: usize) -> f64 {
        let frac = t as f64 / self.t_total.max(1) as f64;
        (self.alpha_start - self.alpha_finish) * (-self.alpha_decay * frac).exp()
            + self.alpha_finish
    }
}

/// Hyperparameters of the actor-critic learner. Defaults are the desk-scale
/// variant; [`SacConfig::paper`] restores the published widths.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub alpha_start: f64,
    pub alpha_finish: f64,
    pub alpha_decay: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            gamma: 0.99,
            tau: 5e-3,
            batch_size: 256,
            learning_rate: 1e-4,
            grad_clip: 10.0,
            alpha_start: 0.9,
            alpha_finish: 0.1,
            alpha_decay: 0.666,
        }
    }
}

impl SacConfig {
    /// Published full-scale widths.
    pub fn paper() -> Self {
        SacConfig {
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            ..SacConfig::default()
        }
    }

    /// Small nets and batches for tests.
    pub fn desk() -> Self {
        SacConfig {
            actor_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            batch_size: 64,
            learning_rate: 3e-4,
            ..SacConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::InvalidArgument("bad optimization weights".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument("gamma and tau must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Losses reported by one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
}

struct CriticPair {
    net: Mlp,
    target: Mlp,
    adam: AdamState,
}

/// Twin-critic soft actor-critic agent for one task, acting through an
/// abstraction mask.
pub struct SacAgent {
    actor: Mlp,
    actor_adam: AdamState,
    critics: Vec<CriticPair>,
    mask: AbstractionMask,
    cfg: SacConfig,
    task: usize,
    d_s: usize,
    d_a: usize,
    seed: u64,
    n_resets: usize,
    updates_done: usize,
}

impl SacAgent {
    pub fn new(
        cfg: SacConfig,
        d_s: usize,
        d_a: usize,
        task: usize,
        mask: AbstractionMask,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if d_s == 0 || d_a == 0 {
            return Err(Error::InvalidArgument("state and action must be nonempty".into()));
        }
        if mask.keep.len() != d_s {
            return Err(Error::ShapeMismatch(format!(
                "mask covers {} variables, state has {d_s}",
                mask.keep.len()
            )));
        }
        let mut agent = SacAgent {
            actor: Mlp::new(&[1, 1], &mut crate::rng::seeded_rng(0))?,
            actor_adam: AdamState::new(0, cfg.learning_rate),
            critics: Vec::new(),
            mask,
            cfg,
            task,
            d_s,
            d_a,
            seed,
            n_resets: 0,
            updates_done: 0,
        };
        agent.build_networks()?;
        Ok(agent)
    }

    /// (Re)initializes actor, critics, and optimizer states from the stream
    /// position given by the current reset count.
    fn build_networks(&mut self) -> Result<()> {
        let tree = SeedTree::new(self.seed).child("sac-init");
        let mut actor_widths = vec![self.d_s];
        actor_widths.extend_from_slice(&self.cfg.actor_hidden);
        actor_widths.push(2 * self.d_a);
        let mut critic_widths = vec![self.d_s + self.d_a];
        critic_widths.extend_from_slice(&self.cfg.critic_hidden);
        critic_widths.push(1);

        let n = self.n_resets as u64;
        self.actor = Mlp::new(&actor_widths, &mut tree.item_rng("actor", n))?;
        self.actor_adam = AdamState::new(self.actor.n_params(), self.cfg.learning_rate);
        self.critics = (0..2)
            .map(|i| {
                let net =
                    Mlp::new(&critic_widths, &mut tree.item_rng(&format!("critic-{i}"), n))?;
                let target = net.clone();
                let adam = AdamState::new(net.n_params(), self.cfg.learning_rate);
                Ok(CriticPair { net, target, adam })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Reinitializes all networks from the next seed-stream position; the
    /// caller's replay buffer and schedules are untouched.
    pub fn reset_policy(&mut self) -> Result<()> {
        self.n_resets += 1;
        self.build_networks()
    }

    /// Installs a new abstraction mask (does not reset networks by itself).
    pub fn set_mask(&mut self, mask: AbstractionMask) -> Result<()> {
        if mask.keep.len() != self.d_s {
            return Err(Error::ShapeMismatch(format!(
                "mask covers {} variables, state has {}",
                mask.keep.len(),
                self.d_s
            )));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn mask(&self) -> &AbstractionMask {
        &self.mask
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn n_resets(&self) -> usize {
        self.n_resets
    }

    pub fn updates_done(&self) -> usize {
        self.updates_done
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    fn masked(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.d_s {
            return Err(Error::ShapeMismatch(format!(
                "state length {} does not match {}",
                s.len(),
                self.d_s
            )));
        }
        Ok(s.iter().zip(&self.mask.keep).map(|(v, &k)| if k { *v } else { 0.0 }).collect())
    }

    /// Actor outputs for one state: per-dimension mean and clamped log-std of
    /// the pre-squash Gaussian.
    pub fn policy_params(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.actor.forward(&self.masked(s)?)?;
        let (mu, ls) = out.split_at(self.d_a);
        Ok((
            mu.to_vec(),
            ls.iter().map(|v| v.clamp(ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX)).collect(),
        ))
    }

    /// Samples a squashed action.
    pub fn act(&self, s: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let (mu, ls) = self.policy_params(s)?;
        Ok(mu
            .iter()
            .zip(&ls)
            .map(|(m, l)| {
                let eps: f64 = rng.sample(StandardNormal);
                (m + l.exp() * eps).tanh()
            })
            .collect())
    }

    /// The deterministic (mean) action.
    pub fn act_greedy(&self, s: &[f64]) -> Result<Vec<f64>> {
        let (mu, _) = self.policy_params(s)?;
        Ok(mu.into_iter().map(f64::tanh).collect())
    }

    /// Smaller of the two critics' values for `(s, a)`.
    pub fn critic_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        if a.len() != self.d_a {
            return Err(Error::ShapeMismatch("action length mismatch".into()));
        }
        let x: Vec<f64> = self.masked(s)?.into_iter().chain(a.iter().cloned()).collect();
        let mut best = f64::INFINITY;
        for c in &self.critics {
            best = best.min(c.net.forward(&x)?[0]);
        }
        Ok(best)
    }

    /// Bootstrapped one-step targets `r + gamma * (min target Q(s', a') -
    /// alpha * log pi(a'|s'))` with `a'` sampled from the current actor.
    fn bellman_targets(
        &self,
        s2_masked: &Array2<f64>,
        r: &[f64],
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let b = r.len();
        if self.cfg.gamma == 0.0 {
            // Discount off: no bootstrap term at all, including its entropy
            // part.
            return r.to_vec();
        }
        let out = self.actor.forward_batch(s2_masked);
        let mut a2 = Array2::zeros((b, self.d_a));
        let mut logpi = vec![0.0; b];
        for bi in 0..b {
            for k in 0..self.d_a {
                let mu = out[(bi, k)];
                let ls = out[(bi, self.d_a + k)].clamp(ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX);
                let eps: f64 = rng.sample(StandardNormal);
                let u = mu + ls.exp() * eps;
                let a = u.tanh();
                a2[(bi, k)] = a;
                logpi[bi] += -0.5 * (2.0 * std::f64::consts::PI).ln()
                    - ls
                    - 0.5 * eps * eps
                    - (1.0 - a * a + TANH_EPS).ln();
            }
        }
        let x2 = ndarray::concatenate(ndarray::Axis(1), &[s2_masked.view(), a2.view()]).unwrap();
        let q1 = self.critics[0].target.forward_batch(&x2);
        let q2 = self.critics[1].target.forward_batch(&x2);
        (0..b)
            .map(|bi| {
                let qmin = q1[(bi, 0)].min(q2[(bi, 0)]);
                r[bi] + self.cfg.gamma * (qmin - alpha * logpi[bi])
            })
            .collect()
    }

    /// Polyak-averages every target parameter toward its critic.
    fn soft_update_targets(&mut self) {
        let tau = self.cfg.tau;
        for pair in self.critics.iter_mut() {
            let src: Vec<f64> = pair
                .net
                .layers()
                .iter()
                .flat_map(|l| l.w.iter().chain(l.b.iter()).cloned().collect::<Vec<_>>())
                .collect();
            let mut offset = 0;
            for slice in pair.target.param_slices_mut() {
                for v in slice.iter_mut() {
                    *v = (1.0 - tau) * *v + tau * src[offset];
                    offset += 1;
                }
            }
        }
    }

    /// One gradient step on both critics and the actor from a uniformly
    /// sampled batch, followed by the target soft update.
    pub fn update(
        &mut self,
        buffer: &ReplayBuffer,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<SacLosses> {
        if buffer.d_s() != self.d_s || buffer.d_a() != self.d_a {
            return Err(Error::ShapeMismatch("buffer shapes do not match the agent".into()));
        }
        if self.task >= buffer.n_tasks() {
            return Err(Error::InvalidArgument(format!(
                "task {} out of range for {} tasks",
                self.task,
                buffer.n_tasks()
            )));
        }
        if buffer.is_empty() {
            return Err(Error::InvalidArgument("replay buffer is empty".into()));
        }
        let b = self.cfg.batch_size;
        let idx = buffer.sample_indices_with(rng, b);
        let mut s = Array2::zeros((b, self.d_s));
        let mut s2 = Array2::zeros((b, self.d_s));
        let mut a = Array2::zeros((b, self.d_a));
        let mut r = vec![0.0; b];
        for (bi, &t_idx) in idx.iter().enumerate() {
            let t = buffer.get(t_idx);
            for (i, (&v, &keep)) in t.s.iter().zip(&self.mask.keep).enumerate() {
                s[(bi, i)] = if keep { v } else { 0.0 };
            }
            for (i, (&v, &keep)) in t.s_next.iter().zip(&self.mask.keep).enumerate() {
                s2[(bi, i)] = if keep { v } else { 0.0 };
            }
            for (k, &v) in t.a.iter().enumerate() {
                a[(bi, k)] = v;
            }
            r[bi] = t.r[self.task];
        }

        let y = self.bellman_targets(&s2, &r, alpha, rng);

        // Critic regression toward the frozen targets.
        let x = ndarray::concatenate(ndarray::Axis(1), &[s.view(), a.view()]).unwrap();
        let inv_b = 1.0 / b as f64;
        let mut critic_loss = 0.0;
        for pair in self.critics.iter_mut() {
            let cache = pair.net.forward_batch_cached(&x);
            let q = cache.acts.last().unwrap();
            let mut cot = Array2::zeros((b, 1));
            for bi in 0..b {
                let diff = q[(bi, 0)] - y[bi];
                critic_loss += 0.5 * diff * diff * inv_b;
                cot[(bi, 0)] = diff * inv_b;
            }
            let mut grad = MlpGrad::zeros_like(&pair.net);
            pair.net.backward_batch(&cache, &cot, &mut grad);
            grad.clip_global_norm(self.cfg.grad_clip);
            let g = grad.param_slices();
            let mut params = pair.net.param_slices_mut();
            pair.adam.step(&mut params, &g)?;
        }
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite("critic loss diverged".into()));
        }

        // Reparameterized actor step against the updated critics.
        let eps: Vec<f64> = (0..b * self.d_a).map(|_| rng.sample(StandardNormal)).collect();
        let (actor_loss, grad) = self.actor_objective(&s, &eps, alpha)?;
        let mut grad = grad;
        grad.clip_global_norm(self.cfg.grad_clip);
        let g = grad.param_slices();
        let mut params = self.actor.param_slices_mut();
        self.actor_adam.step(&mut params, &g)?;
        drop(params);

        self.soft_update_targets();
        self.updates_done += 1;
        Ok(SacLosses { critic: critic_loss, actor: actor_loss, alpha })
    }

    /// Actor objective `mean(alpha * log pi - min Q)` under fixed
    /// reparameterization noise `eps` (row-major `b x d_a`), with its
    /// gradient. Critic parameters receive no update from this pass.
    fn actor_objective(
        &self,
        s_masked: &Array2<f64>,
        eps: &[f64],
        alpha: f64,
    ) -> Result<(f64, MlpGrad)> {
        let b = s_masked.nrows();
        if eps.len() != b * self.d_a {
            return Err(Error::ShapeMismatch("noise shape mismatch".into()));
        }
        let inv_b = 1.0 / b as f64;
        let cache = self.actor.forward_batch_cached(s_masked);
        let out = cache.acts.last().unwrap();

        let mut actions = Array2::zeros((b, self.d_a));
        let mut logpi = vec![0.0; b];
        for bi in 0..b {
            for k in 0..self.d_a {
                let mu = out[(bi, k)];
                let raw_ls = out[(bi, self.d_a + k)];
                let ls = raw_ls.clamp(ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX);
                let e = eps[bi * self.d_a + k];
                let aa = (mu + ls.exp() * e).tanh();
                actions[(bi, k)] = aa;
                logpi[bi] += -0.5 * (2.0 * std::f64::consts::PI).ln()
                    - ls
                    - 0.5 * e * e
                    - (1.0 - aa * aa + TANH_EPS).ln();
            }
        }

        // Value of the smaller critic at the sampled actions, and the
        // gradient of `-mean(min Q)` with respect to those actions.
        let xa =
            ndarray::concatenate(ndarray::Axis(1), &[s_masked.view(), actions.view()]).unwrap();
        let caches: Vec<_> =
            self.critics.iter().map(|c| c.net.forward_batch_cached(&xa)).collect();
        let mut q_min = vec![0.0; b];
        let mut which = vec![0usize; b];
        for bi in 0..b {
            let q0 = caches[0].acts.last().unwrap()[(bi, 0)];
            let q1 = caches[1].acts.last().unwrap()[(bi, 0)];
            if q0 <= q1 {
                q_min[bi] = q0;
                which[bi] = 0;
            } else {
                q_min[bi] = q1;
                which[bi] = 1;
            }
        }
        let mut g_q: Array2<f64> = Array2::zeros((b, self.d_a));
        for (ci, (pair, cache)) in self.critics.iter().zip(&caches).enumerate() {
            let mut cot = Array2::zeros((b, 1));
            let mut any = false;
            for bi in 0..b {
                if which[bi] == ci {
                    cot[(bi, 0)] = -inv_b;
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let mut scratch = MlpGrad::zeros_like(&pair.net);
            let in_cot = pair.net.backward_batch(cache, &cot, &mut scratch);
            for bi in 0..b {
                for k in 0..self.d_a {
                    g_q[(bi, k)] += in_cot[(bi, self.d_s + k)];
                }
            }
        }

        let mut loss = 0.0;
        for bi in 0..b {
            loss += (alpha * logpi[bi] - q_min[bi]) * inv_b;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("actor loss diverged".into()));
        }

        // Cotangent on the actor outputs.
        let mut cot = Array2::zeros((b, 2 * self.d_a));
        for bi in 0..b {
            for k in 0..self.d_a {
                let raw_ls = out[(bi, self.d_a + k)];
                let ls = raw_ls.clamp(ACTOR_LOG_STD_MIN, ACTOR_LOG_STD_MAX);
                let e = eps[bi * self.d_a + k];
                let aa = actions[(bi, k)];
                let c = 1.0 - aa * aa;
                let cot_mu =
                    alpha * inv_b * 2.0 * aa * c / (c + TANH_EPS) + g_q[(bi, k)] * c;
                cot[(bi, k)] = cot_mu;
                // The clamp gates every log-std gradient path outside its
                // window.
                if (ACTOR_LOG_STD_MIN..=ACTOR_LOG_STD_MAX).contains(&raw_ls) {
                    cot[(bi, self.d_a + k)] = -alpha * inv_b + cot_mu * ls.exp() * e;
                }
            }
        }
        let mut grad = MlpGrad::zeros_like(&self.actor);
        self.actor.backward_batch(&cache, &cot, &mut grad);
        Ok((loss, grad))
    }

    /// Writes the actor, critics, targets, optimizer states, and a manifest
    /// under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(dir.join("actor.json"))?),
            &self.actor.to_checkpoint(),
        )?;
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(dir.join("actor_adam.json"))?),
            &self.actor_adam,
        )?;
        for (i, pair) in self.critics.iter().enumerate() {
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join(format!("critic_{i}.json")))?),
                &pair.net.to_checkpoint(),
            )?;
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join(format!("target_{i}.json")))?),
                &pair.target.to_checkpoint(),
            )?;
            serde_json::to_writer_pretty(
                BufWriter::new(File::create(dir.join(format!("critic_adam_{i}.json")))?),
                &pair.adam,
            )?;
        }
        let manifest = SacManifest {
            version: 1,
            kind: "sac".into(),
            d_s: self.d_s,
            d_a: self.d_a,
            task: self.task,
            seed: self.seed,
            n_resets: self.n_resets,
            updates_done: self.updates_done,
            cfg: self.cfg.clone(),
            mask: self.mask.clone(),
        };
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(dir.join("sac_agent.json"))?),
            &manifest,
        )?;
        Ok(())
    }

    /// Loads an agent saved by [`SacAgent::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SacManifest =
            serde_json::from_reader(BufReader::new(File::open(dir.join("sac_agent.json"))?))?;
        if manifest.version != 1 || manifest.kind != "sac" {
            return Err(Error::Checkpoint("not a task-learner checkpoint".into()));
        }
        manifest.cfg.validate()?;
        let read_net = |name: &str| -> Result<Mlp> {
            let chk: MlpCheckpoint =
                serde_json::from_reader(BufReader::new(File::open(dir.join(name))?))?;
            Mlp::from_checkpoint(&chk)
        };
        let actor = read_net("actor.json")?;
        if actor.input_dim() != manifest.d_s || actor.output_dim() != 2 * manifest.d_a {
            return Err(Error::Checkpoint("actor shape disagrees with manifest".into()));
        }
        let actor_adam: AdamState =
            serde_json::from_reader(BufReader::new(File::open(dir.join("actor_adam.json"))?))?;
        let mut critics = Vec::new();
        for i in 0..2 {
            let net = read_net(&format!("critic_{i}.json"))?;
            if net.input_dim() != manifest.d_s + manifest.d_a || net.output_dim() != 1 {
                return Err(Error::Checkpoint("critic shape disagrees with manifest".into()));
            }
            let target = read_net(&format!("target_{i}.json"))?;
            let adam: AdamState = serde_json::from_reader(BufReader::new(File::open(
                dir.join(format!("critic_adam_{i}.json")),
            )?))?;
            critics.push(CriticPair { net, target, adam });
        }
        Ok(SacAgent {
            actor,
            actor_adam,
            critics,
            mask: manifest.mask,
            cfg: manifest.cfg,
            task: manifest.task,
            d_s: manifest.d_s,
            d_a: manifest.d_a,
            seed: manifest.seed,
            n_resets: manifest.n_resets,
            updates_done: manifest.updates_done,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SacManifest {
    version: u32,
    kind: String,
    d_s: usize,
    d_a: usize,
    task: usize,
    seed: u64,
    n_resets: usize,
    updates_done: usize,
    cfg: SacConfig,
    mask: AbstractionMask,
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// What happened at an environment step, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Collect,
    ModelUpdate,
    AbstractionEval,
    PolicyReset,
    PolicyUpdate,
}

/// One entry of the run's event log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    pub kind: EventKind,
}

/// One row of the episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub task: usize,
    pub ret: f64,
    pub mask_size: usize,
    pub n_resets: usize,
    pub alpha: f64,
}

/// Writes the episode log as CSV.
pub fn write_training_log_csv(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "episode,task,return,mask_size,n_resets,alpha")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.episode, r.task, r.ret, r.mask_size, r.n_resets, r.alpha
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Configuration of one task-learning run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CbmRunConfig {
    /// Which task's reward the agent maximizes.
    pub task: usize,
    pub total_episodes: usize,
    /// Environment steps between abstraction evaluations.
    pub eval_cadence: usize,
    /// Where the agent's mask comes from: `full` ignores structure, `oracle`
    /// uses the ground-truth closure, `bisimulation` re-derives the mask from
    /// learned dependence estimates at every evaluation, `cdl` derives the
    /// controllability mask once at the first evaluation and keeps it.
    pub provenance: Provenance,
    pub sac: SacConfig,
    pub reward_cfg: RewardConfig,
    /// Reward-model gradient steps before each abstraction evaluation.
    pub reward_steps_per_eval: usize,
    /// Dynamics-model gradient steps before each abstraction evaluation
    /// (0 keeps a pretrained model frozen).
    pub dyn_steps_per_eval: usize,
    /// Dependence-estimation settings for the dynamics graph.
    pub cmi: CmiConfig,
    /// Edge / parent threshold in nats.
    pub epsilon: f64,
    /// Uniform-random warmup steps before the policy starts acting and
    /// updating.
    pub warmup_steps: usize,
    /// Offline updates from the preserved buffer right after a policy reset.
    pub replay_train_steps: usize,
    pub seed: u64,
}

impl Default for CbmRunConfig {
    fn default() -> Self {
        CbmRunConfig {
            task: 0,
            total_episodes: 100,
            eval_cadence: 2000,
            provenance: Provenance::Full,
            sac: SacConfig::default(),
            reward_cfg: RewardConfig::default(),
            reward_steps_per_eval: 2000,
            dyn_steps_per_eval: 0,
            cmi: CmiConfig { n_eval_transitions: 500, n_negatives: 64, seed: 0 },
            epsilon: crate::cmi::DEFAULT_EDGE_THRESHOLD,
            warmup_steps: 256,
            replay_train_steps: 1000,
            seed: 0,
        }
    }
}

/// Everything a run leaves behind.
pub struct CbmRunResult {
    pub episodes: Vec<EpisodeRow>,
    /// `(global_step, mask)` at every point the active mask changed,
    /// including the initial one at step 0.
    pub mask_history: Vec<(usize, AbstractionMask)>,
    pub events: Vec<Event>,
    pub warnings: Vec<String>,
    pub agent: SacAgent,
    pub buffer: ReplayBuffer,
    /// The dynamics model handed in, after any online updates.
    pub dyn_model: Option<DynModel>,
    pub reward_model: Option<RewardModel>,
}

/// A buffer holding the most recent `n` transitions, for dependence
/// evaluation.
fn recent_eval_buffer(buffer: &ReplayBuffer, n: usize) -> Result<ReplayBuffer> {
    let n = n.min(buffer.len());
    let mut out = ReplayBuffer::new(
        buffer.d_s(),
        buffer.d_a(),
        buffer.n_tasks(),
        buffer.horizon(),
        n.max(1),
        0,
    );
    for i in buffer.len() - n..buffer.len() {
        out.push(buffer.get(i).clone())?;
    }
    Ok(out)
}

/// Runs one task-learning loop: collect with the policy, refresh the models,
/// re-derive the abstraction at the configured cadence (resetting the policy
/// when it changes), and update the agent each step.
pub fn run_cbm(
    env: &Env,
    mut dyn_model: Option<DynModel>,
    cfg: &CbmRunConfig,
) -> Result<CbmRunResult> {
    cfg.sac.validate()?;
    if cfg.task >= env.n_tasks() {
        return Err(Error::InvalidArgument(format!(
            "task {} out of range for {} tasks",
            cfg.task,
            env.n_tasks()
        )));
    }
    if cfg.total_episodes == 0 || cfg.eval_cadence == 0 {
        return Err(Error::InvalidArgument("episodes and cadence must be positive".into()));
    }
    let d_s = env.d_s();
    let learned_graph = matches!(cfg.provenance, Provenance::Bisimulation | Provenance::Cdl);
    if learned_graph && dyn_model.is_none() {
        return Err(Error::InvalidArgument(
            "learned-structure provenance needs a dynamics model".into(),
        ));
    }

    let total_steps = cfg.total_episodes * env.horizon();
    let schedule = EntropySchedule {
        alpha_start: cfg.sac.alpha_start,
        alpha_finish: cfg.sac.alpha_finish,
        alpha_decay: cfg.sac.alpha_decay,
        t_total: total_steps,
    };

    let initial_mask = match cfg.provenance {
        Provenance::Oracle => oracle_abstraction(&env.spec().true_graph, cfg.task)?,
        // Learned provenances start from the full mask until the first
        // evaluation.
        _ => AbstractionMask::full(d_s).with_task(cfg.task),
    };

    let tree = SeedTree::new(cfg.seed).child("task-run");
    let mut agent =
        SacAgent::new(cfg.sac.clone(), d_s, env.d_a(), cfg.task, initial_mask.clone(), cfg.seed)?;
    let mut buffer =
        ReplayBuffer::new(d_s, env.d_a(), env.n_tasks(), env.horizon(), total_steps.max(1), 0);
    let mut reward_model: Option<RewardModel> = None;

    let mut episodes = Vec::with_capacity(cfg.total_episodes);
    let mut mask_history = vec![(0usize, initial_mask)];
    let mut events = Vec::new();
    let mut warnings = Vec::new();
    let mut global_step = 0usize;
    let mut update_rng = tree.rng("sac-updates");

    for episode in 0..cfg.total_episodes {
        let mut env_rng = tree.item_rng("env", episode as u64);
        let mut s = env.reset(&mut env_rng);
        let mut ret = 0.0;
        let mut alpha = schedule.alpha_at(global_step);

        for t in 0..env.horizon() {
            // --- Collect -------------------------------------------------
            let a = if global_step < cfg.warmup_steps {
                env.sample_uniform_action(&mut env_rng)
            } else {
                agent.act(&s, &mut env_rng)?
            };
            let (s_next, rewards) = env.step(&s, &a, &mut env_rng)?;
            ret += rewards[cfg.task];
            buffer.push(Transition {
                s: s.clone(),
                a,
                r: rewards,
                s_next: s_next.clone(),
                t_in_episode: t as u32,
            })?;
            s = s_next;
            global_step += 1;
            events.push(Event { step: global_step, kind: EventKind::Collect });
            alpha = schedule.alpha_at(global_step);

            // --- Model refresh + abstraction at the cadence ---------------
            if learned_graph && global_step % cfg.eval_cadence == 0 {
                if let Some(dm) = dyn_model.as_mut() {
                    if cfg.dyn_steps_per_eval > 0 {
                        dm.train(
                            &buffer,
                            cfg.dyn_steps_per_eval,
                            crate::implicit::MaskSchedule::FullPlusAllUnits,
                        )?;
                    }
                }
                let needs_reward_model = cfg.provenance == Provenance::Bisimulation;
                if needs_reward_model {
                    let rm = match reward_model.as_mut() {
                        Some(rm) => rm,
                        None => {
                            reward_model = Some(RewardModel::from_buffer(
                                cfg.reward_cfg.clone(),
                                &buffer,
                                tree.stream_seed("reward-model"),
                            )?);
                            reward_model.as_mut().unwrap()
                        }
                    };
                    rm.train(&buffer, cfg.reward_steps_per_eval)?;
                }
                events.push(Event { step: global_step, kind: EventKind::ModelUpdate });

                let derive_now = match cfg.provenance {
                    Provenance::Bisimulation => true,
                    // The controllability mask is task-independent and fixed:
                    // derive it once, at the first evaluation.
                    Provenance::Cdl => mask_history.len() == 1,
                    _ => false,
                };
                if derive_now {
                    let eval =
                        recent_eval_buffer(&buffer, cfg.cmi.n_eval_transitions.max(1))?;
                    let cmi_cfg = CmiConfig {
                        n_eval_transitions: cfg.cmi.n_eval_transitions.min(eval.len()),
                        n_negatives: cfg.cmi.n_negatives,
                        seed: cfg.cmi.seed.wrapping_add(global_step as u64),
                    };
                    let dm = dyn_model.as_ref().unwrap();
                    let matrix = cmi_matrix(dm, &eval, &cmi_cfg)?;
                    let graph = binarize(&matrix, cfg.epsilon)?;
                    let new_mask = match cfg.provenance {
                        Provenance::Cdl => {
                            crate::abstraction::cdl_abstraction(&graph)?.with_task(cfg.task)
                        }
                        _ => {
                            let cmi_vec = reward_cmi_vector(
                                reward_model.as_ref().unwrap(),
                                cfg.task,
                                &eval,
                                eval.len(),
                            )?;
                            let parents = threshold_parents(&cmi_vec, cfg.epsilon)?;
                            if parents.is_empty() {
                                warnings.push(format!(
                                    "step {global_step}: no reward parents detected yet; \
                                     keeping the full mask"
                                ));
                                AbstractionMask::full(d_s).with_task(cfg.task)
                            } else {
                                crate::abstraction::bisim_abstraction(&graph, &parents)
                                    .map(|m| m.with_task(cfg.task))?
                            }
                        }
                    };
                    events.push(Event { step: global_step, kind: EventKind::AbstractionEval });
                    if new_mask.keep != agent.mask().keep {
                        agent.set_mask(new_mask.clone())?;
                        agent.reset_policy()?;
                        mask_history.push((global_step, new_mask));
                        events.push(Event { step: global_step, kind: EventKind::PolicyReset });
                        for _ in 0..cfg.replay_train_steps {
                            agent.update(&buffer, alpha, &mut update_rng)?;
                        }
                    }
                }
            }

            // --- Policy update --------------------------------------------
            if global_step > cfg.warmup_steps && buffer.len() >= cfg.sac.batch_size {
                agent.update(&buffer, alpha, &mut update_rng)?;
                events.push(Event { step: global_step, kind: EventKind::PolicyUpdate });
            }
        }

        episodes.push(EpisodeRow {
            episode,
            task: cfg.task,
            ret,
            mask_size: agent.mask().n_kept(),
            n_resets: agent.n_resets(),
            alpha,
        });
    }

    Ok(CbmRunResult {
        episodes,
        mask_history,
        events,
        warnings,
        agent,
        buffer,
        dyn_model,
        reward_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{
        copy_chain, CopyChainCfg, DistanceTarget, DistanceTerm, RewardFnKind, RewardParams,
        RewardSpec,
    };
    use crate::rng::seeded_rng;
    use proptest::prelude::*;

    fn toy_env(n_real: usize, seed: u64) -> Env {
        let mut spec = copy_chain(&CopyChainCfg {
            n_real,
            d_a: 1,
            noise_std: 0.0,
            n_controllable: 0,
            n_uncontrollable: 0,
            horizon: 10,
            seed,
        });
        spec.push_task(RewardSpec {
            task_id: 0,
            parents: vec![0],
            reward_fn_kind: RewardFnKind::DistanceToGoal,
            params: RewardParams::Distance(vec![DistanceTerm {
                weight: 1.0,
                var: 0,
                target: DistanceTarget::Const(0.0),
                scale: 2.0,
            }]),
            noise_std: 0.0,
        })
        .unwrap();
        Env::new(spec).unwrap()
    }

    fn toy_buffer(env: &Env, n: usize, seed: u64) -> ReplayBuffer {
        crate::env::collect_dataset(env, &mut crate::env::CollectPolicy::UniformRandom, n, seed)
            .unwrap()
    }

    fn toy_agent(env: &Env, cfg: SacConfig, seed: u64) -> SacAgent {
        SacAgent::new(cfg, env.d_s(), env.d_a(), 0, AbstractionMask::full(env.d_s()), seed)
            .unwrap()
    }

    fn actor_fingerprint(agent: &SacAgent) -> String {
        serde_json::to_string(&agent.actor.to_checkpoint()).unwrap()
    }

    fn critic_fingerprints(agent: &SacAgent) -> Vec<(String, String)> {
        agent
            .critics
            .iter()
            .map(|c| {
                (
                    serde_json::to_string(&c.net.to_checkpoint()).unwrap(),
                    serde_json::to_string(&c.target.to_checkpoint()).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn schedule_matches_the_closed_form() {
        let s = EntropySchedule {
            alpha_start: 0.9,
            alpha_finish: 0.1,
            alpha_decay: 1.0,
            t_total: 1000,
        };
        assert_eq!(s.alpha_at(0), 0.9);
        let at_end = s.alpha_at(1000);
        assert!(
            (at_end - 0.39430355293715387).abs() < 1e-12,
            "alpha(t_total) = {at_end}"
        );
        let fast = EntropySchedule { alpha_decay: 1e6, ..s };
        assert!((fast.alpha_at(1000) - 0.1).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn schedule_stays_within_its_endpoints(
            start in 0.05f64..1.0,
            finish in 0.05f64..1.0,
            decay in 0.1f64..10.0,
            t in 0usize..=2000,
        ) {
            let s = EntropySchedule {
                alpha_start: start,
                alpha_finish: finish,
                alpha_decay: decay,
                t_total: 2000,
            };
            let a = s.alpha_at(t);
            prop_assert!(a >= start.min(finish) - 1e-12);
            prop_assert!(a <= start.max(finish) + 1e-12);
        }
    }

    #[test]
    fn actions_are_squashed_into_the_unit_box() {
        let env = toy_env(2, 0);
        let agent = toy_agent(&env, SacConfig::desk(), 3);
        let mut rng = seeded_rng(1);
        for _ in 0..50 {
            let s = env.reset(&mut rng);
            let a = agent.act(&s, &mut rng).unwrap();
            assert!(a.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn discount_off_targets_reduce_to_the_reward() {
        let env = toy_env(2, 0);
        let cfg = SacConfig { gamma: 0.0, ..SacConfig::desk() };
        let agent = toy_agent(&env, cfg, 5);
        let s2 = Array2::zeros((4, 2));
        let r = vec![0.3, -1.0, 0.0, 2.5];
        let y = agent.bellman_targets(&s2, &r, 0.7, &mut seeded_rng(2));
        assert_eq!(y, r);
    }

    #[test]
    fn full_rate_soft_update_copies_the_critics() {
        let env = toy_env(2, 0);
        let cfg = SacConfig { tau: 1.0, ..SacConfig::desk() };
        let mut agent = toy_agent(&env, cfg, 7);
        let buffer = toy_buffer(&env, 300, 1);
        agent.update(&buffer, 0.5, &mut seeded_rng(3)).unwrap();
        for (net, target) in critic_fingerprints(&agent) {
            assert_eq!(net, target);
        }
    }

    #[test]
    fn targets_are_exact_exponential_averages() {
        let env = toy_env(2, 0);
        let cfg = SacConfig { tau: 0.3, ..SacConfig::desk() };
        let mut agent = toy_agent(&env, cfg, 9);
        let buffer = toy_buffer(&env, 300, 1);
        let before: Vec<Vec<f64>> = agent
            .critics
            .iter()
            .map(|c| c.target.layers().iter().flat_map(|l| l.w.iter().chain(l.b.iter()).cloned().collect::<Vec<_>>()).collect())
            .collect();
        agent.update(&buffer, 0.5, &mut seeded_rng(4)).unwrap();
        for (ci, pair) in agent.critics.iter().enumerate() {
            let critic: Vec<f64> = pair
                .net
                .layers()
                .iter()
                .flat_map(|l| l.w.iter().chain(l.b.iter()).cloned().collect::<Vec<_>>())
                .collect();
            let target: Vec<f64> = pair
                .target
                .layers()
                .iter()
                .flat_map(|l| l.w.iter().chain(l.b.iter()).cloned().collect::<Vec<_>>())
                .collect();
            for ((t_new, t_old), c) in target.iter().zip(&before[ci]).zip(&critic) {
                let want = 0.7 * t_old + 0.3 * c;
                assert!(
                    (t_new - want).abs() < 1e-15,
                    "target drifted from the exponential average: {t_new} vs {want}"
                );
            }
        }
    }

    #[test]
    fn policy_is_bitwise_invariant_to_masked_out_variables() {
        let env = toy_env(3, 0);
        let mask = AbstractionMask {
            keep: vec![true, false, true],
            task: Some(0),
            provenance: Provenance::Bisimulation,
        };
        let mut agent =
            SacAgent::new(SacConfig::desk(), 3, 1, 0, mask, 11).unwrap();
        let buffer = toy_buffer(&env, 300, 1);
        for _ in 0..5 {
            agent.update(&buffer, 0.5, &mut seeded_rng(5)).unwrap();
        }
        let (mu1, ls1) = agent.policy_params(&[0.3, -0.8, 0.2]).unwrap();
        let (mu2, ls2) = agent.policy_params(&[0.3, 9.9, 0.2]).unwrap();
        assert_eq!(mu1[0].to_bits(), mu2[0].to_bits());
        assert_eq!(ls1[0].to_bits(), ls2[0].to_bits());
        let q1 = agent.critic_value(&[0.3, -0.8, 0.2], &[0.4]).unwrap();
        let q2 = agent.critic_value(&[0.3, 9.9, 0.2], &[0.4]).unwrap();
        assert_eq!(q1.to_bits(), q2.to_bits());
        // A kept variable still matters.
        let (mu3, _) = agent.policy_params(&[0.9, -0.8, 0.2]).unwrap();
        assert_ne!(mu1[0].to_bits(), mu3[0].to_bits());
    }

    #[test]
    fn reset_reinitializes_deterministically_and_keeps_the_buffer() {
        let env = toy_env(2, 0);
        let buffer = toy_buffer(&env, 400, 1);
        let mut a = toy_agent(&env, SacConfig::desk(), 13);
        let mut b = toy_agent(&env, SacConfig::desk(), 13);
        for _ in 0..3 {
            a.update(&buffer, 0.5, &mut seeded_rng(6)).unwrap();
        }
        let len_before = buffer.len();
        a.reset_policy().unwrap();
        b.reset_policy().unwrap();
        assert_eq!(buffer.len(), len_before);
        assert_eq!(actor_fingerprint(&a), actor_fingerprint(&b));
        assert_eq!(critic_fingerprints(&a), critic_fingerprints(&b));
        assert_ne!(a.updates_done(), b.updates_done(), "training history is preserved");
    }

    #[test]
    fn replay_training_after_a_reset_reduces_critic_loss() {
        let env = toy_env(2, 0);
        let buffer = toy_buffer(&env, 600, 2);
        let mut agent = toy_agent(&env, SacConfig::desk(), 17);
        for _ in 0..50 {
            agent.update(&buffer, 0.5, &mut seeded_rng(7)).unwrap();
        }
        agent.reset_policy().unwrap();
        let mut rng = seeded_rng(8);
        let first = agent.update(&buffer, 0.5, &mut rng).unwrap().critic;
        let mut last = first;
        for _ in 0..200 {
            last = agent.update(&buffer, 0.5, &mut rng).unwrap().critic;
        }
        assert!(
            last < first,
            "offline replay training did not reduce critic loss: {first} -> {last}"
        );
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let env = toy_env(2, 0);
        let mut agent = toy_agent(
            &env,
            SacConfig { actor_hidden: vec![8], critic_hidden: vec![8], ..SacConfig::desk() },
            19,
        );
        let buffer = toy_buffer(&env, 200, 3);
        // A few updates so the critics are not at their random init.
        for _ in 0..5 {
            agent.update(&buffer, 0.5, &mut seeded_rng(9)).unwrap();
        }
        let b = 4;
        let mut s = Array2::zeros((b, 2));
        let mut rng = seeded_rng(10);
        for bi in 0..b {
            for i in 0..2 {
                s[(bi, i)] = rng.gen_range(-1.0..1.0);
            }
        }
        let eps: Vec<f64> = (0..b).map(|_| rng.sample(StandardNormal)).collect();
        let alpha = 0.4;
        let (_, grad) = agent.actor_objective(&s, &eps, alpha).unwrap();
        let analytic = grad.param_slices().iter().flat_map(|g| g.to_vec()).collect::<Vec<_>>();

        let h = 1e-5;
        let mut checked = 0;
        let mut flat_index = 0;
        let n_slices = agent.actor.param_slices_mut().len();
        for si in 0..n_slices {
            let len = agent.actor.param_slices_mut()[si].len();
            for pi in 0..len {
                let orig = agent.actor.param_slices_mut()[si][pi];
                agent.actor.param_slices_mut()[si][pi] = orig + h;
                let (up, _) = agent.actor_objective(&s, &eps, alpha).unwrap();
                agent.actor.param_slices_mut()[si][pi] = orig - h;
                let (down, _) = agent.actor_objective(&s, &eps, alpha).unwrap();
                agent.actor.param_slices_mut()[si][pi] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic[flat_index + pi];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "slice {si} param {pi}: finite difference {fd} vs analytic {an}"
                );
                checked += 1;
            }
            flat_index += len;
        }
        assert!(checked > 20, "too few parameters checked: {checked}");
    }

    #[test]
    fn returns_improve_on_a_one_variable_goal_task() {
        // Variable 0 follows the action and the reward peaks at 0: the agent
        // must learn to steer to the goal. Improvement over the untrained
        // baseline is required in at least 2 of 3 seeds.
        let mut improved = 0;
        for seed in 0..3u64 {
            let env = toy_env(1, seed);
            let cfg = CbmRunConfig {
                total_episodes: 120,
                provenance: Provenance::Full,
                sac: SacConfig { alpha_decay: 3.0, ..SacConfig::desk() },
                warmup_steps: 200,
                seed,
                ..CbmRunConfig::default()
            };
            let result = run_cbm(&env, None, &cfg).unwrap();
            let first: f64 =
                result.episodes[..10].iter().map(|e| e.ret).sum::<f64>() / 10.0;
            let last: f64 =
                result.episodes[110..].iter().map(|e| e.ret).sum::<f64>() / 10.0;
            if last > first {
                improved += 1;
            }
        }
        assert!(improved >= 2, "returns improved in only {improved} of 3 seeds");
    }

    #[test]
    fn oracle_mask_runs_never_reset() {
        let env = toy_env(2, 1);
        let cfg = CbmRunConfig {
            total_episodes: 10,
            eval_cadence: 20,
            provenance: Provenance::Oracle,
            sac: SacConfig::desk(),
            warmup_steps: 30,
            seed: 2,
            ..CbmRunConfig::default()
        };
        let result = run_cbm(&env, None, &cfg).unwrap();
        assert_eq!(result.mask_history.len(), 1);
        assert_eq!(result.agent.n_resets(), 0);
        assert_eq!(result.mask_history[0].1.provenance, Provenance::Oracle);
        // The oracle closure of {0} under the copy chain is {0} itself.
        assert_eq!(result.mask_history[0].1.kept_indices(), vec![0]);
        assert!(result.events.iter().all(|e| e.kind != EventKind::PolicyReset));
    }

    #[test]
    fn degenerate_cadence_matches_plain_full_mask_training() {
        // With the evaluation cadence beyond the run length, a learned-mask
        // run never evaluates and must equal the plain full-mask run
        // transition for transition.
        let env = toy_env(2, 3);
        let train = toy_buffer(&env, 500, 9);
        let mut dyn_model = DynModel::from_buffer(
            crate::implicit::DynConfig::desk(),
            &train,
            77,
        )
        .unwrap();
        dyn_model
            .train(&train, 50, crate::implicit::MaskSchedule::FullPlusRandomUnit)
            .unwrap();
        let base = CbmRunConfig {
            total_episodes: 8,
            eval_cadence: 100_000,
            sac: SacConfig::desk(),
            warmup_steps: 40,
            seed: 4,
            ..CbmRunConfig::default()
        };
        let cbm = run_cbm(
            &env,
            Some(dyn_model),
            &CbmRunConfig { provenance: Provenance::Bisimulation, ..base.clone() },
        )
        .unwrap();
        let plain = run_cbm(&env, None, &CbmRunConfig { provenance: Provenance::Full, ..base })
            .unwrap();
        let rets_a: Vec<f64> = cbm.episodes.iter().map(|e| e.ret).collect();
        let rets_b: Vec<f64> = plain.episodes.iter().map(|e| e.ret).collect();
        assert_eq!(rets_a, rets_b);
        assert_eq!(cbm.mask_history.len(), 1);
        assert!(cbm.mask_history[0].1.n_kept() == env.d_s());
    }

    #[test]
    fn event_log_orders_collection_models_abstraction_policy() {
        let env = toy_env(2, 5);
        let train = toy_buffer(&env, 400, 11);
        let mut dyn_model =
            DynModel::from_buffer(crate::implicit::DynConfig::desk(), &train, 78).unwrap();
        dyn_model
            .train(&train, 50, crate::implicit::MaskSchedule::FullPlusRandomUnit)
            .unwrap();
        let cfg = CbmRunConfig {
            total_episodes: 6,
            eval_cadence: 25,
            provenance: Provenance::Bisimulation,
            sac: SacConfig::desk(),
            reward_cfg: RewardConfig::desk(),
            reward_steps_per_eval: 30,
            cmi: CmiConfig { n_eval_transitions: 40, n_negatives: 8, seed: 0 },
            warmup_steps: 20,
            replay_train_steps: 5,
            seed: 6,
            ..CbmRunConfig::default()
        };
        let result = run_cbm(&env, Some(dyn_model), &cfg).unwrap();
        // Group events by step: within one step, collection must precede
        // model updates, which precede the abstraction evaluation, which
        // precedes any policy events.
        let rank = |k: EventKind| match k {
            EventKind::Collect => 0,
            EventKind::ModelUpdate => 1,
            EventKind::AbstractionEval => 2,
            EventKind::PolicyReset => 3,
            EventKind::PolicyUpdate => 4,
        };
        let mut evals_seen = 0;
        for w in result.events.windows(2) {
            if w[0].step == w[1].step {
                assert!(
                    rank(w[0].kind) <= rank(w[1].kind),
                    "out of order at step {}: {:?} then {:?}",
                    w[0].step,
                    w[0].kind,
                    w[1].kind
                );
            }
            if w[1].kind == EventKind::AbstractionEval {
                evals_seen += 1;
            }
        }
        assert!(evals_seen >= 2, "cadence never fired");
    }

    #[test]
    fn save_load_round_trips_the_agent() {
        let env = toy_env(2, 0);
        let buffer = toy_buffer(&env, 300, 1);
        let mut a = toy_agent(&env, SacConfig::desk(), 23);
        for _ in 0..10 {
            a.update(&buffer, 0.5, &mut seeded_rng(12)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let mut b = SacAgent::load(dir.path()).unwrap();
        assert_eq!(b.updates_done(), 10);
        assert_eq!(actor_fingerprint(&a), actor_fingerprint(&b));
        assert_eq!(critic_fingerprints(&a), critic_fingerprints(&b));
        // Resuming both with the same stream yields identical parameters.
        let mut rng_a = seeded_rng(13);
        let mut rng_b = seeded_rng(13);
        a.update(&buffer, 0.4, &mut rng_a).unwrap();
        b.update(&buffer, 0.4, &mut rng_b).unwrap();
        assert_eq!(actor_fingerprint(&a), actor_fingerprint(&b));
    }

    #[test]
    fn training_log_csv_has_the_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_training_log_csv(
            &path,
            &[EpisodeRow {
                episode: 0,
                task: 1,
                ret: 2.5,
                mask_size: 3,
                n_resets: 0,
                alpha: 0.9,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "episode,task,return,mask_size,n_resets,alpha\n0,1,2.5,3,0,0.9\n");
    }
}
