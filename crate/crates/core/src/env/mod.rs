//! Synthetic factored environments with known ground-truth structure.
//!
//! Every environment is described by a serializable [`EnvSpec`]: variable
//! ranges, a transition family with its parameters, per-task reward
//! functions, distractor counts, and the ground-truth causal graph. The
//! runtime [`Env`] derives any family-specific tables (linear coefficients,
//! conditional probability tables) deterministically from `spec.seed` and
//! validates them against the declared graph, so a hand-edited spec that
//! contradicts its own seed is rejected.
//!
//! State layout: the first `d_real` variables carry the family dynamics,
//! followed by `n_controllable_distractors` variables that are projections of
//! the action, followed by `n_uncontrollable_distractors` variables resampled
//! uniformly at every step.

mod buffer;
mod families;
mod io;

pub use buffer::{collect_dataset, CollectPolicy, ReplayBuffer, Transition};
pub use families::{
    contact_gated, copy_chain, discrete_chain, noisy_linear, ContactGatedCfg, CopyChainCfg,
    CopyChainTaskCfg, DiscreteChainCfg, NoisyLinearCfg,
};
pub use io::{load_buffer, save_buffer, BufferSidecar, BUFFER_MAGIC};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Spec types
// ---------------------------------------------------------------------------

/// Ground-truth causal structure of an environment.
///
/// `dyn_parents[j][i]` says input unit `j` (state variable, or the action for
/// `j == d_s`) is a parent of next-step variable `i`. `reward_parents[k][i]`
/// says variable `i` feeds task `k`'s reward.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthGraph {
    pub dyn_parents: Vec<Vec<bool>>,
    pub reward_parents: Vec<Vec<bool>>,
}

/// Transition family plus its family-specific parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransitionKind {
    /// Variable 0 follows the first action component; each later variable
    /// copies its predecessor.
    CopyChain { drive_gain: f64 },
    /// Each variable is a sparse linear function of other variables and
    /// optionally the action.
    NoisyLinear { max_parents: usize },
    /// A 1-D end-effector drags a block only while within `contact_radius`.
    ContactGated { contact_radius: f64, motion_gain: f64 },
    /// Finite-support tabular dynamics; actions snap to a discrete grid.
    DiscreteTabular { support: usize, action_levels: usize, flip_prob: f64 },
}

/// Which reward formula a task uses; parameters live in [`RewardParams`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum RewardFnKind {
    DistanceToGoal,
    IndicatorThreshold,
    WeightedSum,
}

/// Target of a distance-shaped reward term.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum DistanceTarget {
    Const(f64),
    Var(usize),
}

/// One bounded shaping term: `weight * (1 - tanh(scale * |s[var] - target|))`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistanceTerm {
    pub weight: f64,
    pub var: usize,
    pub target: DistanceTarget,
    pub scale: f64,
}

/// Parameters for each [`RewardFnKind`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum RewardParams {
    Distance(Vec<DistanceTerm>),
    Indicator { var: usize, threshold: f64, value: f64 },
    Weighted { coeffs: Vec<(usize, f64)>, bias: f64 },
}

/// Reward definition of one task.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RewardSpec {
    pub task_id: usize,
    pub parents: Vec<usize>,
    pub reward_fn_kind: RewardFnKind,
    pub params: RewardParams,
    /// Gaussian observation noise on the reward; defaults to 0.
    #[serde(default)]
    pub noise_std: f64,
}

/// Serializable description of an environment.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    #[serde(rename = "d_S")]
    pub d_s: usize,
    #[serde(rename = "d_A")]
    pub d_a: usize,
    pub ranges: Vec<(f64, f64)>,
    pub transition_kind: TransitionKind,
    pub noise_std: Vec<f64>,
    pub true_graph: GroundTruthGraph,
    pub reward_specs: Vec<RewardSpec>,
    pub n_controllable_distractors: usize,
    pub n_uncontrollable_distractors: usize,
    /// Projection matrix for controllable distractors, `d_A` rows by
    /// `n_controllable_distractors` columns.
    pub distractor_projection: Vec<Vec<f64>>,
    pub horizon: usize,
    pub seed: u64,
}

impl EnvSpec {
    /// Number of non-distractor variables.
    pub fn d_real(&self) -> usize {
        self.d_s - self.n_controllable_distractors - self.n_uncontrollable_distractors
    }

    pub fn n_tasks(&self) -> usize {
        self.reward_specs.len()
    }

    /// Registers a task, deriving its `reward_parents` row from
    /// `reward.parents`.
    pub fn push_task(&mut self, reward: RewardSpec) -> Result<()> {
        if reward.task_id != self.reward_specs.len() {
            return Err(Error::InvalidSpec(format!(
                "task_id {} must equal its position {}",
                reward.task_id,
                self.reward_specs.len()
            )));
        }
        let mut row = vec![false; self.d_s];
        for &p in &reward.parents {
            if p >= self.d_s {
                return Err(Error::InvalidSpec(format!("reward parent {p} out of range")));
            }
            row[p] = true;
        }
        self.true_graph.reward_parents.push(row);
        self.reward_specs.push(reward);
        Ok(())
    }

    fn reward_fn_vars(spec: &RewardSpec) -> Vec<usize> {
        match &spec.params {
            RewardParams::Distance(terms) => {
                let mut v = Vec::new();
                for t in terms {
                    v.push(t.var);
                    if let DistanceTarget::Var(o) = t.target {
                        v.push(o);
                    }
                }
                v
            }
            RewardParams::Indicator { var, .. } => vec![*var],
            RewardParams::Weighted { coeffs, .. } => coeffs.iter().map(|(v, _)| *v).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.d_s == 0 || self.d_a == 0 {
            return fail("d_S and d_A must be positive".into());
        }
        if self.n_controllable_distractors + self.n_uncontrollable_distractors > self.d_s {
            return fail("distractor counts exceed d_S".into());
        }
        if self.ranges.len() != self.d_s {
            return fail(format!("ranges has {} entries, expected d_S = {}", self.ranges.len(), self.d_s));
        }
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return fail(format!("bad range [{lo}, {hi}] for variable {i}"));
            }
        }
        if self.noise_std.len() != self.d_s || self.noise_std.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("noise_std must list one nonnegative value per variable".into());
        }
        if self.true_graph.dyn_parents.len() != self.d_s + 1
            || self.true_graph.dyn_parents.iter().any(|r| r.len() != self.d_s)
        {
            return fail(format!("dyn_parents must be ({} + 1) x {}", self.d_s, self.d_s));
        }
        if self.true_graph.reward_parents.len() != self.reward_specs.len()
            || self.true_graph.reward_parents.iter().any(|r| r.len() != self.d_s)
        {
            return fail("reward_parents must have one length-d_S row per task".into());
        }
        if self.horizon == 0 {
            return fail("horizon must be positive".into());
        }
        if self.n_controllable_distractors > 0 {
            if self.distractor_projection.len() != self.d_a
                || self
                    .distractor_projection
                    .iter()
                    .any(|r| r.len() != self.n_controllable_distractors)
            {
                return fail("distractor_projection must be d_A x n_controllable_distractors".into());
            }
        }
        for (k, spec) in self.reward_specs.iter().enumerate() {
            if spec.task_id != k {
                return fail(format!("task {k} has task_id {}", spec.task_id));
            }
            if !self.true_graph.reward_parents[k].iter().any(|&b| b) {
                return fail(format!("task {k} lists no reward parents"));
            }
            if spec.noise_std < 0.0 || !spec.noise_std.is_finite() {
                return fail(format!("task {k} has invalid noise_std"));
            }
            let kind_matches = matches!(
                (&spec.reward_fn_kind, &spec.params),
                (RewardFnKind::DistanceToGoal, RewardParams::Distance(_))
                    | (RewardFnKind::IndicatorThreshold, RewardParams::Indicator { .. })
                    | (RewardFnKind::WeightedSum, RewardParams::Weighted { .. })
            );
            if !kind_matches {
                return fail(format!("task {k}: params do not match reward_fn_kind"));
            }
            for v in Self::reward_fn_vars(spec) {
                if v >= self.d_s {
                    return fail(format!("task {k} references variable {v} out of range"));
                }
                if !spec.parents.contains(&v) {
                    return fail(format!("task {k} reads variable {v} not listed in parents"));
                }
            }
            for &p in &spec.parents {
                if p >= self.d_s || !self.true_graph.reward_parents[k][p] {
                    return fail(format!("task {k}: parents and reward_parents disagree on {p}"));
                }
            }
        }
        match &self.transition_kind {
            TransitionKind::CopyChain { drive_gain } => {
                if !drive_gain.is_finite() {
                    return fail("copy-chain drive_gain must be finite".into());
                }
            }
            TransitionKind::NoisyLinear { max_parents } => {
                if *max_parents == 0 {
                    return fail("noisy-linear max_parents must be positive".into());
                }
            }
            TransitionKind::ContactGated { contact_radius, motion_gain } => {
                if *contact_radius <= 0.0 || *motion_gain <= 0.0 {
                    return fail("contact-gated parameters must be positive".into());
                }
                if self.d_real() != 2 {
                    return fail("contact-gated needs exactly 2 non-distractor variables".into());
                }
            }
            TransitionKind::DiscreteTabular { support, action_levels, flip_prob } => {
                if *support < 2 || *action_levels < 2 {
                    return fail("discrete-tabular needs at least 2 levels".into());
                }
                if !(0.0..1.0).contains(flip_prob) {
                    return fail("flip_prob must lie in [0, 1)".into());
                }
                if self.d_a != 1 {
                    return fail("discrete-tabular supports a single action dimension".into());
                }
                if self.n_controllable_distractors + self.n_uncontrollable_distractors != 0 {
                    return fail("discrete-tabular does not support distractors".into());
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Runtime environment
// ---------------------------------------------------------------------------

/// Tabular dynamics: per-variable finite supports and conditional probability
/// tables indexed by the mixed-radix encoding of the parent values.
#[derive(Clone, Debug)]
pub struct TabularDynamics {
    /// Per-variable level values.
    pub supports: Vec<Vec<f64>>,
    /// Action grid values.
    pub action_levels: Vec<f64>,
    /// Per-variable ordered parent units (`d_s` denotes the action).
    pub parents: Vec<Vec<usize>>,
    /// Per-variable table of shape (number of parent configurations, support size).
    pub cpts: Vec<Array2<f64>>,
}

impl TabularDynamics {
    /// Support size of unit `u` (a state variable or the action).
    pub fn unit_levels(&self, u: usize) -> usize {
        if u == self.supports.len() {
            self.action_levels.len()
        } else {
            self.supports[u].len()
        }
    }

    /// Row index into variable `i`'s table given level indices of all units.
    pub fn parent_config(&self, i: usize, unit_levels: &[usize]) -> usize {
        let mut idx = 0;
        for &p in &self.parents[i] {
            idx = idx * self.unit_levels(p) + unit_levels[p];
        }
        idx
    }

    fn validate(&self, d_s: usize) -> Result<()> {
        if self.supports.len() != d_s || self.parents.len() != d_s || self.cpts.len() != d_s {
            return Err(Error::InvalidSpec("tabular tables disagree with d_S".into()));
        }
        if self.action_levels.len() < 2 {
            return Err(Error::InvalidSpec("tabular dynamics need at least 2 action levels".into()));
        }
        for i in 0..d_s {
            let mut configs = 1usize;
            for &p in &self.parents[i] {
                if p > d_s {
                    return Err(Error::InvalidSpec(format!("variable {i} has parent {p} out of range")));
                }
                configs *= self.unit_levels(p);
            }
            if self.cpts[i].dim() != (configs, self.supports[i].len()) {
                return Err(Error::InvalidSpec(format!("variable {i} CPT has wrong shape")));
            }
            for row in self.cpts[i].rows() {
                let s: f64 = row.sum();
                if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                    return Err(Error::InvalidSpec(format!("variable {i} CPT rows must be distributions")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) enum DynImpl {
    CopyChain { drive_gain: f64 },
    NoisyLinear { coeffs: Vec<Vec<(usize, f64)>>, action_coeffs: Vec<Option<Vec<f64>>> },
    ContactGated { radius: f64, gain: f64 },
    Tabular(TabularDynamics),
}

/// Immutable runtime environment. Stepping takes the caller's generator, so
/// rollouts parallelize with independent streams and paired simulations can
/// share identical noise.
#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    dyn_impl: DynImpl,
}

impl Env {
    /// Builds the runtime environment, re-deriving family tables from
    /// `spec.seed` and checking them against `spec.true_graph`.
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let dyn_impl = families::derive_tables(&spec)?;
        let derived = families::derived_dyn_parents(&spec, &dyn_impl);
        if derived != spec.true_graph.dyn_parents {
            return Err(Error::InvalidSpec(
                "true_graph.dyn_parents does not match the structure derived from the seed".into(),
            ));
        }
        Ok(Env { spec, dyn_impl })
    }

    /// Builds an environment from explicit tabular components, bypassing seed
    /// derivation. The resulting spec cannot be rebuilt via [`Env::new`]
    /// because its tables did not come from the seed; intended for crafted
    /// setups in tests and studies.
    pub fn from_tabular_parts(
        supports: Vec<Vec<f64>>,
        action_levels: Vec<f64>,
        parents: Vec<Vec<usize>>,
        cpts: Vec<Array2<f64>>,
        horizon: usize,
        seed: u64,
    ) -> Result<Self> {
        let d_s = supports.len();
        let tab = TabularDynamics { supports, action_levels, parents, cpts };
        tab.validate(d_s)?;
        let mut dyn_parents = vec![vec![false; d_s]; d_s + 1];
        for i in 0..d_s {
            for &p in &tab.parents[i] {
                dyn_parents[p][i] = true;
            }
        }
        let support = tab.supports[0].len();
        if tab.supports.iter().any(|s| s.len() != support) {
            return Err(Error::InvalidSpec("crafted tabular envs need uniform support sizes".into()));
        }
        let ranges = tab
            .supports
            .iter()
            .map(|s| {
                let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect();
        let spec = EnvSpec {
            d_s,
            d_a: 1,
            ranges,
            transition_kind: TransitionKind::DiscreteTabular {
                support,
                action_levels: tab.action_levels.len(),
                flip_prob: 0.0,
            },
            noise_std: vec![0.0; d_s],
            true_graph: GroundTruthGraph { dyn_parents, reward_parents: vec![] },
            reward_specs: vec![],
            n_controllable_distractors: 0,
            n_uncontrollable_distractors: 0,
            distractor_projection: vec![],
            horizon,
            seed,
        };
        spec.validate()?;
        Ok(Env { spec, dyn_impl: DynImpl::Tabular(tab) })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn d_s(&self) -> usize {
        self.spec.d_s
    }

    pub fn d_a(&self) -> usize {
        self.spec.d_a
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn n_tasks(&self) -> usize {
        self.spec.reward_specs.len()
    }

    /// Tabular tables when this is a discrete environment.
    pub fn tabular(&self) -> Option<&TabularDynamics> {
        match &self.dyn_impl {
            DynImpl::Tabular(t) => Some(t),
            _ => None,
        }
    }

    /// Initial state: uniform within each variable's range (uniform over the
    /// support set for tabular variables).
    pub fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.dyn_impl {
            DynImpl::Tabular(tab) => (0..self.spec.d_s)
                .map(|i| tab.supports[i][rng.gen_range(0..tab.supports[i].len())])
                .collect(),
            _ => self
                .spec
                .ranges
                .iter()
                .map(|(lo, hi)| if hi > lo { rng.gen_range(*lo..*hi) } else { *lo })
                .collect(),
        }
    }

    /// Uniform-random action; tabular environments draw from the action grid.
    pub fn sample_uniform_action(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.dyn_impl {
            DynImpl::Tabular(tab) => {
                vec![tab.action_levels[rng.gen_range(0..tab.action_levels.len())]]
            }
            _ => (0..self.spec.d_a).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn clip(&self, i: usize, v: f64) -> f64 {
        let (lo, hi) = self.spec.ranges[i];
        v.clamp(lo, hi)
    }

    /// Task rewards for `(s, a)`, including observation noise when configured.
    ///
    /// Draw order is fixed (one optional draw per task, in task order) so
    /// paired simulations consume generator state identically.
    pub fn rewards(&self, s: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.spec
            .reward_specs
            .iter()
            .map(|spec| {
                let mut r = Self::reward_mean(spec, s);
                if spec.noise_std > 0.0 {
                    let n = Normal::new(0.0, spec.noise_std).unwrap();
                    r += n.sample(rng);
                }
                r
            })
            .collect()
    }

    /// Noise-free reward of one task.
    pub fn reward_mean(spec: &RewardSpec, s: &[f64]) -> f64 {
        match &spec.params {
            RewardParams::Distance(terms) => terms
                .iter()
                .map(|t| {
                    let target = match t.target {
                        DistanceTarget::Const(c) => c,
                        DistanceTarget::Var(v) => s[v],
                    };
                    t.weight * (1.0 - (t.scale * (s[t.var] - target).abs()).tanh())
                })
                .sum(),
            RewardParams::Indicator { var, threshold, value } => {
                if s[*var] >= *threshold {
                    *value
                } else {
                    0.0
                }
            }
            RewardParams::Weighted { coeffs, bias } => {
                bias + coeffs.iter().map(|(v, c)| c * s[*v]).sum::<f64>()
            }
        }
    }

    /// One transition. Returns `(next_state, task_rewards)` where the rewards
    /// are a function of `(s, a)`.
    pub fn step(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        if s.len() != self.spec.d_s || a.len() != self.spec.d_a {
            return Err(Error::ShapeMismatch(format!(
                "state/action lengths ({}, {}) do not match ({}, {})",
                s.len(),
                a.len(),
                self.spec.d_s,
                self.spec.d_a
            )));
        }
        for (idx, v) in a.iter().enumerate() {
            if !v.is_finite() || *v < -1.0 || *v > 1.0 {
                return Err(Error::ActionOutOfRange { index: idx, value: *v });
            }
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state contains NaN or infinity".into()));
        }

        let rewards = self.rewards(s, rng);
        let d_real = self.spec.d_real();
        let mut next = vec![0.0; self.spec.d_s];

        match &self.dyn_impl {
            DynImpl::CopyChain { drive_gain } => {
                for i in 0..d_real {
                    next[i] = if i == 0 { drive_gain * a[0] } else { s[i - 1] };
                }
            }
            DynImpl::NoisyLinear { coeffs, action_coeffs } => {
                for i in 0..d_real {
                    let mut v: f64 = coeffs[i].iter().map(|(j, w)| w * s[*j]).sum();
                    if let Some(ac) = &action_coeffs[i] {
                        v += ac.iter().zip(a.iter()).map(|(w, av)| w * av).sum::<f64>();
                    }
                    next[i] = v;
                }
            }
            DynImpl::ContactGated { radius, gain } => {
                next[0] = s[0] + gain * a[0];
                next[1] = if (s[0] - s[1]).abs() <= *radius { s[1] + gain * a[0] } else { s[1] };
            }
            DynImpl::Tabular(tab) => {
                let mut levels: Vec<usize> = (0..self.spec.d_s)
                    .map(|i| nearest_level(&tab.supports[i], s[i]))
                    .collect();
                levels.push(nearest_level(&tab.action_levels, a[0]));
                for i in 0..self.spec.d_s {
                    let row = tab.cpts[i].row(tab.parent_config(i, &levels));
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut chosen = row.len() - 1;
                    for (k, p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            chosen = k;
                            break;
                        }
                    }
                    next[i] = tab.supports[i][chosen];
                }
                return Ok((next, rewards));
            }
        }

        // Gaussian transition noise, then clipping; one draw per noisy
        // variable in index order.
        for i in 0..d_real {
            if self.spec.noise_std[i] > 0.0 {
                let n = Normal::new(0.0, self.spec.noise_std[i]).unwrap();
                next[i] += n.sample(rng);
            }
            next[i] = self.clip(i, next[i]);
        }

        // Controllable distractors: fixed projection of the action.
        for k in 0..self.spec.n_controllable_distractors {
            let i = d_real + k;
            let v: f64 = (0..self.spec.d_a)
                .map(|d| self.spec.distractor_projection[d][k] * a[d])
                .sum();
            next[i] = self.clip(i, v);
        }

        // Uncontrollable distractors: fresh uniform draw, unconditionally.
        for k in 0..self.spec.n_uncontrollable_distractors {
            let i = d_real + self.spec.n_controllable_distractors + k;
            let (lo, hi) = self.spec.ranges[i];
            next[i] = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        }

        Ok((next, rewards))
    }
}

fn nearest_level(levels: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, l) in levels.iter().enumerate() {
        let d = (v - l).abs();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn spec_json_round_trip_is_exact() {
        let spec = families::copy_chain(&CopyChainCfg {
            n_real: 3,
            d_a: 2,
            noise_std: 0.05,
            n_controllable: 1,
            n_uncontrollable: 1,
            horizon: 20,
            seed: 5,
        });
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back: EnvSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        // Field names appear verbatim.
        for key in [
            "d_S",
            "d_A",
            "ranges",
            "transition_kind",
            "noise_std",
            "true_graph",
            "reward_specs",
            "n_controllable_distractors",
            "n_uncontrollable_distractors",
            "distractor_projection",
            "horizon",
            "seed",
        ] {
            assert!(json.contains(&format!("\"{key}\"")), "missing key {key}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let spec = families::copy_chain(&CopyChainCfg::default());
        let mut v: serde_json::Value = serde_json::to_value(&spec).unwrap();
        v.as_object_mut().unwrap().insert("bogus".into(), serde_json::json!(1));
        assert!(serde_json::from_value::<EnvSpec>(v).is_err());
    }

    #[test]
    fn tampered_graph_rejected_at_build() {
        let mut spec = families::copy_chain(&CopyChainCfg::default());
        let d_s = spec.d_s;
        spec.true_graph.dyn_parents[d_s][1] = true;
        assert!(matches!(Env::new(spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn out_of_range_action_rejected() {
        let env = Env::new(families::copy_chain(&CopyChainCfg::default())).unwrap();
        let mut rng = seeded_rng(0);
        let s = env.reset(&mut rng);
        let mut a = vec![0.0; env.d_a()];
        a[0] = 1.5;
        assert!(matches!(
            env.step(&s, &a, &mut rng),
            Err(Error::ActionOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn states_stay_within_ranges() {
        let spec = families::noisy_linear(&NoisyLinearCfg {
            n_real: 4,
            d_a: 2,
            max_parents: 3,
            noise_std: 0.3,
            n_controllable: 2,
            n_uncontrollable: 2,
            horizon: 30,
            seed: 9,
        });
        let env = Env::new(spec).unwrap();
        let mut rng = seeded_rng(1);
        let mut s = env.reset(&mut rng);
        for _ in 0..200 {
            let a = env.sample_uniform_action(&mut rng);
            let (next, _) = env.step(&s, &a, &mut rng).unwrap();
            for (i, v) in next.iter().enumerate() {
                let (lo, hi) = env.spec().ranges[i];
                assert!(*v >= lo && *v <= hi, "variable {i} left its range: {v}");
            }
            s = next;
        }
    }

    #[test]
    fn degenerate_range_pins_the_variable() {
        let mut spec = families::copy_chain(&CopyChainCfg::default());
        // Give one uncontrollable distractor a collapsed range.
        let i = spec.d_s - 1;
        spec.ranges[i] = (0.0, 0.0);
        let env = Env::new(spec).unwrap();
        let mut rng = seeded_rng(3);
        let s = env.reset(&mut rng);
        assert_eq!(s[i], 0.0);
        let a = env.sample_uniform_action(&mut rng);
        let (next, _) = env.step(&s, &a, &mut rng).unwrap();
        assert_eq!(next[i], 0.0);
    }

    #[test]
    fn non_parents_cannot_influence_zero_noise_transitions() {
        // Paired simulation: perturb one non-parent variable, share the
        // generator, and require identical next values for every child that
        // does not list it as a parent.
        let mut cfg = NoisyLinearCfg::default();
        cfg.noise_std = 0.0;
        cfg.seed = 77;
        let env = Env::new(families::noisy_linear(&cfg)).unwrap();
        let d_s = env.d_s();
        let parents = &env.spec().true_graph.dyn_parents;
        let mut rng = seeded_rng(4);
        for trial in 0..50 {
            let s = env.reset(&mut rng);
            let a = env.sample_uniform_action(&mut rng);
            let j = trial % d_s;
            let mut s2 = s.clone();
            let (lo, hi) = env.spec().ranges[j];
            s2[j] = lo + 0.37 * (hi - lo) + 0.11 * (s[j] - lo);
            let mut r1 = seeded_rng(1000 + trial as u64);
            let mut r2 = r1.clone();
            let (n1, _) = env.step(&s, &a, &mut r1).unwrap();
            let (n2, _) = env.step(&s2, &a, &mut r2).unwrap();
            for i in 0..d_s {
                if !parents[j][i] {
                    assert_eq!(n1[i].to_bits(), n2[i].to_bits(), "variable {j} leaked into {i}");
                }
            }
        }
    }

    #[test]
    fn discrete_states_live_on_the_support() {
        let env = Env::new(families::discrete_chain(&DiscreteChainCfg {
            n_vars: 3,
            support: 2,
            action_levels: 2,
            flip_prob: 0.1,
            horizon: 10,
            seed: 2,
        }))
        .unwrap();
        let mut rng = seeded_rng(8);
        let mut s = env.reset(&mut rng);
        for _ in 0..100 {
            let a = env.sample_uniform_action(&mut rng);
            let (next, _) = env.step(&s, &a, &mut rng).unwrap();
            for (i, v) in next.iter().enumerate() {
                let (lo, hi) = env.spec().ranges[i];
                assert!(*v == lo || *v == hi, "variable {i} off support: {v}");
            }
            s = next;
        }
    }

    #[test]
    fn reward_spec_must_cover_referenced_vars() {
        let mut spec = families::copy_chain(&CopyChainCfg::default());
        let bad = RewardSpec {
            task_id: 0,
            parents: vec![0],
            reward_fn_kind: RewardFnKind::WeightedSum,
            params: RewardParams::Weighted { coeffs: vec![(1, 1.0)], bias: 0.0 },
            noise_std: 0.0,
        };
        spec.reward_specs.push(bad);
        spec.true_graph.reward_parents.push({
            let mut row = vec![false; spec.d_s];
            row[0] = true;
            row
        });
        assert!(spec.validate().is_err());
    }
}
