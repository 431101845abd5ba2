//! Builders for the synthetic environment families.
//!
//! Each builder produces an [`EnvSpec`] whose `true_graph` matches the tables
//! that [`derive_tables`] later reconstructs from `spec.seed`, so specs stay
//! self-consistent after serialization.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DynImpl, EnvSpec, GroundTruthGraph, TabularDynamics, TransitionKind};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

const DEFAULT_RANGE: (f64, f64) = (-1.0, 1.0);

fn base_graph(d_s: usize) -> GroundTruthGraph {
    GroundTruthGraph { dyn_parents: vec![vec![false; d_s]; d_s + 1], reward_parents: vec![] }
}

fn mark_distractor_parents(spec: &mut EnvSpec) {
    let d_real = spec.d_real();
    for k in 0..spec.n_controllable_distractors {
        spec.true_graph.dyn_parents[spec.d_s][d_real + k] = true;
    }
    // Uncontrollable distractors have no parents at all.
}

/// Configuration for [`copy_chain`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CopyChainCfg {
    pub n_real: usize,
    pub d_a: usize,
    pub noise_std: f64,
    pub n_controllable: usize,
    pub n_uncontrollable: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for CopyChainCfg {
    fn default() -> Self {
        CopyChainCfg {
            n_real: 3,
            d_a: 1,
            noise_std: 0.0,
            n_controllable: 1,
            n_uncontrollable: 1,
            horizon: 25,
            seed: 0,
        }
    }
}

/// Optional shaped task appended to a copy-chain spec: reach a constant goal
/// with the chain's last variable.
#[derive(Clone, Debug)]
pub struct CopyChainTaskCfg {
    pub goal: f64,
    pub scale: f64,
}

/// Chain dynamics: variable 0 tracks the first action component, variable `i`
/// copies variable `i - 1`. Structure is index-defined, so the seed only
/// matters for distractor projections.
pub fn copy_chain(cfg: &CopyChainCfg) -> EnvSpec {
    let d_s = cfg.n_real + cfg.n_controllable + cfg.n_uncontrollable;
    assert!(cfg.n_real >= 1, "copy chain needs at least one real variable");
    let mut spec = EnvSpec {
        d_s,
        d_a: cfg.d_a,
        ranges: vec![DEFAULT_RANGE; d_s],
        transition_kind: TransitionKind::CopyChain { drive_gain: 1.0 },
        noise_std: std::iter::repeat(cfg.noise_std)
            .take(cfg.n_real)
            .chain(std::iter::repeat(0.0).take(cfg.n_controllable + cfg.n_uncontrollable))
            .collect(),
        true_graph: base_graph(d_s),
        reward_specs: vec![],
        n_controllable_distractors: cfg.n_controllable,
        n_uncontrollable_distractors: cfg.n_uncontrollable,
        distractor_projection: derive_projection(cfg.seed, cfg.d_a, cfg.n_controllable),
        horizon: cfg.horizon,
        seed: cfg.seed,
    };
    spec.true_graph.dyn_parents[d_s][0] = true;
    for i in 1..cfg.n_real {
        spec.true_graph.dyn_parents[i - 1][i] = true;
    }
    mark_distractor_parents(&mut spec);
    spec
}

/// Configuration for [`noisy_linear`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoisyLinearCfg {
    pub n_real: usize,
    pub d_a: usize,
    pub max_parents: usize,
    pub noise_std: f64,
    pub n_controllable: usize,
    pub n_uncontrollable: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for NoisyLinearCfg {
    fn default() -> Self {
        NoisyLinearCfg {
            n_real: 5,
            d_a: 2,
            max_parents: 3,
            noise_std: 0.1,
            n_controllable: 1,
            n_uncontrollable: 1,
            horizon: 25,
            seed: 0,
        }
    }
}

/// Sparse linear dynamics with stable coefficients. Variable 0 always listens
/// to the action so the system stays excitable.
pub fn noisy_linear(cfg: &NoisyLinearCfg) -> EnvSpec {
    let d_s = cfg.n_real + cfg.n_controllable + cfg.n_uncontrollable;
    assert!(cfg.n_real >= 1 && cfg.max_parents >= 1);
    let mut spec = EnvSpec {
        d_s,
        d_a: cfg.d_a,
        ranges: vec![DEFAULT_RANGE; d_s],
        transition_kind: TransitionKind::NoisyLinear { max_parents: cfg.max_parents },
        noise_std: std::iter::repeat(cfg.noise_std)
            .take(cfg.n_real)
            .chain(std::iter::repeat(0.0).take(cfg.n_controllable + cfg.n_uncontrollable))
            .collect(),
        true_graph: base_graph(d_s),
        reward_specs: vec![],
        n_controllable_distractors: cfg.n_controllable,
        n_uncontrollable_distractors: cfg.n_uncontrollable,
        distractor_projection: derive_projection(cfg.seed, cfg.d_a, cfg.n_controllable),
        horizon: cfg.horizon,
        seed: cfg.seed,
    };
    let (coeffs, action_coeffs) = derive_linear(&spec, cfg.max_parents);
    for (i, row) in coeffs.iter().enumerate() {
        for (j, _) in row {
            spec.true_graph.dyn_parents[*j][i] = true;
        }
        if action_coeffs[i].is_some() {
            spec.true_graph.dyn_parents[d_s][i] = true;
        }
    }
    mark_distractor_parents(&mut spec);
    spec
}

/// Configuration for [`contact_gated`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ContactGatedCfg {
    pub contact_radius: f64,
    pub motion_gain: f64,
    pub noise_std: f64,
    pub n_controllable: usize,
    pub n_uncontrollable: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for ContactGatedCfg {
    fn default() -> Self {
        ContactGatedCfg {
            contact_radius: 0.2,
            motion_gain: 0.2,
            noise_std: 0.0,
            n_controllable: 1,
            n_uncontrollable: 1,
            horizon: 25,
            seed: 0,
        }
    }
}

/// Miniature pick task: variable 0 is an end effector moved by the action;
/// variable 1 is a block that follows the effector only while
/// `|s0 - s1| <= contact_radius`. The block's true parents are both state
/// variables and the action.
pub fn contact_gated(cfg: &ContactGatedCfg) -> EnvSpec {
    let d_s = 2 + cfg.n_controllable + cfg.n_uncontrollable;
    let mut spec = EnvSpec {
        d_s,
        d_a: 1,
        ranges: vec![DEFAULT_RANGE; d_s],
        transition_kind: TransitionKind::ContactGated {
            contact_radius: cfg.contact_radius,
            motion_gain: cfg.motion_gain,
        },
        noise_std: std::iter::repeat(cfg.noise_std)
            .take(2)
            .chain(std::iter::repeat(0.0).take(cfg.n_controllable + cfg.n_uncontrollable))
            .collect(),
        true_graph: base_graph(d_s),
        reward_specs: vec![],
        n_controllable_distractors: cfg.n_controllable,
        n_uncontrollable_distractors: cfg.n_uncontrollable,
        distractor_projection: derive_projection(cfg.seed, 1, cfg.n_controllable),
        horizon: cfg.horizon,
        seed: cfg.seed,
    };
    spec.true_graph.dyn_parents[0][0] = true;
    spec.true_graph.dyn_parents[d_s][0] = true;
    spec.true_graph.dyn_parents[0][1] = true;
    spec.true_graph.dyn_parents[1][1] = true;
    spec.true_graph.dyn_parents[d_s][1] = true;
    mark_distractor_parents(&mut spec);
    spec
}

/// Configuration for [`discrete_chain`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiscreteChainCfg {
    pub n_vars: usize,
    pub support: usize,
    pub action_levels: usize,
    pub flip_prob: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for DiscreteChainCfg {
    fn default() -> Self {
        DiscreteChainCfg { n_vars: 4, support: 4, action_levels: 4, flip_prob: 0.25, horizon: 25, seed: 0 }
    }
}

/// Finite chain with permutation-plus-noise tables: each variable maps its
/// single parent's level through a seed-derived permutation and lands there
/// with probability `1 - flip_prob`, otherwise uniformly on the other levels.
/// Permutation rows keep the uniform distribution stationary, which makes
/// exact enumeration of the information quantities cheap.
pub fn discrete_chain(cfg: &DiscreteChainCfg) -> EnvSpec {
    let d_s = cfg.n_vars;
    assert!(d_s >= 1 && cfg.support >= 2 && cfg.action_levels >= 2);
    let mut spec = EnvSpec {
        d_s,
        d_a: 1,
        ranges: vec![DEFAULT_RANGE; d_s],
        transition_kind: TransitionKind::DiscreteTabular {
            support: cfg.support,
            action_levels: cfg.action_levels,
            flip_prob: cfg.flip_prob,
        },
        noise_std: vec![0.0; d_s],
        true_graph: base_graph(d_s),
        reward_specs: vec![],
        n_controllable_distractors: 0,
        n_uncontrollable_distractors: 0,
        distractor_projection: vec![],
        horizon: cfg.horizon,
        seed: cfg.seed,
    };
    spec.true_graph.dyn_parents[d_s][0] = true;
    for i in 1..d_s {
        spec.true_graph.dyn_parents[i - 1][i] = true;
    }
    spec
}

/// Evenly spaced values covering `[lo, hi]` inclusive.
pub(crate) fn level_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn derive_projection(seed: u64, d_a: usize, n_controllable: usize) -> Vec<Vec<f64>> {
    if n_controllable == 0 {
        return vec![];
    }
    let mut rng = SeedTree::new(seed).rng("distractor-projection");
    let mut w = vec![vec![0.0f64; n_controllable]; d_a];
    for k in 0..n_controllable {
        let mut norm = 0.0;
        for row in w.iter_mut() {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            row[k] = sign * rng.gen_range(0.4..1.0);
            norm += row[k].abs();
        }
        // Column L1 norm 1 keeps the projection inside the unit range.
        for row in w.iter_mut() {
            row[k] /= norm;
        }
    }
    w
}

type LinearCoeffs = (Vec<Vec<(usize, f64)>>, Vec<Option<Vec<f64>>>);

fn derive_linear(spec: &EnvSpec, max_parents: usize) -> LinearCoeffs {
    let d_real = spec.d_real();
    let tree = SeedTree::new(spec.seed);
    let mut coeffs = Vec::with_capacity(d_real);
    let mut action_coeffs = Vec::with_capacity(d_real);
    for i in 0..d_real {
        let mut rng = tree.item_rng("linear-coeffs", i as u64);
        let n_par = rng.gen_range(1..=max_parents.min(d_real));
        let mut pool: Vec<usize> = (0..d_real).collect();
        pool.shuffle(&mut rng);
        let mut parents: Vec<usize> = pool[..n_par].to_vec();
        parents.sort_unstable();
        let mut row: Vec<(usize, f64)> = parents
            .iter()
            .map(|&j| {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                (j, sign * rng.gen_range(0.35..0.75))
            })
            .collect();
        // Keep the closed loop contracting.
        let total: f64 = row.iter().map(|(_, w)| w.abs()).sum();
        if total > 0.9 {
            for (_, w) in row.iter_mut() {
                *w *= 0.9 / total;
            }
        }
        let listens = i == 0 || rng.gen::<bool>();
        let ac = if listens {
            Some((0..spec.d_a).map(|_| rng.gen_range(-0.5..0.5)).collect())
        } else {
            None
        };
        coeffs.push(row);
        action_coeffs.push(ac);
    }
    (coeffs, action_coeffs)
}

fn derive_tabular(spec: &EnvSpec) -> Result<TabularDynamics> {
    let (support, action_levels, flip_prob) = match spec.transition_kind {
        TransitionKind::DiscreteTabular { support, action_levels, flip_prob } => {
            (support, action_levels, flip_prob)
        }
        _ => unreachable!("derive_tabular called for a continuous family"),
    };
    let d_s = spec.d_s;
    let tree = SeedTree::new(spec.seed);
    let supports: Vec<Vec<f64>> = spec
        .ranges
        .iter()
        .map(|(lo, hi)| {
            if hi <= lo {
                return Err(Error::InvalidSpec("discrete-tabular needs nondegenerate ranges".into()));
            }
            Ok(level_grid(*lo, *hi, support))
        })
        .collect::<Result<_>>()?;
    let action_grid = level_grid(-1.0, 1.0, action_levels);

    let mut parents = Vec::with_capacity(d_s);
    let mut cpts = Vec::with_capacity(d_s);
    for i in 0..d_s {
        let mut rng = tree.item_rng("tabular-cpt", i as u64);
        let (par, n_cfg): (Vec<usize>, usize) =
            if i == 0 { (vec![d_s], action_levels) } else { (vec![i - 1], support) };
        let mut perm: Vec<usize> = (0..support).collect();
        perm.shuffle(&mut rng);
        let off = flip_prob / (support - 1) as f64;
        let mut cpt = Array2::from_elem((n_cfg, support), off);
        for c in 0..n_cfg {
            let target = perm[c % support];
            cpt[(c, target)] = 1.0 - flip_prob;
        }
        parents.push(par);
        cpts.push(cpt);
    }
    Ok(TabularDynamics { supports, action_levels: action_grid, parents, cpts })
}

/// Rebuilds the runtime tables for `spec` from its seed.
pub(crate) fn derive_tables(spec: &EnvSpec) -> Result<DynImpl> {
    Ok(match spec.transition_kind {
        TransitionKind::CopyChain { drive_gain } => DynImpl::CopyChain { drive_gain },
        TransitionKind::NoisyLinear { max_parents } => {
            let (coeffs, action_coeffs) = derive_linear(spec, max_parents);
            DynImpl::NoisyLinear { coeffs, action_coeffs }
        }
        TransitionKind::ContactGated { contact_radius, motion_gain } => {
            DynImpl::ContactGated { radius: contact_radius, gain: motion_gain }
        }
        TransitionKind::DiscreteTabular { .. } => DynImpl::Tabular(derive_tabular(spec)?),
    })
}

/// Parent matrix implied by derived tables; compared against
/// `spec.true_graph` when an [`super::Env`] is built.
pub(crate) fn derived_dyn_parents(spec: &EnvSpec, dyn_impl: &DynImpl) -> Vec<Vec<bool>> {
    let d_s = spec.d_s;
    let d_real = spec.d_real();
    let mut m = vec![vec![false; d_s]; d_s + 1];
    match dyn_impl {
        DynImpl::CopyChain { .. } => {
            m[d_s][0] = true;
            for i in 1..d_real {
                m[i - 1][i] = true;
            }
        }
        DynImpl::NoisyLinear { coeffs, action_coeffs } => {
            for (i, row) in coeffs.iter().enumerate() {
                for (j, _) in row {
                    m[*j][i] = true;
                }
                if action_coeffs[i].is_some() {
                    m[d_s][i] = true;
                }
            }
        }
        DynImpl::ContactGated { .. } => {
            m[0][0] = true;
            m[d_s][0] = true;
            m[0][1] = true;
            m[1][1] = true;
            m[d_s][1] = true;
        }
        DynImpl::Tabular(tab) => {
            for i in 0..d_s {
                for &p in &tab.parents[i] {
                    m[p][i] = true;
                }
            }
        }
    }
    for k in 0..spec.n_controllable_distractors {
        m[d_s][d_real + k] = true;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Env;
    use crate::rng::seeded_rng;

    #[test]
    fn builders_produce_valid_specs() {
        for seed in 0..5 {
            let mut c1 = CopyChainCfg::default();
            c1.seed = seed;
            Env::new(copy_chain(&c1)).unwrap();
            let mut c2 = NoisyLinearCfg::default();
            c2.seed = seed;
            Env::new(noisy_linear(&c2)).unwrap();
            let mut c3 = ContactGatedCfg::default();
            c3.seed = seed;
            Env::new(contact_gated(&c3)).unwrap();
            let mut c4 = DiscreteChainCfg::default();
            c4.seed = seed;
            Env::new(discrete_chain(&c4)).unwrap();
        }
    }

    #[test]
    fn same_seed_same_env_different_seed_different_tables() {
        let cfg = NoisyLinearCfg::default();
        let a = Env::new(noisy_linear(&cfg)).unwrap();
        let b = Env::new(noisy_linear(&cfg)).unwrap();
        let mut rng1 = seeded_rng(11);
        let mut rng2 = seeded_rng(11);
        let s = a.reset(&mut rng1);
        let s2 = b.reset(&mut rng2);
        assert_eq!(s, s2);
        let act = a.sample_uniform_action(&mut rng1);
        let act2 = b.sample_uniform_action(&mut rng2);
        let (n1, r1) = a.step(&s, &act, &mut rng1).unwrap();
        let (n2, r2) = b.step(&s2, &act2, &mut rng2).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(r1, r2);

        let mut other = cfg.clone();
        other.seed = 1;
        let spec_b = noisy_linear(&other);
        assert_ne!(noisy_linear(&cfg).true_graph.dyn_parents, spec_b.true_graph.dyn_parents);
    }

    #[test]
    fn copy_chain_moves_values_down_the_chain() {
        let cfg = CopyChainCfg { noise_std: 0.0, ..CopyChainCfg::default() };
        let env = Env::new(copy_chain(&cfg)).unwrap();
        let mut rng = seeded_rng(0);
        let s = env.reset(&mut rng);
        let a = vec![0.5; env.d_a()];
        let (next, _) = env.step(&s, &a, &mut rng).unwrap();
        assert!((next[0] - 0.5).abs() < 1e-12);
        assert_eq!(next[1], s[0]);
        assert_eq!(next[2], s[1]);
    }

    #[test]
    fn contact_gate_controls_block_motion() {
        let cfg = ContactGatedCfg { n_controllable: 0, n_uncontrollable: 0, ..Default::default() };
        let env = Env::new(contact_gated(&cfg)).unwrap();
        let mut rng = seeded_rng(0);
        // In contact: block follows.
        let (next, _) = env.step(&[0.1, 0.0], &[1.0], &mut rng).unwrap();
        assert!((next[0] - 0.3).abs() < 1e-12);
        assert!((next[1] - 0.2).abs() < 1e-12);
        // Out of contact: block frozen.
        let (next, _) = env.step(&[0.9, 0.0], &[1.0], &mut rng).unwrap();
        assert_eq!(next[1], 0.0);
        // Exactly on the boundary counts as contact.
        let (next, _) = env.step(&[0.2, 0.0], &[0.5], &mut rng).unwrap();
        assert!((next[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn controllable_distractor_is_a_pure_action_function() {
        let cfg = CopyChainCfg { d_a: 2, ..CopyChainCfg::default() };
        let env = Env::new(copy_chain(&cfg)).unwrap();
        let d_real = env.spec().d_real();
        let w = &env.spec().distractor_projection;
        let mut rng = seeded_rng(0);
        let s = env.reset(&mut rng);
        let a = vec![0.3, -0.8];
        let (next, _) = env.step(&s, &a, &mut rng).unwrap();
        let expect: f64 = (0..2).map(|d| w[d][0] * a[d]).sum();
        assert!((next[d_real] - expect.clamp(-1.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn tabular_flip_rate_matches_spec() {
        let cfg = DiscreteChainCfg { flip_prob: 0.25, ..Default::default() };
        let env = Env::new(discrete_chain(&cfg)).unwrap();
        let tab = env.tabular().unwrap();
        for cpt in &tab.cpts {
            for row in cpt.rows() {
                let mx = row.iter().cloned().fold(0.0, f64::max);
                assert!((mx - 0.75).abs() < 1e-12);
            }
        }
        // Roughly a quarter of transitions leave the permutation target.
        let mut rng = seeded_rng(5);
        let mut s = env.reset(&mut rng);
        let mut flips = 0;
        let n = 4000;
        for _ in 0..n {
            let a = env.sample_uniform_action(&mut rng);
            let levels: Vec<usize> = (0..env.d_s())
                .map(|i| super::super::nearest_level(&tab.supports[i], s[i]))
                .collect();
            let (next, _) = env.step(&s, &a, &mut rng).unwrap();
            // Variable 1's target is perm(s0 level); detect any deviation.
            let target_row = tab.cpts[1].row(levels[0]);
            let target_level = target_row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if super::super::nearest_level(&tab.supports[1], next[1]) != target_level {
                flips += 1;
            }
            s = next;
        }
        let rate = flips as f64 / n as f64;
        assert!((rate - 0.25).abs() < 0.03, "observed flip rate {rate}");
    }

    #[test]
    fn level_grid_is_inclusive_and_even() {
        let g = level_grid(-1.0, 1.0, 4);
        assert_eq!(g.len(), 4);
        assert!((g[0] + 1.0).abs() < 1e-15 && (g[3] - 1.0).abs() < 1e-15);
        assert!((g[1] + 1.0 / 3.0).abs() < 1e-12);
    }
}
