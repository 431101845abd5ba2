//! Reference computations used to check the learned estimators: compensated
//! summation, finite-difference gradients, and exact conditional mutual
//! information for discrete tabular environments.

use ndarray::Array2;

use crate::env::Env;
use crate::error::{Error, Result};
use crate::exec;

/// Kahan–Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = p[k];
        p[k] = orig + h;
        let up = f(&p);
        p[k] = orig - h;
        let down = f(&p);
        p[k] = orig;
        g[k] = (up - down) / (2.0 * h);
    }
    g
}

/// Behavior policy assumed by the exact enumeration: a distribution over the
/// environment's action grid.
#[derive(Clone, Debug)]
pub enum OraclePolicy {
    Uniform,
    /// Unnormalized nonnegative weights, one per action level.
    Weighted(Vec<f64>),
}

/// Refuse enumerations beyond this many (state, action) pairs.
pub const ORACLE_ENTRY_LIMIT: usize = 10_000_000;

struct Enumeration<'a> {
    env: &'a Env,
    sizes: Vec<usize>,
    n_states: usize,
    n_actions: usize,
    policy: Vec<f64>,
    /// Average of the state distribution over steps `0..horizon`, starting
    /// uniform, matching uniform resets plus the behavior policy.
    pbar: Vec<f64>,
}

impl<'a> Enumeration<'a> {
    fn new(env: &'a Env, policy: &OraclePolicy) -> Result<Self> {
        let tab = env.tabular().ok_or_else(|| {
            Error::InvalidArgument("exact enumeration requires a discrete-tabular environment".into())
        })?;
        let sizes: Vec<usize> = tab.supports.iter().map(|s| s.len()).collect();
        let n_actions = tab.action_levels.len();
        let mut entries = n_actions as u128;
        for &k in &sizes {
            entries = entries.saturating_mul(k as u128);
        }
        if entries > ORACLE_ENTRY_LIMIT as u128 {
            return Err(Error::OracleTooLarge { entries, limit: ORACLE_ENTRY_LIMIT as u128 });
        }
        let n_states: usize = sizes.iter().product();
        let policy = match policy {
            OraclePolicy::Uniform => vec![1.0 / n_actions as f64; n_actions],
            OraclePolicy::Weighted(w) => {
                if w.len() != n_actions {
                    return Err(Error::InvalidArgument(format!(
                        "policy lists {} weights for {} action levels",
                        w.len(),
                        n_actions
                    )));
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidArgument("policy weights must be nonnegative".into()));
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::InvalidArgument("policy weights sum to zero".into()));
                }
                w.iter().map(|v| v / total).collect()
            }
        };
        let mut e = Enumeration { env, sizes, n_states, n_actions, policy, pbar: vec![] };
        e.pbar = e.t_averaged_distribution();
        Ok(e)
    }

    fn decode(&self, mut idx: usize, out: &mut [usize]) {
        for i in (0..self.sizes.len()).rev() {
            out[i] = idx % self.sizes[i];
            idx /= self.sizes[i];
        }
    }

    fn encode(&self, levels: &[usize]) -> usize {
        let mut idx = 0;
        for (i, &l) in levels.iter().enumerate() {
            idx = idx * self.sizes[i] + l;
        }
        idx
    }

    /// Per-variable next-level distributions given `(s, a)` as level indices.
    fn next_factors(&self, units: &[usize]) -> Vec<&[f64]> {
        let tab = self.env.tabular().unwrap();
        (0..self.sizes.len())
            .map(|i| {
                tab.cpts[i]
                    .row(tab.parent_config(i, units))
                    .to_slice()
                    .expect("CPT rows are contiguous")
            })
            .collect()
    }

    fn t_averaged_distribution(&self) -> Vec<f64> {
        // Spread the factored product over the joint next-state table.
        fn expand(factors: &[&[f64]], idx: usize, mass: f64, next: &mut [KahanSum]) {
            match factors {
                [] => next[idx].add(mass),
                [head, rest @ ..] => {
                    for (lv, pr) in head.iter().enumerate() {
                        if *pr > 0.0 {
                            expand(rest, idx * head.len() + lv, mass * pr, next);
                        }
                    }
                }
            }
        }

        let d_s = self.sizes.len();
        let mut p = vec![1.0 / self.n_states as f64; self.n_states];
        let mut avg = vec![KahanSum::new(); self.n_states];
        let horizon = self.env.horizon();
        let mut units = vec![0usize; d_s + 1];
        for t in 0..horizon {
            for (s, acc) in p.iter().zip(avg.iter_mut()) {
                acc.add(*s / horizon as f64);
            }
            if t + 1 == horizon {
                break;
            }
            let mut next = vec![KahanSum::new(); self.n_states];
            for s_idx in 0..self.n_states {
                if p[s_idx] == 0.0 {
                    continue;
                }
                self.decode(s_idx, &mut units[..d_s]);
                for a in 0..self.n_actions {
                    let w = p[s_idx] * self.policy[a];
                    if w == 0.0 {
                        continue;
                    }
                    units[d_s] = a;
                    let factors = self.next_factors(&units);
                    expand(&factors, 0, w, &mut next);
                }
            }
            p = next.iter().map(|k| k.value()).collect();
        }
        avg.iter().map(|k| k.value()).collect()
    }

    /// Exact conditional mutual information between input unit `j` (state
    /// variable, or the action when `j == d_s`) and next-step variable `i`,
    /// under the t-averaged state distribution and the behavior policy.
    fn pair(&self, child: usize, unit: usize) -> f64 {
        let tab = self.env.tabular().unwrap();
        let d_s = self.sizes.len();
        let k_child = self.sizes[child];
        let mut total = KahanSum::new();
        let mut units = vec![0usize; d_s + 1];
        let mut q = vec![0.0f64; k_child];
        for s_idx in 0..self.n_states {
            let ps = self.pbar[s_idx];
            if ps == 0.0 {
                continue;
            }
            self.decode(s_idx, &mut units[..d_s]);
            if unit == d_s {
                // Condition away the action: q(v | s) mixes over the policy.
                q.fill(0.0);
                for a in 0..self.n_actions {
                    units[d_s] = a;
                    let row = tab.cpts[child].row(tab.parent_config(child, &units));
                    for (qv, pv) in q.iter_mut().zip(row.iter()) {
                        *qv += self.policy[a] * pv;
                    }
                }
                for a in 0..self.n_actions {
                    let w = ps * self.policy[a];
                    if w == 0.0 {
                        continue;
                    }
                    units[d_s] = a;
                    let row = tab.cpts[child].row(tab.parent_config(child, &units));
                    for (pv, qv) in row.iter().zip(q.iter()) {
                        if *pv > 0.0 {
                            total.add(w * pv * (pv / qv).ln());
                        }
                    }
                }
            } else {
                // Weights of unit `j`'s levels given the other variables.
                let own = units[unit];
                let mut mix = KahanSum::new();
                for u in 0..self.sizes[unit] {
                    units[unit] = u;
                    mix.add(self.pbar[self.encode(&units[..d_s])]);
                }
                let mix = mix.value();
                for a in 0..self.n_actions {
                    let w = ps * self.policy[a];
                    if w == 0.0 {
                        continue;
                    }
                    units[d_s] = a;
                    q.fill(0.0);
                    for u in 0..self.sizes[unit] {
                        units[unit] = u;
                        let m = self.pbar[self.encode(&units[..d_s])];
                        if m == 0.0 {
                            continue;
                        }
                        let row = tab.cpts[child].row(tab.parent_config(child, &units));
                        for (qv, pv) in q.iter_mut().zip(row.iter()) {
                            *qv += m / mix * pv;
                        }
                    }
                    units[unit] = own;
                    let row = tab.cpts[child].row(tab.parent_config(child, &units));
                    for (pv, qv) in row.iter().zip(q.iter()) {
                        if *pv > 0.0 {
                            total.add(w * pv * (pv / qv).ln());
                        }
                    }
                }
                units[unit] = own;
            }
        }
        total.value()
    }
}

/// Exact CMI for one (input unit, next variable) pair. `unit == d_S` denotes
/// the action. Enumeration covers every (state, action) pair and is guarded
/// by [`ORACLE_ENTRY_LIMIT`].
pub fn oracle_cmi(env: &Env, policy: &OraclePolicy, child: usize, unit: usize) -> Result<f64> {
    let d_s = env.d_s();
    if child >= d_s || unit > d_s {
        return Err(Error::InvalidArgument(format!("pair ({unit} -> {child}) out of range")));
    }
    let e = Enumeration::new(env, policy)?;
    Ok(e.pair(child, unit))
}

/// Full matrix of exact CMI values, `(d_S + 1)` input units by `d_S` next
/// variables, with the action in the last row.
pub fn oracle_cmi_matrix(env: &Env, policy: &OraclePolicy) -> Result<Array2<f64>> {
    let d_s = env.d_s();
    let e = Enumeration::new(env, policy)?;
    let flat = exec::map_indexed((d_s + 1) * d_s, |k| e.pair(k % d_s, k / d_s));
    Ok(Array2::from_shape_vec((d_s + 1, d_s), flat).expect("shape fixed above"))
}

/// t-averaged joint state distribution used by the oracle, indexed by the
/// mixed-radix encoding of level indices (variable 0 most significant).
pub fn t_averaged_state_distribution(env: &Env, policy: &OraclePolicy) -> Result<Vec<f64>> {
    Ok(Enumeration::new(env, policy)?.pbar)
}
