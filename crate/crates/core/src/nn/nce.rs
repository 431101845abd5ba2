//! Contrastive loss for score networks, with score and input-gradient
//! regularization.
//!
//! For one datapoint with label score `f0` and negative scores `f1..fN`, the
//! contrastive loss is
//!
//! ```text
//!   L = -log( exp(f0) / (exp(f0) + sum_n exp(fn)) )
//! ```
//!
//! computed with log-sum-exp stabilization. The regularized form adds, over
//! the label and every negative, `reg_score * f^2` and
//! `reg_grad * (df/dy)^2`, which flattens the score landscape in both value
//! and slope. Both penalty terms are differentiated exactly (up to the
//! measure-zero rectifier kinks) via the tangent machinery in
//! [`crate::nn::mlp`]; finite differences confirm the full parameter
//! gradient.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::mask::InputMask;
use crate::nn::mlp::MlpGrad;
use crate::nn::score::{ScoreNet, ScoreNetGrad};

/// Contrastive loss from raw scores. The loss is nonnegative and equals
/// `ln(N + 1)` when all scores are identical.
pub fn info_nce_from_scores(label_score: f64, neg_scores: &[f64]) -> Result<f64> {
    if neg_scores.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one negative".into()));
    }
    let m = neg_scores.iter().fold(label_score, |a, b| a.max(*b));
    let mut sum = (label_score - m).exp();
    for s in neg_scores {
        sum += (s - m).exp();
    }
    Ok(m + sum.ln() - label_score)
}

/// Contrastive loss of one datapoint under a score network.
pub fn info_nce_loss(
    net: &ScoreNet,
    label: f64,
    x: &[f64],
    mask: &InputMask,
    negatives: &[f64],
) -> Result<f64> {
    let c = net.trunk_feature(x, mask)?;
    let mut ys = Vec::with_capacity(negatives.len() + 1);
    ys.push(label);
    ys.extend_from_slice(negatives);
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("candidate labels contain NaN or infinity".into()));
    }
    let scores = net.score_candidates(&c.view(), &ys);
    info_nce_from_scores(scores[0], &scores[1..])
}

/// Regularization weights for the training loss.
#[derive(Clone, Copy, Debug)]
pub struct RegWeights {
    /// Weight on squared scores (label and negatives).
    pub reg_score: f64,
    /// Weight on squared score-derivatives w.r.t. the candidate value.
    pub reg_grad: f64,
}

/// How each scoring role masks the context.
pub enum RoleMasks<'a> {
    /// Every datapoint uses the same mask.
    Shared(&'a InputMask),
    /// Datapoint `b` uses `masks[b]`.
    PerDatapoint(&'a [InputMask]),
}

impl RoleMasks<'_> {
    pub(crate) fn mask(&self, b: usize) -> &InputMask {
        match self {
            RoleMasks::Shared(m) => m,
            RoleMasks::PerDatapoint(ms) => &ms[b],
        }
    }
}

/// One training batch: raw contexts, normalized labels, and per-datapoint
/// negatives.
pub struct NceBatch<'a> {
    pub contexts: &'a Array2<f64>,
    pub labels: &'a [f64],
    pub negatives: &'a Array2<f64>,
}

/// Loss decomposition of one batch (means over the batch).
#[derive(Clone, Debug)]
pub struct RegNceStats {
    /// Contrastive term per role.
    pub nce_per_role: Vec<f64>,
    /// Total squared-score penalty.
    pub reg_score: f64,
    /// Total squared-input-gradient penalty.
    pub reg_grad: f64,
}

impl RegNceStats {
    pub fn total(&self) -> f64 {
        self.nce_per_role.iter().sum::<f64>() + self.reg_score + self.reg_grad
    }
}

/// Evaluates the regularized contrastive loss without gradients.
pub fn eval_reg_nce(
    net: &ScoreNet,
    batch: &NceBatch,
    roles: &[RoleMasks],
    offsets: Option<&[Array2<f64>]>,
    reg: RegWeights,
) -> Result<RegNceStats> {
    run_reg_nce(net, batch, roles, offsets, reg, None)
}

/// Evaluates the regularized contrastive loss and accumulates exact parameter
/// gradients into `grad`.
pub fn reg_nce_grads(
    net: &ScoreNet,
    batch: &NceBatch,
    roles: &[RoleMasks],
    offsets: Option<&[Array2<f64>]>,
    reg: RegWeights,
    grad: &mut ScoreNetGrad,
) -> Result<RegNceStats> {
    run_reg_nce(net, batch, roles, offsets, reg, Some(grad))
}

fn run_reg_nce(
    net: &ScoreNet,
    batch: &NceBatch,
    roles: &[RoleMasks],
    offsets: Option<&[Array2<f64>]>,
    reg: RegWeights,
    mut grad: Option<&mut ScoreNetGrad>,
) -> Result<RegNceStats> {
    let b_n = batch.labels.len();
    let n_neg = batch.negatives.ncols();
    let n_cand = n_neg + 1;
    let n_roles = roles.len();
    let d = net.d_s() + net.d_a();

    if b_n == 0 || n_roles == 0 {
        return Err(Error::InvalidArgument("empty batch or role list".into()));
    }
    if n_neg == 0 {
        return Err(Error::InvalidArgument("contrastive loss needs at least one negative".into()));
    }
    if batch.contexts.dim() != (b_n, d) || batch.negatives.nrows() != b_n {
        return Err(Error::ShapeMismatch("batch arrays disagree on sizes".into()));
    }
    if let Some(offs) = offsets {
        if reg.reg_score != 0.0 || reg.reg_grad != 0.0 {
            return Err(Error::InvalidArgument(
                "score offsets are only supported with zero regularization".into(),
            ));
        }
        if offs.len() != n_roles || offs.iter().any(|o| o.dim() != (b_n, n_cand)) {
            return Err(Error::ShapeMismatch("offset arrays disagree with batch".into()));
        }
    }

    // Label-tower pass over every candidate of every datapoint.
    let mut ys = Array2::zeros((b_n * n_cand, 1));
    for b in 0..b_n {
        ys[(b * n_cand, 0)] = batch.labels[b];
        for n in 0..n_neg {
            ys[(b * n_cand + 1 + n, 0)] = batch.negatives[(b, n)];
        }
    }
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("candidate labels contain NaN or infinity".into()));
    }
    let tower = net.label_tower();
    let tower_cache = tower.forward_batch_cached(&ys);
    let h = tower_cache.acts.last().unwrap().clone();

    let need_tangent = reg.reg_grad != 0.0;
    let tangent = if need_tangent {
        Some(tower.tangent_batch(&tower_cache, &Array2::ones((b_n * n_cand, 1))))
    } else {
        None
    };
    let j = tangent.as_ref().map(|t| tower.tangent_out(t));

    // Trunk pass over every (datapoint, role) context.
    let enc = InputMask::encoded_len(net.d_s(), net.d_a());
    let mut ctx_rows = Array2::zeros((b_n * n_roles, enc));
    for b in 0..b_n {
        let x = batch.contexts.row(b);
        let xs = x.as_slice().expect("standard layout");
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context contains NaN or infinity".into()));
        }
        for (r, role) in roles.iter().enumerate() {
            let mut row = ctx_rows.row_mut(b * n_roles + r);
            role.mask(b).encode_into(xs, net.d_a(), row.as_slice_mut().unwrap());
        }
    }
    let trunk = net.trunk();
    let trunk_cache = trunk.forward_batch_cached(&ctx_rows);
    let feats = trunk_cache.acts.last().unwrap().clone();

    let f_w = net.feature_width();
    let inv_b = 1.0 / b_n as f64;
    let mut nce_per_role = vec![0.0; n_roles];
    let mut reg_score_sum = 0.0;
    let mut reg_grad_sum = 0.0;

    let mut cot_h = grad.is_some().then(|| Array2::<f64>::zeros((b_n * n_cand, f_w)));
    let mut cot_j = (grad.is_some() && need_tangent)
        .then(|| Array2::<f64>::zeros((b_n * n_cand, f_w)));
    let mut cot_feats = grad.is_some().then(|| Array2::<f64>::zeros((b_n * n_roles, f_w)));

    let mut scores = vec![0.0; n_cand];
    let mut grads_u = vec![0.0; n_cand];
    for b in 0..b_n {
        for r in 0..n_roles {
            let c_row = feats.row(b * n_roles + r);
            let c = c_row.as_slice().unwrap();
            for k in 0..n_cand {
                let h_row = h.row(b * n_cand + k);
                let mut s = dot(h_row.as_slice().unwrap(), c);
                if let Some(offs) = offsets {
                    s += offs[r][(b, k)];
                }
                scores[k] = s;
                if let Some(jm) = j {
                    grads_u[k] = dot(jm.row(b * n_cand + k).as_slice().unwrap(), c);
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let lse = m + sum_exp.ln();
            if !lse.is_finite() {
                return Err(Error::NonFinite("contrastive loss diverged".into()));
            }
            nce_per_role[r] += (lse - scores[0]) * inv_b;

            if reg.reg_score != 0.0 {
                reg_score_sum += reg.reg_score * scores.iter().map(|s| s * s).sum::<f64>() * inv_b;
            }
            if need_tangent {
                reg_grad_sum += reg.reg_grad * grads_u.iter().map(|u| u * u).sum::<f64>() * inv_b;
            }

            if grad.is_some() {
                let cot_h = cot_h.as_mut().unwrap();
                let cot_feats = cot_feats.as_mut().unwrap();
                let mut cot_c = Array1::<f64>::zeros(f_w);
                for k in 0..n_cand {
                    let p = (scores[k] - lse).exp();
                    let mut cot_s = (p - if k == 0 { 1.0 } else { 0.0 }) * inv_b;
                    cot_s += 2.0 * reg.reg_score * scores[k] * inv_b;
                    let h_row = h.row(b * n_cand + k);
                    axpy(cot_s, c, cot_h.row_mut(b * n_cand + k).as_slice_mut().unwrap());
                    axpy(cot_s, h_row.as_slice().unwrap(), cot_c.as_slice_mut().unwrap());
                    if need_tangent {
                        let cot_u = 2.0 * reg.reg_grad * grads_u[k] * inv_b;
                        let jm = j.unwrap();
                        axpy(
                            cot_u,
                            c,
                            cot_j.as_mut().unwrap().row_mut(b * n_cand + k).as_slice_mut().unwrap(),
                        );
                        axpy(
                            cot_u,
                            jm.row(b * n_cand + k).as_slice().unwrap(),
                            cot_c.as_slice_mut().unwrap(),
                        );
                    }
                }
                let mut out = cot_feats.row_mut(b * n_roles + r);
                out += &cot_c;
            }
        }
    }

    if let Some(g) = grad.as_mut() {
        tower.backward_batch(&tower_cache, cot_h.as_ref().unwrap(), &mut g.label);
        if need_tangent {
            tower.tangent_backward_batch(
                &tower_cache,
                tangent.as_ref().unwrap(),
                cot_j.as_ref().unwrap(),
                &mut g.label,
            );
        }
        trunk.backward_batch(&trunk_cache, cot_feats.as_ref().unwrap(), &mut g.trunk);
        check_finite_grad(&g.trunk)?;
        check_finite_grad(&g.label)?;
    }

    Ok(RegNceStats { nce_per_role, reg_score: reg_score_sum, reg_grad: reg_grad_sum })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

fn check_finite_grad(g: &MlpGrad) -> Result<()> {
    for l in g.layers.iter() {
        if l.w.iter().any(|v| !v.is_finite()) || l.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::score::ScoreNetConfig;
    use crate::oracle::finite_diff_grad;
    use crate::rng::seeded_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn equal_scores_give_log_n_plus_one() {
        let l = info_nce_from_scores(0.7, &[0.7, 0.7, 0.7]).unwrap();
        assert_abs_diff_eq!(l, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn separated_label_value_is_frozen() {
        // -ln(e / (e + 2)) = ln(e + 2) - 1.
        let l = info_nce_from_scores(1.0, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(l, 0.5514447139320511, epsilon = 1e-12);
        assert_abs_diff_eq!(l, (std::f64::consts::E + 2.0).ln() - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn stable_under_huge_scores() {
        let l = info_nce_from_scores(1e6, &[1e6 - 1.0, 1e6 - 2.0]).unwrap();
        assert!(l.is_finite() && l >= 0.0);
        let l2 = info_nce_from_scores(-1e6, &[1e6]).unwrap();
        assert!(l2.is_finite());
    }

    #[test]
    fn empty_negatives_rejected() {
        assert!(info_nce_from_scores(0.0, &[]).is_err());
    }

    fn tiny_net(seed: u64) -> ScoreNet {
        let mut rng = seeded_rng(seed);
        let cfg = ScoreNetConfig {
            trunk_widths: vec![4, 3],
            feature_width: 3,
            label_widths: vec![4],
        };
        ScoreNet::new(0, 2, 1, &cfg, &mut rng).unwrap()
    }

    fn random_batch(seed: u64, b: usize, n: usize) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
        let mut rng = seeded_rng(seed);
        let mut ctx = Array2::zeros((b, 3));
        for v in ctx.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let labels: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut negs = Array2::zeros((b, n));
        for v in negs.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        (ctx, labels, negs)
    }

    fn flat_params(net: &ScoreNet) -> Vec<f64> {
        let mut v = Vec::new();
        for l in net.trunk().layers() {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        for l in net.label_tower().layers() {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v
    }

    fn set_flat(net: &mut ScoreNet, flat: &[f64]) {
        let mut off = 0;
        for s in net.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
    }

    #[test]
    fn penalized_loss_gradient_matches_finite_differences() {
        let net = tiny_net(21);
        let (ctx, labels, negs) = random_batch(22, 3, 4);
        let full = InputMask::full(2);
        let masked: Vec<InputMask> =
            vec![InputMask::without_unit(2, 0).unwrap(), InputMask::without_unit(2, 2).unwrap(), InputMask::without_unit(2, 1).unwrap()];
        let roles = [RoleMasks::Shared(&full), RoleMasks::PerDatapoint(&masked)];
        // Larger-than-production weights so the penalty path is numerically visible.
        let reg = RegWeights { reg_score: 3e-3, reg_grad: 2e-3 };
        let batch = NceBatch { contexts: &ctx, labels: &labels, negatives: &negs };

        let mut grad = ScoreNetGrad::zeros_like(&net);
        let stats = reg_nce_grads(&net, &batch, &roles, None, reg, &mut grad).unwrap();
        assert!(stats.reg_grad > 0.0 && stats.reg_score > 0.0);

        let base = flat_params(&net);
        let mut probe = net.clone();
        let fd = finite_diff_grad(
            |p| {
                set_flat(&mut probe, p);
                eval_reg_nce(&probe, &batch, &roles, None, reg).unwrap().total()
            },
            &base,
            1e-5,
        );
        let mut flat = Vec::new();
        for s in grad.param_slices() {
            flat.extend_from_slice(s);
        }
        let num: f64 = flat.iter().zip(fd.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = fd.iter().map(|v| v * v).sum();
        let rel = (num / den.max(1e-300)).sqrt();
        assert!(rel < 1e-6, "relative gradient error {rel}");
    }

    #[test]
    fn offset_path_gradient_matches_finite_differences() {
        let net = tiny_net(31);
        let (ctx, labels, negs) = random_batch(32, 2, 5);
        let full = InputMask::full(2);
        let roles = [RoleMasks::Shared(&full)];
        let mut rng = seeded_rng(33);
        let mut offs = Array2::zeros((2, 6));
        for v in offs.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let offsets = [offs];
        let reg = RegWeights { reg_score: 0.0, reg_grad: 0.0 };
        let batch = NceBatch { contexts: &ctx, labels: &labels, negatives: &negs };

        let mut grad = ScoreNetGrad::zeros_like(&net);
        reg_nce_grads(&net, &batch, &roles, Some(&offsets), reg, &mut grad).unwrap();

        let base = flat_params(&net);
        let mut probe = net.clone();
        let fd = finite_diff_grad(
            |p| {
                set_flat(&mut probe, p);
                eval_reg_nce(&probe, &batch, &roles, Some(&offsets), reg).unwrap().total()
            },
            &base,
            1e-5,
        );
        let mut flat = Vec::new();
        for s in grad.param_slices() {
            flat.extend_from_slice(s);
        }
        let num: f64 = flat.iter().zip(fd.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = fd.iter().map(|v| v * v).sum();
        assert!((num / den.max(1e-300)).sqrt() < 1e-6);
    }

    #[test]
    fn offsets_with_regularization_rejected() {
        let net = tiny_net(41);
        let (ctx, labels, negs) = random_batch(42, 2, 3);
        let full = InputMask::full(2);
        let roles = [RoleMasks::Shared(&full)];
        let offsets = [Array2::zeros((2, 4))];
        let batch = NceBatch { contexts: &ctx, labels: &labels, negatives: &negs };
        let reg = RegWeights { reg_score: 1e-6, reg_grad: 0.0 };
        assert!(eval_reg_nce(&net, &batch, &roles, Some(&offsets), reg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn loss_is_nonnegative(
            label in -50.0f64..50.0,
            negs in proptest::collection::vec(-50.0f64..50.0, 1..20),
        ) {
            let l = info_nce_from_scores(label, &negs).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!(l.is_finite());
        }
    }
}
