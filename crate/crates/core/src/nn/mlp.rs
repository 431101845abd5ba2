//! Dense multi-layer perceptrons with hand-rolled differentiation.
//!
//! Besides the usual forward/backward passes, [`Mlp`] supports a forward-mode
//! tangent pass (Jacobian-vector product w.r.t. the input) and the reverse
//! pass *through* that tangent. The latter is what makes the input-gradient
//! penalty exactly differentiable: for rectifier networks the activation
//! pattern is piecewise constant in the parameters, so holding it fixed gives
//! the almost-everywhere-exact derivative, which finite differences confirm.
//!
//! Convention: hidden activations are rectified linear with the one-sided
//! derivative at the kink taken from the right (`pre >= 0` counts as active);
//! the output layer is the identity.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dense layer, `out = w @ x + b`, with `w` of shape `(out, in)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Fully-connected network with rectified hidden layers and identity output.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Dense>,
}

/// Parameter-shaped gradient accumulator for an [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_batch_cached`].
///
/// `acts[0]` is the input, `acts[k]` the post-activation output of layer `k`,
/// `acts[L]` the network output. `masks[k]` holds the 0/1 rectifier pattern of
/// hidden layer `k` (right-derivative convention).
pub struct MlpCache {
    pub acts: Vec<Array2<f64>>,
    pub masks: Vec<Array2<f64>>,
}

/// Tangents recorded by [`Mlp::tangent_batch`]; `t_acts` mirrors `acts`.
pub struct TangentCache {
    pub t_acts: Vec<Array2<f64>>,
}

impl Mlp {
    /// Builds a network with the given widths `[in, hidden.., out]`.
    ///
    /// Weights and biases are drawn uniformly from `(-a, a)` with
    /// `a = sqrt(1 / fan_in)`.
    pub fn new(widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "network needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|w| *w == 0) {
            return Err(Error::InvalidArgument(format!("zero layer width in {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for k in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[k], widths[k + 1]);
            let a = (1.0 / fan_in as f64).sqrt();
            let mut w = Array2::zeros((fan_out, fan_in));
            for v in w.iter_mut() {
                *v = rng.gen_range(-a..a);
            }
            let mut b = Array1::zeros(fan_out);
            for v in b.iter_mut() {
                *v = rng.gen_range(-a..a);
            }
            layers.push(Dense { w, b });
        }
        Ok(Mlp { widths: widths.to_vec(), layers })
    }

    /// Rebuilds a network from explicit layer parameters.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("empty layer list".into()));
        }
        let mut widths = vec![layers[0].w.ncols()];
        for (k, l) in layers.iter().enumerate() {
            if l.w.ncols() != widths[k] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k} expects input width {}, got {}",
                    widths[k],
                    l.w.ncols()
                )));
            }
            if l.b.len() != l.w.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k} bias length {} does not match {} rows",
                    l.b.len(),
                    l.w.nrows()
                )));
            }
            widths.push(l.w.nrows());
        }
        Ok(Mlp { widths, layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Mutable flat views of every parameter, layer by layer (weights then bias).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in self.layers.iter_mut() {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} != network input width {}",
                x.len(),
                self.input_dim()
            )));
        }
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        Ok(self.forward_batch(&xm).row(0).to_vec())
    }

    /// Batched forward pass; rows are independent datapoints.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = self.layers.len();
        let mut a = to_standard(x);
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = matmul_nt(&a, &l.w);
            z += &l.b;
            if k + 1 < n {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Forward pass that records activations and rectifier patterns.
    pub fn forward_batch_cached(&self, x: &Array2<f64>) -> MlpCache {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut masks = Vec::with_capacity(n.saturating_sub(1));
        acts.push(to_standard(x));
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = matmul_nt(&acts[k], &l.w);
            z += &l.b;
            if k + 1 < n {
                masks.push(z.mapv(|v| if v >= 0.0 { 1.0 } else { 0.0 }));
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        MlpCache { acts, masks }
    }

    /// Reverse pass. Accumulates parameter gradients of `sum(cot_out * out)`
    /// into `grad` and returns the cotangent w.r.t. the input rows.
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        cot_out: &Array2<f64>,
        grad: &mut MlpGrad,
    ) -> Array2<f64> {
        let n = self.layers.len();
        let mut cot = to_standard(cot_out);
        for k in (0..n).rev() {
            general_mat_mul(1.0, &cot.t(), &cache.acts[k], 1.0, &mut grad.layers[k].w);
            grad.layers[k].b += &cot.sum_axis(Axis(0));
            let mut cot_prev = matmul_nn(&cot, &self.layers[k].w);
            if k > 0 {
                cot_prev *= &cache.masks[k - 1];
            }
            cot = cot_prev;
        }
        cot
    }

    /// Forward-mode pass: per-row Jacobian-vector product `J(x_row) @ t_row`
    /// under the activation pattern recorded in `cache`.
    pub fn tangent_batch(&self, cache: &MlpCache, tan_in: &Array2<f64>) -> TangentCache {
        let n = self.layers.len();
        let mut t_acts = Vec::with_capacity(n + 1);
        t_acts.push(to_standard(tan_in));
        for (k, l) in self.layers.iter().enumerate() {
            let mut tz = matmul_nt(&t_acts[k], &l.w);
            if k + 1 < n {
                tz *= &cache.masks[k];
            }
            t_acts.push(tz);
        }
        TangentCache { t_acts }
    }

    /// Output rows of a tangent pass.
    pub fn tangent_out<'a>(&self, tangent: &'a TangentCache) -> &'a Array2<f64> {
        tangent.t_acts.last().unwrap()
    }

    /// Reverse pass through a tangent computation.
    ///
    /// Accumulates into `grad` the parameter gradient of
    /// `sum(cot_tan_out * tangent_out)` with the activation pattern held
    /// fixed. Biases get no contribution: they enter only through the
    /// pattern, whose parameter derivative vanishes almost everywhere.
    pub fn tangent_backward_batch(
        &self,
        cache: &MlpCache,
        tangent: &TangentCache,
        cot_tan_out: &Array2<f64>,
        grad: &mut MlpGrad,
    ) {
        let n = self.layers.len();
        let mut r = to_standard(cot_tan_out);
        for k in (0..n).rev() {
            general_mat_mul(1.0, &r.t(), &tangent.t_acts[k], 1.0, &mut grad.layers[k].w);
            if k > 0 {
                let mut r_prev = matmul_nn(&r, &self.layers[k].w);
                r_prev *= &cache.masks[k - 1];
                r = r_prev;
            }
        }
    }
}

/// `a @ b.T` into a fresh row-major array. `ndarray`'s `dot` hands back
/// column-major storage when the contraction width is 1, which would break
/// the row-slice access used throughout; allocating the output explicitly
/// pins the layout.
fn matmul_nt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    general_mat_mul(1.0, a, &b.t(), 0.0, &mut out);
    out
}

/// `a @ b` into a fresh row-major array; see [`matmul_nt`].
fn matmul_nn(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

fn to_standard(a: &Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a.clone()
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// On-disk form of an [`Mlp`]: full widths and parameters as nested decimal
/// arrays.
#[derive(Serialize, Deserialize)]
pub struct MlpCheckpoint {
    widths: Vec<usize>,
    layers: Vec<MlpLayerJson>,
}

#[derive(Serialize, Deserialize)]
struct MlpLayerJson {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Mlp {
    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            widths: self.widths.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| MlpLayerJson {
                    w: l.w.rows().into_iter().map(|r| r.to_vec()).collect(),
                    b: l.b.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(chk: &MlpCheckpoint) -> Result<Self> {
        let mut layers = Vec::with_capacity(chk.layers.len());
        for l in &chk.layers {
            let rows = l.w.len();
            let cols = l.w.first().map(|r| r.len()).unwrap_or(0);
            if rows == 0 || cols == 0 || l.w.iter().any(|r| r.len() != cols) {
                return Err(Error::Checkpoint("ragged or empty weight matrix".into()));
            }
            let flat: Vec<f64> = l.w.iter().flatten().cloned().collect();
            layers.push(Dense {
                w: Array2::from_shape_vec((rows, cols), flat).unwrap(),
                b: Array1::from(l.b.clone()),
            });
        }
        let net = Mlp::from_layers(layers)?;
        if net.widths() != chk.widths.as_slice() {
            return Err(Error::Checkpoint("widths do not match parameters".into()));
        }
        Ok(net)
    }
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrad {
            layers: net
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.dim()), b: Array1::zeros(l.b.len()) })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in self.layers.iter_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in self.layers.iter() {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.layers.iter_mut() {
            l.w.mapv_inplace(|v| v * s);
            l.b.mapv_inplace(|v| v * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for l in self.layers.iter() {
            sq += l.w.iter().map(|v| v * v).sum::<f64>();
            sq += l.b.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_grad;
    use crate::rng::seeded_rng;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn flat_params(net: &Mlp) -> Vec<f64> {
        let mut v = Vec::new();
        for l in net.layers() {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v
    }

    fn set_flat_params(net: &mut Mlp, flat: &[f64]) {
        let mut off = 0;
        for s in net.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        assert_eq!(off, flat.len());
    }

    #[test]
    fn forward_matches_manual_linear_case() {
        // Single layer: out = w x + b.
        let net = Mlp::from_layers(vec![Dense {
            w: arr2(&[[2.0, -1.0], [0.5, 0.5]]),
            b: Array1::from(vec![1.0, -1.0]),
        }])
        .unwrap();
        let y = net.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(y, vec![3.0, 2.5]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = seeded_rng(0);
        assert!(Mlp::new(&[4], &mut rng).is_err());
        assert!(Mlp::new(&[4, 0, 2], &mut rng).is_err());
        let net = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = seeded_rng(9);
        let net = Mlp::new(&[16, 8, 4], &mut rng).unwrap();
        let a0 = (1.0f64 / 16.0).sqrt();
        assert!(net.layers()[0].w.iter().all(|v| v.abs() < a0));
        let a1 = (1.0f64 / 8.0).sqrt();
        assert!(net.layers()[1].w.iter().all(|v| v.abs() < a1));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded_rng(42);
        let net = Mlp::new(&[3, 5, 4, 2], &mut rng).unwrap();
        let x = arr2(&[[0.3, -0.7, 0.9], [-0.2, 0.4, 0.11]]);
        // Scalar objective: weighted sum of outputs.
        let wsum = arr2(&[[1.0, -2.0], [0.5, 1.5]]);

        let cache = net.forward_batch_cached(&x);
        let mut grad = MlpGrad::zeros_like(&net);
        let cot_in = net.backward_batch(&cache, &wsum, &mut grad);

        let base = flat_params(&net);
        let mut probe = net.clone();
        let fd = finite_diff_grad(
            |p| {
                set_flat_params(&mut probe, p);
                (&probe.forward_batch(&x) * &wsum).sum()
            },
            &base,
            1e-5,
        );
        let mut flat_grad = Vec::new();
        for s in grad.param_slices() {
            flat_grad.extend_from_slice(s);
        }
        for (g, f) in flat_grad.iter().zip(fd.iter()) {
            assert_abs_diff_eq!(g, f, epsilon = 1e-6);
        }

        // Input cotangent against finite differences over the input.
        let x_flat: Vec<f64> = x.iter().cloned().collect();
        let fd_in = finite_diff_grad(
            |p| {
                let xm = Array2::from_shape_vec((2, 3), p.to_vec()).unwrap();
                (&net.forward_batch(&xm) * &wsum).sum()
            },
            &x_flat,
            1e-5,
        );
        for (g, f) in cot_in.iter().zip(fd_in.iter()) {
            assert_abs_diff_eq!(g, f, epsilon = 1e-6);
        }
    }

    #[test]
    fn tangent_matches_finite_difference_directional_derivative() {
        let mut rng = seeded_rng(7);
        let net = Mlp::new(&[2, 6, 3], &mut rng).unwrap();
        let x = arr2(&[[0.4, -0.3]]);
        let v = arr2(&[[1.0, 0.0]]);
        let cache = net.forward_batch_cached(&x);
        let tangent = net.tangent_batch(&cache, &v);
        let jv = net.tangent_out(&tangent).row(0).to_owned();

        let h = 1e-6;
        let xp = &x + &(&v * h);
        let xm = &x - &(&v * h);
        let fd = (&net.forward_batch(&xp) - &net.forward_batch(&xm)) / (2.0 * h);
        for (a, b) in jv.iter().zip(fd.row(0).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn tangent_backward_matches_finite_differences() {
        // Objective: u = sum(cot * (J(x) v)); differentiate w.r.t. parameters.
        let mut rng = seeded_rng(11);
        let net = Mlp::new(&[2, 5, 4, 3], &mut rng).unwrap();
        let x = arr2(&[[0.37, -0.21], [0.05, 0.83]]);
        let v = arr2(&[[1.0, 0.5], [-0.3, 1.0]]);
        let cot = arr2(&[[0.7, -1.1, 0.4], [0.2, 0.9, -0.5]]);

        let cache = net.forward_batch_cached(&x);
        let tangent = net.tangent_batch(&cache, &v);
        let mut grad = MlpGrad::zeros_like(&net);
        net.tangent_backward_batch(&cache, &tangent, &cot, &mut grad);

        let base = flat_params(&net);
        let mut probe = net.clone();
        let fd = finite_diff_grad(
            |p| {
                set_flat_params(&mut probe, p);
                let c = probe.forward_batch_cached(&x);
                let t = probe.tangent_batch(&c, &v);
                (probe.tangent_out(&t) * &cot).sum()
            },
            &base,
            1e-5,
        );
        let mut flat_grad = Vec::new();
        for s in grad.param_slices() {
            flat_grad.extend_from_slice(s);
        }
        let max_err = flat_grad
            .iter()
            .zip(fd.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-6, "max error {max_err}");
    }

    #[test]
    fn grad_clip_bounds_norm() {
        let mut rng = seeded_rng(3);
        let net = Mlp::new(&[4, 4, 2], &mut rng).unwrap();
        let mut g = MlpGrad::zeros_like(&net);
        for s in g.layers.iter_mut() {
            s.w.fill(3.0);
            s.b.fill(-2.0);
        }
        g.clip_global_norm(1.0);
        assert_abs_diff_eq!(g.global_norm(), 1.0, epsilon = 1e-12);
    }
}
