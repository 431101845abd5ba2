//! Two-tower score networks.
//!
//! A score network assigns a scalar compatibility score to a candidate next
//! value `y` of its owner variable given a masked context `[s, a]`:
//!
//! ```text
//!   score(y; x, mask) = trunk([mask ⊙ x, mask bits]) · label_tower(y)
//! ```
//!
//! The trunk embeds the masked context, the label tower embeds the scalar
//! candidate, and the score is their dot product. Masking happens before the
//! trunk, so the score is exactly invariant to gated inputs; the appended
//! keep-bits tell the trunk *which* units were gated, so conditioning on
//! "variable unknown" never collides with conditioning on "variable equals
//! zero". One network serves both the full-context role and every
//! leave-one-out role.

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mask::InputMask;
use crate::nn::mlp::{Dense, Mlp, MlpGrad};

/// Tower widths. `trunk_widths` and `label_widths` list hidden layers only;
/// both towers end in a linear layer of `feature_width` units.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoreNetConfig {
    pub trunk_widths: Vec<usize>,
    pub feature_width: usize,
    pub label_widths: Vec<usize>,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        ScoreNetConfig { trunk_widths: vec![128, 128], feature_width: 128, label_widths: vec![128] }
    }
}

impl ScoreNetConfig {
    /// Small configuration for laptop-scale runs and tests.
    pub fn desk() -> Self {
        ScoreNetConfig { trunk_widths: vec![32, 32], feature_width: 32, label_widths: vec![32] }
    }
}

/// Per-variable two-tower energy model.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    owner_variable: usize,
    d_s: usize,
    d_a: usize,
    trunk: Mlp,
    label_tower: Mlp,
}

/// Parameter-shaped gradients for a [`ScoreNet`].
pub struct ScoreNetGrad {
    pub trunk: MlpGrad,
    pub label: MlpGrad,
}

impl ScoreNet {
    pub fn new(
        owner_variable: usize,
        d_s: usize,
        d_a: usize,
        cfg: &ScoreNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut trunk_widths = vec![InputMask::encoded_len(d_s, d_a)];
        trunk_widths.extend_from_slice(&cfg.trunk_widths);
        trunk_widths.push(cfg.feature_width);
        let mut label_widths = vec![1];
        label_widths.extend_from_slice(&cfg.label_widths);
        label_widths.push(cfg.feature_width);
        Ok(ScoreNet {
            owner_variable,
            d_s,
            d_a,
            trunk: Mlp::new(&trunk_widths, rng)?,
            label_tower: Mlp::new(&label_widths, rng)?,
        })
    }

    pub fn owner_variable(&self) -> usize {
        self.owner_variable
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn feature_width(&self) -> usize {
        self.trunk.output_dim()
    }

    pub(crate) fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub(crate) fn label_tower(&self) -> &Mlp {
        &self.label_tower
    }

    pub fn n_params(&self) -> usize {
        self.trunk.n_params() + self.label_tower.n_params()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.param_slices_mut();
        v.extend(self.label_tower.param_slices_mut());
        v
    }

    fn check_context(&self, x: &[f64], mask: &InputMask) -> Result<()> {
        if x.len() != self.d_s + self.d_a {
            return Err(Error::ShapeMismatch(format!(
                "context length {} != d_s + d_a = {}",
                x.len(),
                self.d_s + self.d_a
            )));
        }
        if mask.n_state_vars() != self.d_s {
            return Err(Error::ShapeMismatch(format!(
                "mask covers {} state variables, network expects {}",
                mask.n_state_vars(),
                self.d_s
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context contains NaN or infinity".into()));
        }
        Ok(())
    }

    /// Trunk embedding of the masked context.
    pub fn trunk_feature(&self, x: &[f64], mask: &InputMask) -> Result<Array1<f64>> {
        self.check_context(x, mask)?;
        let encoded = mask.encode(x, self.d_a);
        let xm = Array2::from_shape_vec((1, encoded.len()), encoded).unwrap();
        Ok(self.trunk.forward_batch(&xm).row(0).to_owned())
    }

    /// Label-tower embeddings for a batch of candidate values.
    pub fn tower_features(&self, ys: &[f64]) -> Array2<f64> {
        let col = Array2::from_shape_vec((ys.len(), 1), ys.to_vec()).unwrap();
        self.label_tower.forward_batch(&col)
    }

    /// Scores of candidates against a fixed trunk feature.
    pub fn score_candidates(&self, feature: &ArrayView1<f64>, ys: &[f64]) -> Vec<f64> {
        let h = self.tower_features(ys);
        h.dot(feature).to_vec()
    }

    /// Score of one candidate `y` under the masked context.
    pub fn score(&self, y: f64, x: &[f64], mask: &InputMask) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::NonFinite("candidate label is not finite".into()));
        }
        let c = self.trunk_feature(x, mask)?;
        Ok(self.score_candidates(&c.view(), &[y])[0])
    }

    /// Derivative of the score w.r.t. the candidate value `y`.
    ///
    /// Only the label tower depends on `y`; the trunk feature is a constant
    /// here. At rectifier kinks the right-derivative is used.
    pub fn score_input_grad(&self, y: f64, x: &[f64], mask: &InputMask) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::NonFinite("candidate label is not finite".into()));
        }
        let c = self.trunk_feature(x, mask)?;
        let col = Array2::from_shape_vec((1, 1), vec![y]).unwrap();
        let cache = self.label_tower.forward_batch_cached(&col);
        let ones = Array2::ones((1, 1));
        let tangent = self.label_tower.tangent_batch(&cache, &ones);
        Ok(self.label_tower.tangent_out(&tangent).row(0).dot(&c))
    }
}

impl ScoreNetGrad {
    pub fn zeros_like(net: &ScoreNet) -> Self {
        ScoreNetGrad {
            trunk: MlpGrad::zeros_like(&net.trunk),
            label: MlpGrad::zeros_like(&net.label_tower),
        }
    }

    pub fn fill_zero(&mut self) {
        self.trunk.fill_zero();
        self.label.fill_zero();
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.param_slices();
        v.extend(self.label.param_slices());
        v
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerJson {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TowerPairJson<T> {
    trunk: T,
    label: T,
}

/// On-disk form of a [`ScoreNet`]: full tower widths (including input and
/// feature layers) and parameters as nested decimal arrays.
#[derive(Serialize, Deserialize)]
pub struct ScoreNetCheckpoint {
    version: u32,
    owner_variable: usize,
    widths: TowerPairJson<Vec<usize>>,
    parameters: TowerPairJson<Vec<LayerJson>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

fn layers_to_json(net: &Mlp) -> Vec<LayerJson> {
    net.layers()
        .iter()
        .map(|l| LayerJson {
            w: l.w.rows().into_iter().map(|r| r.to_vec()).collect(),
            b: l.b.to_vec(),
        })
        .collect()
}

fn layers_from_json(layers: &[LayerJson]) -> Result<Mlp> {
    let mut parsed = Vec::with_capacity(layers.len());
    for l in layers {
        let rows = l.w.len();
        let cols = l.w.first().map(|r| r.len()).unwrap_or(0);
        if rows == 0 || cols == 0 || l.w.iter().any(|r| r.len() != cols) {
            return Err(Error::Checkpoint("ragged or empty weight matrix".into()));
        }
        let flat: Vec<f64> = l.w.iter().flatten().cloned().collect();
        parsed.push(Dense {
            w: Array2::from_shape_vec((rows, cols), flat).unwrap(),
            b: Array1::from(l.b.clone()),
        });
    }
    Mlp::from_layers(parsed)
}

impl ScoreNet {
    pub fn to_checkpoint(&self) -> ScoreNetCheckpoint {
        ScoreNetCheckpoint {
            version: CHECKPOINT_VERSION,
            owner_variable: self.owner_variable,
            widths: TowerPairJson {
                trunk: self.trunk.widths().to_vec(),
                label: self.label_tower.widths().to_vec(),
            },
            parameters: TowerPairJson {
                trunk: layers_to_json(&self.trunk),
                label: layers_to_json(&self.label_tower),
            },
        }
    }

    /// Rebuilds a network from a checkpoint. The context split `(d_s, d_a)`
    /// comes from the surrounding manifest; it must match the stored trunk
    /// input width.
    pub fn from_checkpoint(chk: &ScoreNetCheckpoint, d_s: usize, d_a: usize) -> Result<Self> {
        if chk.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                chk.version
            )));
        }
        let trunk = layers_from_json(&chk.parameters.trunk)?;
        let label_tower = layers_from_json(&chk.parameters.label)?;
        if trunk.widths() != chk.widths.trunk.as_slice()
            || label_tower.widths() != chk.widths.label.as_slice()
        {
            return Err(Error::Checkpoint("widths do not match parameters".into()));
        }
        if trunk.input_dim() != InputMask::encoded_len(d_s, d_a) {
            return Err(Error::Checkpoint(format!(
                "trunk input width {} != encoded context width {}",
                trunk.input_dim(),
                InputMask::encoded_len(d_s, d_a)
            )));
        }
        if label_tower.input_dim() != 1 {
            return Err(Error::Checkpoint("label tower must take a scalar input".into()));
        }
        if trunk.output_dim() != label_tower.output_dim() {
            return Err(Error::Checkpoint("tower feature widths differ".into()));
        }
        Ok(ScoreNet { owner_variable: chk.owner_variable, d_s, d_a, trunk, label_tower })
    }
}
