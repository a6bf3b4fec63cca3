//! Per-label classifier heads over fixed feature vectors.
//!
//! Linear heads follow the `σ(wᵀz + b)` form used by the training loop;
//! MLP heads are small ReLU stacks with hand-written backpropagation.
//! Both expose a flat parameter layout so gradient checks and SGD updates
//! share one code path.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{sigmoid, Real};

/// Probability clamp applied after the sigmoid so `log m` and `log(1-m)`
/// stay finite. Gradients treat clamped scores as constants.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature vector has length {got}, heads expect {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("label index {label} out of range for {n_labels} heads")]
    LabelOutOfRange { label: usize, n_labels: usize },
    #[error("checkpoint invalid: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One fully-connected layer, `weights` stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MlpLayer<T: Real> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<T>,
}

/// Parameters of a single label's head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub enum HeadParams<T: Real> {
    Linear { weights: Vec<T>, bias: T },
    Mlp { layers: Vec<MlpLayer<T>> },
}

impl<T: Real> HeadParams<T> {
    pub fn input_dim(&self) -> usize {
        match self {
            HeadParams::Linear { weights, .. } => weights.len(),
            HeadParams::Mlp { layers } => layers[0].weights[0].len(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            HeadParams::Linear { weights, .. } => weights.len() + 1,
            HeadParams::Mlp { layers } => layers
                .iter()
                .map(|l| l.weights.len() * l.weights[0].len() + l.biases.len())
                .sum(),
        }
    }

    /// Raw pre-sigmoid output on `features`.
    pub fn logit(&self, features: &[T]) -> T {
        match self {
            HeadParams::Linear { weights, bias } => {
                let dot = weights
                    .iter()
                    .zip(features)
                    .fold(T::zero(), |acc, (w, z)| acc + *w * *z);
                dot + *bias
            }
            HeadParams::Mlp { layers } => {
                let mut act: Vec<T> = features.to_vec();
                for (li, layer) in layers.iter().enumerate() {
                    let last = li + 1 == layers.len();
                    let mut next = Vec::with_capacity(layer.biases.len());
                    for (row, b) in layer.weights.iter().zip(&layer.biases) {
                        let mut v = row
                            .iter()
                            .zip(&act)
                            .fold(T::zero(), |acc, (w, a)| acc + *w * *a)
                            + *b;
                        if !last && v < T::zero() {
                            v = T::zero();
                        }
                        next.push(v);
                    }
                    act = next;
                }
                act[0]
            }
        }
    }

    /// Gradient of the logit with respect to the flat parameter vector.
    pub fn grad_logit(&self, features: &[T]) -> Vec<T> {
        match self {
            HeadParams::Linear { weights, .. } => {
                let mut g = Vec::with_capacity(weights.len() + 1);
                g.extend_from_slice(features);
                g.push(T::one());
                g
            }
            HeadParams::Mlp { layers } => {
                // Forward pass keeping post-activation values per layer.
                let mut activations: Vec<Vec<T>> = vec![features.to_vec()];
                let mut pre: Vec<Vec<T>> = Vec::with_capacity(layers.len());
                for (li, layer) in layers.iter().enumerate() {
                    let last = li + 1 == layers.len();
                    let input = activations.last().unwrap().clone();
                    let mut z = Vec::with_capacity(layer.biases.len());
                    let mut a = Vec::with_capacity(layer.biases.len());
                    for (row, b) in layer.weights.iter().zip(&layer.biases) {
                        let v = row
                            .iter()
                            .zip(&input)
                            .fold(T::zero(), |acc, (w, x)| acc + *w * *x)
                            + *b;
                        z.push(v);
                        a.push(if !last && v < T::zero() { T::zero() } else { v });
                    }
                    pre.push(z);
                    activations.push(a);
                }

                // Backward pass: delta for the output unit is 1.
                let mut grads: Vec<Vec<T>> = Vec::with_capacity(layers.len());
                let mut delta: Vec<T> = vec![T::one()];
                for li in (0..layers.len()).rev() {
                    let layer = &layers[li];
                    let input = &activations[li];
                    let mut layer_grad =
                        Vec::with_capacity(layer.weights.len() * input.len() + delta.len());
                    for (di, d) in delta.iter().enumerate() {
                        for x in input {
                            layer_grad.push(*d * *x);
                        }
                        let _ = di;
                    }
                    layer_grad.extend(delta.iter().copied());
                    grads.push(layer_grad);

                    if li > 0 {
                        let prev_len = activations[li].len();
                        let mut next_delta = vec![T::zero(); prev_len];
                        for (di, d) in delta.iter().enumerate() {
                            for (j, nd) in next_delta.iter_mut().enumerate() {
                                *nd = *nd + *d * layer.weights[di][j];
                            }
                        }
                        // ReLU mask of the layer below.
                        for (j, nd) in next_delta.iter_mut().enumerate() {
                            if pre[li - 1][j] < T::zero() {
                                *nd = T::zero();
                            }
                        }
                        delta = next_delta;
                    }
                }
                grads.reverse();
                grads.into_iter().flatten().collect()
            }
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        match self {
            HeadParams::Linear { weights, bias } => {
                let mut v = weights.clone();
                v.push(*bias);
                v
            }
            HeadParams::Mlp { layers } => {
                let mut v = Vec::with_capacity(self.n_params());
                for layer in layers {
                    for row in &layer.weights {
                        v.extend_from_slice(row);
                    }
                    v.extend_from_slice(&layer.biases);
                }
                v
            }
        }
    }

    pub fn load_flat(&mut self, flat: &[T]) {
        debug_assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter().copied();
        match self {
            HeadParams::Linear { weights, bias } => {
                for w in weights.iter_mut() {
                    *w = it.next().unwrap();
                }
                *bias = it.next().unwrap();
            }
            HeadParams::Mlp { layers } => {
                for layer in layers {
                    for row in &mut layer.weights {
                        for w in row.iter_mut() {
                            *w = it.next().unwrap();
                        }
                    }
                    for b in &mut layer.biases {
                        *b = it.next().unwrap();
                    }
                }
            }
        }
    }

    /// `params += scale * grad`, matching the flat layout.
    pub fn add_scaled(&mut self, grad: &[T], scale: T) {
        let mut flat = self.flatten();
        debug_assert_eq!(flat.len(), grad.len());
        for (p, g) in flat.iter_mut().zip(grad) {
            *p = *p + scale * *g;
        }
        self.load_flat(&flat);
    }
}

/// All per-label heads of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelParams<T: Real> {
    pub heads: Vec<HeadParams<T>>,
}

/// Per-label probabilities, clamped inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T: Real>(Vec<T>);

impl<T: Real> ScoreVector<T> {
    pub fn get(&self, label: usize) -> T {
        self.0[label]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether the score sits on the clamp boundary, in which case its
    /// gradient is treated as zero.
    pub fn is_clamped(&self, label: usize) -> bool {
        let p_min = T::from_f64_lossy(PROB_CLAMP);
        self.0[label] <= p_min || self.0[label] >= T::one() - p_min
    }

    /// Wraps raw probabilities without clamping; for tests and oracles.
    pub fn from_probs(probs: Vec<T>) -> Self {
        ScoreVector(probs)
    }
}

pub fn clamp_prob<T: Real>(p: T) -> T {
    let p_min = T::from_f64_lossy(PROB_CLAMP);
    if p < p_min {
        p_min
    } else if p > T::one() - p_min {
        T::one() - p_min
    } else {
        p
    }
}

impl<T: Real> ModelParams<T> {
    /// Uniform `[-0.01, 0.01]` weights, zero biases.
    pub fn init_linear<R: rand::Rng>(n_labels: usize, n_features: usize, rng: &mut R) -> Self {
        let heads = (0..n_labels)
            .map(|_| HeadParams::Linear {
                weights: (0..n_features)
                    .map(|_| {
                        let u = T::sample_unit(rng);
                        (u + u - T::one()) * T::from_f64_lossy(0.01)
                    })
                    .collect(),
                bias: T::zero(),
            })
            .collect();
        ModelParams { heads }
    }

    pub fn init_mlp<R: rand::Rng>(
        n_labels: usize,
        n_features: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![n_features];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let heads = (0..n_labels)
            .map(|_| {
                let layers = dims
                    .windows(2)
                    .map(|w| MlpLayer {
                        weights: (0..w[1])
                            .map(|_| {
                                (0..w[0])
                                    .map(|_| {
                                        let u = T::sample_unit(rng);
                                        (u + u - T::one()) * T::from_f64_lossy(0.01)
                                    })
                                    .collect()
                            })
                            .collect(),
                        biases: vec![T::zero(); w[1]],
                    })
                    .collect();
                HeadParams::Mlp { layers }
            })
            .collect();
        ModelParams { heads }
    }

    pub fn n_labels(&self) -> usize {
        self.heads.len()
    }

    pub fn n_features(&self) -> usize {
        self.heads[0].input_dim()
    }

    /// Scores for every label on one instance.
    pub fn forward(&self, features: &[T]) -> Result<ScoreVector<T>, ModelError> {
        if features.len() != self.n_features() {
            return Err(ModelError::DimMismatch {
                got: features.len(),
                expected: self.n_features(),
            });
        }
        Ok(ScoreVector(
            self.heads
                .iter()
                .map(|h| clamp_prob(sigmoid(h.logit(features))))
                .collect(),
        ))
    }

    /// Gradient of `log m(x; θ_t)` with respect to head `t`'s flat parameters.
    /// Zero when the score is clamped.
    pub fn backward_logscore(
        &self,
        features: &[T],
        label: usize,
    ) -> Result<Vec<T>, ModelError> {
        if label >= self.heads.len() {
            return Err(ModelError::LabelOutOfRange {
                label,
                n_labels: self.heads.len(),
            });
        }
        let scores = self.forward(features)?;
        let head = &self.heads[label];
        if scores.is_clamped(label) {
            return Ok(vec![T::zero(); head.n_params()]);
        }
        let m = scores.get(label);
        let factor = T::one() - m; // d log σ(a) / d a
        Ok(head
            .grad_logit(features)
            .into_iter()
            .map(|g| g * factor)
            .collect())
    }
}

/// Frozen snapshot of a model, structurally identical to the live one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ReferenceParams<T: Real> {
    heads: ModelParams<T>,
}

impl<T: Real> ReferenceParams<T> {
    pub fn model(&self) -> &ModelParams<T> {
        &self.heads
    }

    pub fn forward(&self, features: &[T]) -> Result<ScoreVector<T>, ModelError> {
        self.heads.forward(features)
    }
}

/// Deep, immutable copy of the live model.
pub fn snapshot_reference<T: Real>(params: &ModelParams<T>) -> ReferenceParams<T> {
    ReferenceParams { heads: params.clone() }
}

/// On-disk model format: flat per-label parameter arrays plus shape info.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Checkpoint<T: Real> {
    pub format_version: u32,
    pub kind: String,
    pub n_features: usize,
    pub n_labels: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub heads: Vec<Vec<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &ModelParams<T>, seed: u64) -> Self {
        let (kind, hidden) = match &model.heads[0] {
            HeadParams::Linear { .. } => ("linear".to_string(), Vec::new()),
            HeadParams::Mlp { layers } => (
                "mlp".to_string(),
                layers[..layers.len() - 1]
                    .iter()
                    .map(|l| l.biases.len())
                    .collect(),
            ),
        };
        Checkpoint {
            format_version: 1,
            kind,
            n_features: model.n_features(),
            n_labels: model.n_labels(),
            hidden,
            seed,
            heads: model.heads.iter().map(HeadParams::flatten).collect(),
        }
    }

    pub fn to_model(&self) -> Result<ModelParams<T>, ModelError> {
        if self.format_version != 1 {
            return Err(ModelError::BadCheckpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.heads.len() != self.n_labels {
            return Err(ModelError::BadCheckpoint(format!(
                "{} head arrays for {} labels",
                self.heads.len(),
                self.n_labels
            )));
        }
        let template: HeadParams<T> = match self.kind.as_str() {
            "linear" => HeadParams::Linear {
                weights: vec![T::zero(); self.n_features],
                bias: T::zero(),
            },
            "mlp" => {
                let mut dims = vec![self.n_features];
                dims.extend_from_slice(&self.hidden);
                dims.push(1);
                HeadParams::Mlp {
                    layers: dims
                        .windows(2)
                        .map(|w| MlpLayer {
                            weights: vec![vec![T::zero(); w[0]]; w[1]],
                            biases: vec![T::zero(); w[1]],
                        })
                        .collect(),
                }
            }
            other => {
                return Err(ModelError::BadCheckpoint(format!("unknown head kind `{other}`")))
            }
        };
        let expected = template.n_params();
        let mut heads = Vec::with_capacity(self.heads.len());
        for (i, flat) in self.heads.iter().enumerate() {
            if flat.len() != expected {
                return Err(ModelError::BadCheckpoint(format!(
                    "head {i} has {} parameters, expected {expected}",
                    flat.len()
                )));
            }
            let mut head = template.clone();
            head.load_flat(flat);
            heads.push(head);
        }
        Ok(ModelParams { heads })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io_err = |p: &Path, source| ModelError::Io {
            path: p.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(json.as_bytes()).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| ModelError::BadCheckpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use tempfile::tempdir;

    #[test]
    fn zero_linear_head_scores_half() {
        let model = ModelParams::<f64> {
            heads: vec![HeadParams::Linear { weights: vec![0.0, 0.0], bias: 0.0 }],
        };
        let s = model.forward(&[3.0, -1.0]).unwrap();
        assert_eq!(s.get(0), 0.5);
    }

    #[test]
    fn linear_head_matches_hand_sigmoid() {
        let model = ModelParams::<f64> {
            heads: vec![HeadParams::Linear { weights: vec![1.0, 0.0], bias: 0.0 }],
        };
        let s = model.forward(&[3f64.ln(), 5.0]).unwrap();
        assert!((s.get(0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_mlp_head_scores_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut model = ModelParams::<f64>::init_mlp(1, 4, &[3, 2], &mut rng);
        let zeros = vec![0.0; model.heads[0].n_params()];
        model.heads[0].load_flat(&zeros);
        let s = model.forward(&[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(s.get(0), 0.5);
    }

    #[test]
    fn backward_logscore_linear_hand_value() {
        let model = ModelParams::<f64> {
            heads: vec![HeadParams::Linear { weights: vec![0.0, 0.0], bias: 0.0 }],
        };
        let g = model.backward_logscore(&[2.0, 0.0], 0).unwrap();
        assert_eq!(g, vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn backward_logscore_matches_finite_differences_mlp() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut model = ModelParams::<f64>::init_mlp(1, 5, &[4, 3], &mut rng);
        // Larger weights so ReLUs are active on both sides.
        let flat: Vec<f64> = model.heads[0]
            .flatten()
            .iter()
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        model.heads[0].load_flat(&flat);
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let analytic = model.backward_logscore(&z, 0).unwrap();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let mut m = model.clone();
            m.heads[0].load_flat(&plus);
            let fp = m.forward(&z).unwrap().get(0).ln();
            m.heads[0].load_flat(&minus);
            let fm = m.forward(&z).unwrap().get(0).ln();
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom <= 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn clamped_score_has_zero_logscore_gradient() {
        let model = ModelParams::<f64> {
            heads: vec![HeadParams::Linear { weights: vec![100.0], bias: 0.0 }],
        };
        let s = model.forward(&[10.0]).unwrap();
        assert!(s.is_clamped(0));
        let g = model.backward_logscore(&[10.0], 0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_independence() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut model = ModelParams::<f64>::init_linear(3, 4, &mut rng);
        let z = [0.3, -0.2, 1.1, 0.8];
        let before = model.forward(&z).unwrap();
        model.heads[1].add_scaled(&[1.0, 1.0, 1.0, 1.0, 1.0], 0.5);
        let after = model.forward(&z).unwrap();
        assert_eq!(before.get(0), after.get(0));
        assert_eq!(before.get(2), after.get(2));
        assert_ne!(before.get(1), after.get(1));
    }

    #[test]
    fn snapshot_is_immutable_copy() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut model = ModelParams::<f64>::init_linear(2, 3, &mut rng);
        let z = [0.1, 0.2, 0.3];
        let snap = snapshot_reference(&model);
        assert_eq!(
            snap.forward(&z).unwrap().as_slice(),
            model.forward(&z).unwrap().as_slice()
        );
        model.heads[0].add_scaled(&[1.0; 4], 1.0);
        assert_ne!(
            snap.forward(&z).unwrap().as_slice(),
            model.forward(&z).unwrap().as_slice()
        );
        let snap2 = snapshot_reference(snap.model());
        assert_eq!(snap, snap2);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let model = ModelParams::<f64>::init_mlp(3, 4, &[3], &mut rng);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::from_model(&model, 99).save(&path).unwrap();
        let loaded = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.to_model().unwrap(), model);
        // Byte-identical on re-save.
        let again = dir.path().join("again.json");
        loaded.save(&again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let model = ModelParams::<f64>::init_linear(2, 3, &mut rng);
        assert!(matches!(
            model.forward(&[1.0, 2.0]),
            Err(ModelError::DimMismatch { got: 2, expected: 3 })
        ));
    }
}
