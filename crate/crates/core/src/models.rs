//! ReLU feature map with a fine-label softmax head and a coarse-label head.

use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamVector, Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Layer sizes of the feature map and label counts of the two heads.
///
/// The feature map is `input -> hidden[0] -> ... -> hidden[k-1]` with ReLU
/// after every hidden layer, followed by a linear layer to `feature_dim`
/// when one is given. Without `feature_dim` the last hidden activation is
/// the feature (or the raw input when `hidden` is empty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: Option<usize>,
    pub fine_count: usize,
    pub coarse_count: usize,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        feature_dim: Option<usize>,
        fine_count: usize,
        coarse_count: usize,
    ) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) || feature_dim == Some(0) {
            return Err(invalid("layer widths must be positive"));
        }
        if fine_count < 2 || coarse_count < 2 {
            return Err(invalid("heads need at least two labels"));
        }
        Ok(Self {
            input_dim,
            hidden,
            feature_dim,
            fine_count,
            coarse_count,
        })
    }

    pub fn features(&self) -> usize {
        self.feature_dim
            .or_else(|| self.hidden.last().copied())
            .unwrap_or(self.input_dim)
    }

    /// `(fan_in, fan_out)` of every linear layer in the feature map.
    fn phi_layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.extend(self.feature_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn layer_shapes(layers: &[(usize, usize)]) -> Vec<(usize, usize)> {
        layers
            .iter()
            .flat_map(|&(i, o)| [(i, o), (1, o)])
            .collect()
    }

    pub fn phi_shapes(&self) -> Vec<(usize, usize)> {
        Self::layer_shapes(&self.phi_layers())
    }

    pub fn theta_shapes(&self) -> Vec<(usize, usize)> {
        Self::layer_shapes(&[(self.features(), self.fine_count)])
    }

    /// Two coarse labels use a logistic head (one score column, logits
    /// `(0, s)`); more use a full softmax head.
    pub fn theta_ad_shapes(&self) -> Vec<(usize, usize)> {
        let cols = if self.coarse_count == 2 { 1 } else { self.coarse_count };
        Self::layer_shapes(&[(self.features(), cols)])
    }
}

/// Parameters of the feature map `phi`, target head `theta` and coarse head
/// `theta_ad`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub phi: ParamVector,
    pub theta: ParamVector,
    pub theta_ad: ParamVector,
}

impl ModelBundle {
    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = init_blocks(arch.phi_shapes(), &mut rng);
        let theta = init_blocks(arch.theta_shapes(), &mut rng);
        let theta_ad = init_blocks(arch.theta_ad_shapes(), &mut rng);
        Self {
            arch,
            phi,
            theta,
            theta_ad,
        }
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            phi: ParamVector::zeros(arch.phi_shapes()),
            theta: ParamVector::zeros(arch.theta_shapes()),
            theta_ad: ParamVector::zeros(arch.theta_ad_shapes()),
            arch,
        }
    }

    pub fn param_count(&self) -> usize {
        self.phi.len() + self.theta.len() + self.theta_ad.len()
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.theta.is_finite() && self.theta_ad.is_finite()
    }

    pub fn register(&self, tape: &mut Tape) -> BundleVars {
        BundleVars {
            phi: self.phi.leaves(tape),
            theta: self.theta.leaves(tape),
            theta_ad: self.theta_ad.leaves(tape),
        }
    }

    fn check_input(&self, inputs: &Tensor) -> Result<()> {
        if inputs.cols() != self.arch.input_dim {
            return Err(invalid(format!(
                "input dimension {} does not match architecture input {}",
                inputs.cols(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    fn eval(&self, inputs: &Tensor, head: Head) -> Result<Tensor> {
        self.check_input(inputs)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.constant(inputs.clone());
        let h = feature_map(&mut tape, &vars.phi, x, self.arch.feature_dim.is_some());
        let out = match head {
            Head::Features => h,
            Head::Target => log_probs(&mut tape, &vars.theta, h),
            Head::Coarse => log_probs(&mut tape, &vars.theta_ad, h),
        };
        tape.check()?;
        Ok(tape.value(out).clone())
    }

    /// Features of every row of `inputs`.
    pub fn features_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        self.eval(inputs, Head::Features)
    }

    /// Fine-label log-probabilities, one row per input.
    pub fn target_log_probs_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        self.eval(inputs, Head::Target)
    }

    /// Coarse-head log-probabilities, one row per input.
    pub fn coarse_log_probs_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        self.eval(inputs, Head::Coarse)
    }

    pub fn feature_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.features_batch(&row(x))?.into_vec())
    }

    pub fn target_log_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.target_log_probs_batch(&row(x))?.into_vec())
    }

    pub fn coarse_log_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.coarse_log_probs_batch(&row(x))?.into_vec())
    }

    /// Argmax of the target head for each row; ties go to the smallest label.
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let lp = self.target_log_probs_batch(inputs)?;
        Ok((0..lp.rows())
            .map(|r| {
                let row = lp.row(r);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Writes the flat little-endian `f64` parameters to `path` and the
    /// architecture with block lengths to `path` + `.json`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.param_count() * 8);
        for v in self
            .phi
            .values()
            .iter()
            .chain(self.theta.values())
            .chain(self.theta_ad.values())
        {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        let sidecar = CheckpointSidecar {
            arch: self.arch.clone(),
            phi_len: self.phi.len(),
            theta_len: self.theta.len(),
            theta_ad_len: self.theta_ad.len(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let sidecar: CheckpointSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        let arch = sidecar.arch;
        let expected = [
            (sidecar.phi_len, arch.phi_shapes()),
            (sidecar.theta_len, arch.theta_shapes()),
            (sidecar.theta_ad_len, arch.theta_ad_shapes()),
        ];
        let total: usize = expected.iter().map(|(n, _)| n).sum();
        if bytes.len() != total * 8 {
            return Err(invalid(format!(
                "checkpoint holds {} bytes, sidecar expects {}",
                bytes.len(),
                total * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut offset = 0;
        let mut parts = Vec::with_capacity(3);
        for (len, shapes) in expected {
            parts.push(ParamVector::new(shapes, values[offset..offset + len].to_vec())?);
            offset += len;
        }
        let theta_ad = parts.pop().expect("three blocks");
        let theta = parts.pop().expect("three blocks");
        let phi = parts.pop().expect("three blocks");
        Ok(Self {
            arch,
            phi,
            theta,
            theta_ad,
        })
    }
}

fn init_blocks(shapes: Vec<(usize, usize)>, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut p = ParamVector::zeros(shapes.clone());
    let values = p.values_mut();
    let mut offset = 0;
    for (i, (r, c)) in shapes.into_iter().enumerate() {
        let len = r * c;
        if i % 2 == 0 {
            let bound = 1.0 / (r as f64).sqrt();
            for v in &mut values[offset..offset + len] {
                *v = rng.random_range(-bound..bound);
            }
        }
        offset += len;
    }
    p
}

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    arch: Architecture,
    phi_len: usize,
    theta_len: usize,
    theta_ad_len: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn row(x: &[f64]) -> Tensor {
    Tensor::from_vec(1, x.len(), x.to_vec())
}

#[derive(Clone, Copy)]
enum Head {
    Features,
    Target,
    Coarse,
}

/// Tape leaves for every parameter block of a [`ModelBundle`].
#[derive(Debug, Clone)]
pub struct BundleVars {
    pub phi: Vec<Var>,
    pub theta: Vec<Var>,
    pub theta_ad: Vec<Var>,
}

impl BundleVars {
    pub fn all(&self) -> Vec<Var> {
        self.phi
            .iter()
            .chain(&self.theta)
            .chain(&self.theta_ad)
            .copied()
            .collect()
    }
}

/// Applies the feature map given its `[W0, b0, W1, b1, ...]` leaves. ReLU
/// follows every layer except the last when `linear_last` is set.
pub fn feature_map(tape: &mut Tape, phi: &[Var], x: Var, linear_last: bool) -> Var {
    let layers = phi.len() / 2;
    let mut h = x;
    for (i, wb) in phi.chunks(2).enumerate() {
        let z = tape.matmul(h, wb[0]);
        h = tape.add_row(z, wb[1]);
        if !(linear_last && i + 1 == layers) {
            h = tape.relu(h);
        }
    }
    h
}

/// Linear head followed by log-softmax over rows. A head with a single
/// score column is logistic: its logits are `(0, score)`.
pub fn log_probs(tape: &mut Tape, head: &[Var], h: Var) -> Var {
    let z = tape.matmul(h, head[0]);
    let mut logits = tape.add_row(z, head[1]);
    let (rows, cols) = tape.value(logits).shape();
    if cols == 1 {
        let ones: Rc<[usize]> = vec![1; rows].into();
        logits = tape.scatter(logits, ones, 2);
    }
    tape.log_softmax(logits)
}
