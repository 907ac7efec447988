use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::rollout::{action_feature, CandidateAction};
use crate::embeddings::GraphVectors;
use crate::error::{Error, Result};

pub const KGPL_MAGIC: &[u8; 4] = b"KGPL";
pub const KGPL_VERSION: u32 = 1;

/// Two-layer scorer: `head = w2 * tanh(w1 * s + b1) + b2`, and each
/// candidate's logit is `feature . head`.
///
/// All four blocks live in one buffer in declaration order (w1, b1, w2, b2).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dim: usize,
    hidden: usize,
    action_dim: usize,
    data: Vec<f32>,
}

impl PolicyParams {
    /// All-zero parameters (the uniform policy).
    pub fn zeros(dim: usize, hidden: usize, action_dim: usize) -> Self {
        let n = Self::param_count(dim, hidden, action_dim);
        PolicyParams {
            dim,
            hidden,
            action_dim,
            data: vec![0.0; n],
        }
    }

    /// Random first layer, zero output layer: starts out uniform but with
    /// informative hidden features.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, action_dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(dim, hidden, action_dim);
        let normal = Normal::new(0.0, scale.max(0.0)).unwrap();
        for w in p.w1_mut() {
            *w = normal.sample(rng) as f32;
        }
        p
    }

    fn param_count(dim: usize, hidden: usize, action_dim: usize) -> usize {
        hidden * 2 * dim + hidden + action_dim * hidden + action_dim
    }

    /// Embedding dimension `d`; the state has `2d` entries.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.state_dim();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.action_dim * self.hidden;
        [w1, b1, w2, b2]
    }

    pub fn w1(&self) -> &[f32] {
        let o = self.offsets();
        &self.data[o[0]..o[1]]
    }

    pub fn b1(&self) -> &[f32] {
        let o = self.offsets();
        &self.data[o[1]..o[2]]
    }

    pub fn w2(&self) -> &[f32] {
        let o = self.offsets();
        &self.data[o[2]..o[3]]
    }

    pub fn b2(&self) -> &[f32] {
        let o = self.offsets();
        &self.data[o[3]..]
    }

    fn w1_mut(&mut self) -> &mut [f32] {
        let o = self.offsets();
        &mut self.data[o[0]..o[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(KGPL_MAGIC);
        out.extend_from_slice(&KGPL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        out.extend_from_slice(&(self.action_dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != KGPL_MAGIC {
            return Err(Error::Format("not a KGPL policy checkpoint".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let version = word(4);
        if version != KGPL_VERSION as usize {
            return Err(Error::Format(format!("unsupported KGPL version {version}")));
        }
        let (dim, hidden, action_dim) = (word(8), word(12), word(16));
        let n = Self::param_count(dim, hidden, action_dim);
        let body = &bytes[20..];
        if body.len() != n * 4 {
            return Err(Error::Format(format!(
                "checkpoint body is {} bytes, expected {}",
                body.len(),
                n * 4
            )));
        }
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let p = PolicyParams {
            dim,
            hidden,
            action_dim,
            data,
        };
        if !p.is_finite() {
            return Err(Error::Format("checkpoint contains non-finite weights".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hidden activations and the action-scoring head for a state.
    pub(crate) fn head(&self, state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sd = self.state_dim();
        debug_assert_eq!(state.len(), sd);
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let z: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &w1[j * sd..(j + 1) * sd];
                let u = b1[j] as f64 + row.iter().zip(state).map(|(&w, &s)| w as f64 * s).sum::<f64>();
                u.tanh()
            })
            .collect();
        let head: Vec<f64> = (0..self.action_dim)
            .map(|k| {
                let row = &w2[k * self.hidden..(k + 1) * self.hidden];
                b2[k] as f64 + row.iter().zip(&z).map(|(&w, &h)| w as f64 * h).sum::<f64>()
            })
            .collect();
        (z, head)
    }
}

/// Gradient buffer laid out like [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        Gradients {
            values: vec![0.0; p.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.values {
            *g *= k;
        }
    }

    /// Rescale so the global L2 norm is at most `max_norm`; returns the
    /// norm after clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
            self.norm()
        } else {
            norm
        }
    }

    /// Add `weight * d log pi(chosen | state) / d theta`.
    pub(crate) fn accumulate_log_prob(
        &mut self,
        params: &PolicyParams,
        state: &[f64],
        features: &[f64],
        chosen: usize,
        weight: f64,
    ) {
        let da = params.action_dim;
        let n = features.len() / da;
        let (z, head) = params.head(state);
        let probs = softmax_scores(features, &head, None);
        // d log pi / d head = f_chosen - sum_i p_i f_i
        let mut g_head = features[chosen * da..(chosen + 1) * da].to_vec();
        for i in 0..n {
            let f = &features[i * da..(i + 1) * da];
            for (g, &x) in g_head.iter_mut().zip(f) {
                *g -= probs[i] * x;
            }
        }
        let [o_w1, o_b1, o_w2, o_b2] = params.offsets();
        let h = params.hidden;
        let sd = params.state_dim();
        let w2 = params.w2();
        let mut g_z = vec![0.0; h];
        for k in 0..da {
            let gk = weight * g_head[k];
            self.values[o_b2 + k] += gk;
            let row = &mut self.values[o_w2 + k * h..o_w2 + (k + 1) * h];
            for j in 0..h {
                row[j] += gk * z[j];
                g_z[j] += gk * w2[k * h + j] as f64;
            }
        }
        for j in 0..h {
            let gu = g_z[j] * (1.0 - z[j] * z[j]);
            self.values[o_b1 + j] += gu;
            let row = &mut self.values[o_w1 + j * sd..o_w1 + (j + 1) * sd];
            for (g, &s) in row.iter_mut().zip(state) {
                *g += gu * s;
            }
        }
    }
}

/// Softmax of `features . head`, with masked entries forced to zero mass.
pub(crate) fn softmax_scores(features: &[f64], head: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let da = head.len();
    let n = features.len() / da;
    let logits: Vec<f64> = (0..n)
        .map(|i| {
            let f = &features[i * da..(i + 1) * da];
            f.iter().zip(head).map(|(a, b)| a * b).sum()
        })
        .collect();
    let allowed = |i: usize| mask.map_or(true, |m| !m[i]);
    let max = (0..n)
        .filter(|&i| allowed(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = (0..n)
        .map(|i| if allowed(i) { (logits[i] - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        for p in &mut probs {
            *p /= total;
        }
    }
    probs
}

/// Action distribution from precomputed features (`n x action_dim`, flat).
/// `mask[i] == true` removes candidate `i`.
pub fn policy_probs(params: &PolicyParams, state: &[f64], features: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let da = params.action_dim();
    if state.len() != params.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.state_dim(),
            actual: state.len(),
        });
    }
    if features.is_empty() || features.len() % da != 0 {
        return Err(Error::InvalidArgument("no candidate actions".into()));
    }
    let n = features.len() / da;
    if let Some(m) = mask {
        if m.len() != n || m.iter().all(|&x| x) {
            return Err(Error::InvalidArgument("mask leaves no candidate actions".into()));
        }
    }
    let (_, head) = params.head(state);
    Ok(softmax_scores(features, &head, mask))
}

/// Distribution over `actions` for the given state vector.
pub fn policy_forward(
    params: &PolicyParams,
    state: &[f64],
    actions: &[CandidateAction],
    vectors: &GraphVectors<'_>,
) -> Result<Vec<f64>> {
    let mut features = Vec::with_capacity(actions.len() * params.action_dim());
    for a in actions {
        features.extend(action_feature(a, vectors)?);
    }
    policy_probs(params, state, &features, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_uniform() {
        let p = PolicyParams::zeros(2, 3, 4);
        let feats: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let probs = policy_probs(&p, &[0.1, 0.2, 0.3, 0.4], &feats, None).unwrap();
        for q in probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_candidate_has_all_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::init(2, 5, 4, 1.0, &mut rng);
        let probs = policy_probs(&p, &[1.0, -1.0, 0.5, 0.0], &[1.0, 2.0, 3.0, 4.0], None).unwrap();
        assert_eq!(probs, vec![1.0]);
    }

    #[test]
    fn masked_candidates_get_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PolicyParams::init(1, 4, 2, 1.0, &mut rng);
        p.as_mut_slice().iter_mut().for_each(|w| *w += 0.3);
        let feats = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let probs = policy_probs(&p, &[0.2, 0.7], &feats, Some(&[false, true, false])).unwrap();
        assert_eq!(probs[1], 0.0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(policy_probs(&p, &[0.2, 0.7], &feats, Some(&[true, true, true])).is_err());
        assert!(policy_probs(&p, &[0.2, 0.7], &[], None).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::init(3, 4, 6, 0.5, &mut rng);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"KGPL");
        assert_eq!(PolicyParams::from_bytes(&bytes).unwrap(), p);
        assert!(PolicyParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(p.w1().len(), 4 * 6);
        assert_eq!(p.b1().len(), 4);
        assert_eq!(p.w2().len(), 6 * 4);
        assert_eq!(p.b2().len(), 6);
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = Gradients {
            values: vec![3.0, 4.0],
        };
        assert!((g.clip(1.0) - 1.0).abs() < 1e-12);
        let mut small = Gradients {
            values: vec![0.3, 0.4],
        };
        assert!((small.clip(1.0) - 0.5).abs() < 1e-12);
        assert_eq!(small.values, vec![0.3, 0.4]);
    }
}
