//! Linear contextual bandit with an upper-confidence exploration bonus.
//!
//! Each arm keeps `A = lambda*I + sum c c^T` and `b = sum r c` in `f64`
//! together with a Cholesky factor of `A`, maintained by rank-1 updates.
//! Scores are `c . alpha + gamma * sqrt(c^T A^-1 c)` with `A alpha = b`.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Extractor, TemplateId};

pub const ARM_COUNT: usize = 6;
pub const KGMB_MAGIC: &[u8; 4] = b"KGMB";
pub const KGMB_VERSION: u32 = 1;

/// Arm index; the six standard arms are extractor-major:
/// 0..3 use the subgraph extractor, 3..6 the RL extractor, and within each
/// block triples, sentences, graph description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArmId(pub usize);

impl ArmId {
    pub fn from_parts(extractor: Extractor, template: TemplateId) -> Self {
        let row = match extractor {
            Extractor::Subgraph => 0,
            Extractor::Rl => 1,
        };
        let col = TemplateId::ALL.iter().position(|&t| t == template).unwrap();
        ArmId(row * 3 + col)
    }

    pub fn decode(self) -> Option<(Extractor, TemplateId)> {
        if self.0 >= ARM_COUNT {
            return None;
        }
        let extractor = if self.0 < 3 { Extractor::Subgraph } else { Extractor::Rl };
        Some((extractor, TemplateId::ALL[self.0 % 3]))
    }

    pub fn all() -> impl Iterator<Item = ArmId> {
        (0..ARM_COUNT).map(ArmId)
    }
}

impl fmt::Display for ArmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.decode() {
            Some((e, t)) => write!(f, "{}:{e}/{t}", self.0),
            None => write!(f, "{}", self.0),
        }
    }
}

/// Binary reward: 1 for a correct answer, 0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanditReward(u8);

impl BanditReward {
    pub const ZERO: BanditReward = BanditReward(0);
    pub const ONE: BanditReward = BanditReward(1);

    pub fn new(value: u8) -> Result<Self> {
        match value {
            0 | 1 => Ok(BanditReward(value)),
            v => Err(Error::InvalidArgument(format!("bandit reward must be 0 or 1, got {v}"))),
        }
    }

    pub fn from_correct(correct: bool) -> Self {
        BanditReward(correct as u8)
    }

    pub fn value(self) -> f64 {
        self.0 as f64
    }
}

/// `1 + sqrt(ln(2/delta) / 2)` for `0 < delta <= 2`.
pub fn gamma_of_delta(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 2.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 2], got {delta}")));
    }
    Ok(1.0 + ((2.0 / delta).ln() / 2.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    dim: usize,
    a_mat: Vec<f64>,
    b_vec: Vec<f64>,
    n_obs: u64,
    /// Lower Cholesky factor of `a_mat`, row-major.
    chol: Vec<f64>,
}

impl ArmState {
    pub fn new(dim: usize, lambda: f64) -> Self {
        let mut a_mat = vec![0.0; dim * dim];
        let mut chol = vec![0.0; dim * dim];
        let root = lambda.sqrt();
        for i in 0..dim {
            a_mat[i * dim + i] = lambda;
            chol[i * dim + i] = root;
        }
        ArmState {
            dim,
            a_mat,
            b_vec: vec![0.0; dim],
            n_obs: 0,
            chol,
        }
    }

    fn from_parts(dim: usize, a_mat: Vec<f64>, b_vec: Vec<f64>, n_obs: u64) -> Result<Self> {
        let chol = cholesky(&a_mat, dim)?;
        Ok(ArmState {
            dim,
            a_mat,
            b_vec,
            n_obs,
            chol,
        })
    }

    pub fn a_mat(&self) -> &[f64] {
        &self.a_mat
    }

    pub fn b_vec(&self) -> &[f64] {
        &self.b_vec
    }

    pub fn n_obs(&self) -> u64 {
        self.n_obs
    }

    /// Ridge weights solving `A alpha = b`.
    pub fn alpha(&self) -> Result<Vec<f64>> {
        let y = forward_sub(&self.chol, self.dim, &self.b_vec);
        let alpha = backward_sub_transposed(&self.chol, self.dim, &y);
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite ridge solution after {} observations",
                self.n_obs
            )));
        }
        Ok(alpha)
    }

    /// `sqrt(c^T A^-1 c)`.
    pub fn confidence_width(&self, c: &[f64]) -> f64 {
        let y = forward_sub(&self.chol, self.dim, c);
        y.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn observe(&mut self, c: &[f64], r: f64) -> Result<()> {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                self.a_mat[i * d + j] += c[i] * c[j];
            }
            self.b_vec[i] += r * c[i];
        }
        self.n_obs += 1;
        cholesky_rank1_update(&mut self.chol, d, c)
    }
}

/// Dense Cholesky `A = L L^T`; fails unless `A` is positive definite.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Numerical(format!("matrix not positive definite at pivot {i}")));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_rank1_update(l: &mut [f64], d: usize, x: &[f64]) -> Result<()> {
    let mut w = x.to_vec();
    for k in 0..d {
        let lkk = l[k * d + k];
        let r = (lkk * lkk + w[k] * w[k]).sqrt();
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Numerical(format!("rank-1 update broke the factor at pivot {k}")));
        }
        let c = r / lkk;
        let s = w[k] / lkk;
        l[k * d + k] = r;
        for i in k + 1..d {
            let lik = (l[i * d + k] + s * w[i]) / c;
            w[i] = c * w[i] - s * lik;
            l[i * d + k] = lik;
        }
    }
    Ok(())
}

fn forward_sub(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    y
}

fn backward_sub_transposed(l: &[f64], d: usize, y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditModel {
    dim: usize,
    lambda: f64,
    delta: f64,
    gamma: f64,
    exploration: bool,
    arms: Vec<ArmState>,
}

fn to_f64<T: Copy + Into<f64>>(c: &[T]) -> Vec<f64> {
    c.iter().map(|&x| x.into()).collect()
}

impl BanditModel {
    pub const DEFAULT_LAMBDA: f64 = 1.0;
    pub const DEFAULT_DELTA: f64 = 0.1;

    pub fn new(dim: usize, lambda: f64, delta: f64) -> Result<Self> {
        Self::with_arm_count(dim, ARM_COUNT, lambda, delta)
    }

    pub fn with_arm_count(dim: usize, arm_count: usize, lambda: f64, delta: f64) -> Result<Self> {
        if dim == 0 || arm_count == 0 {
            return Err(Error::InvalidArgument("bandit needs dim >= 1 and at least one arm".into()));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1], got {delta}")));
        }
        Ok(BanditModel {
            dim,
            lambda,
            delta,
            gamma: gamma_of_delta(delta)?,
            exploration: true,
            arms: (0..arm_count).map(|_| ArmState::new(dim, lambda)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn arm_count(&self) -> usize {
        self.arms.len()
    }

    pub fn arm(&self, arm: ArmId) -> &ArmState {
        &self.arms[arm.0]
    }

    pub fn total_observations(&self) -> u64 {
        self.arms.iter().map(|a| a.n_obs).sum()
    }

    /// Disable the exploration bonus (purely greedy on `c . alpha`).
    pub fn set_exploration(&mut self, enabled: bool) {
        self.exploration = enabled;
    }

    pub fn exploration(&self) -> bool {
        self.exploration
    }

    fn check(&self, arm: ArmId, c_len: usize) -> Result<()> {
        if arm.0 >= self.arms.len() {
            return Err(Error::InvalidArgument(format!("arm {} out of range", arm.0)));
        }
        if c_len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: c_len,
            });
        }
        Ok(())
    }

    /// `c . alpha + gamma * sqrt(c^T A^-1 c)`.
    pub fn expectation<T: Copy + Into<f64>>(&self, arm: ArmId, c: &[T]) -> Result<f64> {
        self.check(arm, c.len())?;
        let c = to_f64(c);
        self.score(&self.arms[arm.0], &c)
    }

    fn score(&self, state: &ArmState, c: &[f64]) -> Result<f64> {
        let alpha = state.alpha()?;
        let exploit: f64 = c.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        if !self.exploration {
            return Ok(exploit);
        }
        Ok(exploit + self.gamma * state.confidence_width(c))
    }

    pub fn scores<T: Copy + Into<f64>>(&self, c: &[T]) -> Result<Vec<f64>> {
        self.check(ArmId(0), c.len())?;
        let c = to_f64(c);
        self.arms.iter().map(|s| self.score(s, &c)).collect()
    }

    /// Highest expectation, ties to the lowest index.
    pub fn select_arm<T: Copy + Into<f64>>(&self, c: &[T]) -> Result<ArmId> {
        let scores = self.scores(c)?;
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(ArmId(best))
    }

    /// Best arm among `allowed` (same tie rule).
    pub fn select_among<T: Copy + Into<f64>>(&self, c: &[T], allowed: &[ArmId]) -> Result<ArmId> {
        let scores = self.scores(c)?;
        allowed
            .iter()
            .copied()
            .filter(|a| a.0 < scores.len())
            .fold(None, |best: Option<ArmId>, a| match best {
                Some(b) if scores[b.0] >= scores[a.0] && (scores[b.0] > scores[a.0] || b.0 < a.0) => Some(b),
                _ => Some(a),
            })
            .ok_or_else(|| Error::InvalidArgument("no allowed arm".into()))
    }

    pub fn update<T: Copy + Into<f64>>(&mut self, arm: ArmId, c: &[T], r: BanditReward) -> Result<()> {
        self.check(arm, c.len())?;
        let c = to_f64(c);
        self.arms[arm.0].observe(&c, r.value())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim;
        let mut out = Vec::with_capacity(32 + self.arms.len() * (8 + 8 * d * (d + 1)));
        out.extend_from_slice(KGMB_MAGIC);
        out.extend_from_slice(&KGMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.arms.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.delta.to_le_bytes());
        for arm in &self.arms {
            out.extend_from_slice(&arm.n_obs.to_le_bytes());
            for v in arm.a_mat.iter().chain(&arm.b_vec) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 || &bytes[..4] != KGMB_MAGIC {
            return Err(Error::Format("not a KGMB bandit state".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != KGMB_VERSION {
            return Err(Error::Format(format!("unsupported KGMB version {version}")));
        }
        let d = u32_at(8) as usize;
        let arm_count = u32_at(12) as usize;
        let (lambda, delta) = (f64_at(16), f64_at(24));
        let per_arm = 8 + 8 * d * (d + 1);
        if bytes.len() != 32 + arm_count * per_arm {
            return Err(Error::Format(format!(
                "KGMB size {} does not match d={d}, arms={arm_count}",
                bytes.len()
            )));
        }
        let mut model = BanditModel::with_arm_count(d, arm_count, lambda, delta)?;
        for (k, arm) in model.arms.iter_mut().enumerate() {
            let base = 32 + k * per_arm;
            let n_obs = u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap());
            let vals: Vec<f64> = bytes[base + 8..base + per_arm]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("arm {k} holds non-finite values")));
            }
            let (a, b) = vals.split_at(d * d);
            *arm = ArmState::from_parts(d, a.to_vec(), b.to_vec(), n_obs)?;
        }
        Ok(model)
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
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1(d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        v
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_of_delta(2.0).unwrap(), 1.0);
        assert!((gamma_of_delta(0.1).unwrap() - 2.22387).abs() < 1e-4);
        let e2 = std::f64::consts::E * std::f64::consts::E;
        assert!((gamma_of_delta(2.0 / e2).unwrap() - 2.0).abs() < 1e-12);
        assert!(gamma_of_delta(0.0).is_err());
        assert!(gamma_of_delta(2.5).is_err());
    }

    #[test]
    fn arm_layout() {
        assert_eq!(ArmId(0).decode(), Some((Extractor::Subgraph, TemplateId::Triples)));
        assert_eq!(ArmId(4).decode(), Some((Extractor::Rl, TemplateId::Sentences)));
        assert_eq!(ArmId(5).decode(), Some((Extractor::Rl, TemplateId::GraphDescription)));
        for a in ArmId::all() {
            let (e, t) = a.decode().unwrap();
            assert_eq!(ArmId::from_parts(e, t), a);
        }
        assert_eq!(ArmId(6).decode(), None);
    }

    #[test]
    fn alpha_hand_solves() {
        let mut m = BanditModel::new(2, 1.0, 0.1).unwrap();
        assert_eq!(m.arm(ArmId(0)).alpha().unwrap(), vec![0.0, 0.0]);
        m.update(ArmId(0), &e1(2), BanditReward::ONE).unwrap();
        let a = m.arm(ArmId(0)).alpha().unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15 && a[1] == 0.0);
        m.update(ArmId(0), &e1(2), BanditReward::ONE).unwrap();
        let a = m.arm(ArmId(0)).alpha().unwrap();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn expectation_examples() {
        let mut m = BanditModel::new(3, 1.0, 0.1).unwrap();
        let g = m.gamma();
        let unit = [0.6, 0.0, 0.8];
        assert!((m.expectation(ArmId(2), &unit).unwrap() - g).abs() < 1e-12);
        m.update(ArmId(1), &e1(3), BanditReward::ONE).unwrap();
        let got = m.expectation(ArmId(1), &e1(3)).unwrap();
        assert!((got - (0.5 + g * 0.5f64.sqrt())).abs() < 1e-12);
        let ortho = [0.0, 3.0, 4.0];
        assert!((m.expectation(ArmId(1), &ortho).unwrap() - g * 5.0).abs() < 1e-12);
        assert!(m.expectation(ArmId(1), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn selection_and_ties() {
        let mut m = BanditModel::new(2, 1.0, 0.1).unwrap();
        assert_eq!(m.select_arm(&[1.0, 0.0]).unwrap(), ArmId(0));
        for _ in 0..5 {
            m.update(ArmId(3), &[1.0, 0.0], BanditReward::ONE).unwrap();
        }
        // gamma >= 1 keeps untried arms ahead of a perfect one
        assert_eq!(m.select_arm(&[1.0, 0.0]).unwrap(), ArmId(0));
        m.set_exploration(false);
        assert_eq!(m.select_arm(&[1.0, 0.0]).unwrap(), ArmId(3));
        assert_eq!(m.select_arm(&[1.0, 0.0]).unwrap(), m.select_arm(&[1.0, 0.0]).unwrap());
        assert_eq!(m.select_among(&[1.0, 0.0], &[ArmId(1), ArmId(2)]).unwrap(), ArmId(1));
        assert_eq!(m.select_among(&[1.0, 0.0], &[ArmId(4), ArmId(3)]).unwrap(), ArmId(3));
    }

    #[test]
    fn tried_arm_with_rewards_wins_once_others_fail() {
        let mut m = BanditModel::new(2, 1.0, 0.1).unwrap();
        let c = [1.0, 0.0];
        for k in 0..ARM_COUNT {
            for _ in 0..30 {
                let r = if k == 4 { BanditReward::ONE } else { BanditReward::ZERO };
                m.update(ArmId(k), &c, r).unwrap();
            }
        }
        // arm 4: 30/31 + g*sqrt(1/31); others: 0 + g*sqrt(1/31)
        let scores = m.scores(&c).unwrap();
        let g = m.gamma();
        assert!((scores[4] - (30.0 / 31.0 + g / 31f64.sqrt())).abs() < 1e-12);
        assert_eq!(m.select_arm(&c).unwrap(), ArmId(4));
    }

    #[test]
    fn zero_reward_grows_a_only() {
        let mut m = BanditModel::new(2, 1.0, 0.1).unwrap();
        m.update(ArmId(3), &[0.5, 0.5], BanditReward::ZERO).unwrap();
        let arm = m.arm(ArmId(3));
        assert_eq!(arm.b_vec(), &[0.0, 0.0]);
        assert_eq!(arm.a_mat(), &[1.25, 0.25, 0.25, 1.25]);
        assert_eq!(arm.n_obs(), 1);
        let fresh = ArmState::new(2, 1.0);
        for k in [0, 1, 2, 4, 5] {
            assert_eq!(m.arm(ArmId(k)), &fresh);
        }
        assert!(BanditReward::new(2).is_err());
    }

    #[test]
    fn rank1_factor_matches_fresh_factorization() {
        let mut m = BanditModel::new(4, 0.5, 0.1).unwrap();
        let cs = [[0.1, -0.4, 0.3, 0.9], [1.0, 0.2, 0.0, -0.3], [0.5, 0.5, 0.5, 0.5]];
        for c in cs {
            m.update(ArmId(0), &c, BanditReward::ONE).unwrap();
        }
        let arm = m.arm(ArmId(0));
        let fresh = cholesky(arm.a_mat(), 4).unwrap();
        for (a, b) in arm.chol.iter().zip(&fresh) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn persistence_round_trip() {
        let mut m = BanditModel::new(3, 2.0, 0.05).unwrap();
        m.update(ArmId(5), &[0.2, 0.1, -0.7], BanditReward::ONE).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"KGMB");
        assert_eq!(bytes.len(), 32 + 6 * (8 + 8 * 12));
        let back = BanditModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.arm(ArmId(5)).a_mat(), m.arm(ArmId(5)).a_mat());
        assert_eq!(back.arm(ArmId(5)).n_obs(), 1);
        assert_eq!(back.to_bytes(), bytes);
        assert!(BanditModel::from_bytes(&bytes[..40]).is_err());
    }
}
