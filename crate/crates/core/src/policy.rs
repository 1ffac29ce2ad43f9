//! Linear-softmax dialogue policy.
//!
//! `π(a | f) = softmax(W f + b)_a`. The bias column is stored as the last
//! column of each weight row, so a parameter row has `feature_len + 1`
//! entries. Without it the opening context, which encodes to all zeros,
//! would always be answered uniformly.

use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Reference probabilities below this floor are clamped before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

pub(crate) type Buf = SmallVec<[f64; 16]>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyParams {
    num_actions: usize,
    feature_len: usize,
    /// Row-major `num_actions × (feature_len + 1)`.
    weights: Vec<f64>,
    version: u64,
}

/// Gradient with the same layout as [`PolicyParams`] weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradient {
    num_actions: usize,
    feature_len: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlValue {
    pub value: f64,
    /// A reference probability fell below [`KL_FLOOR`] and was clamped.
    pub clamped: bool,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        let d = *v - max;
        // exp(0) is exactly 1; skipping the call matters on rollout paths.
        *v = if d == 0.0 { 1.0 } else { d.exp() };
        sum += *v;
    }
    let inv = sum.recip();
    for v in z.iter_mut() {
        *v *= inv;
    }
}

impl PolicyParams {
    pub fn zeros(num_actions: usize, feature_len: usize) -> Self {
        Self {
            num_actions,
            feature_len,
            weights: vec![0.0; num_actions * (feature_len + 1)],
            version: 0,
        }
    }

    pub fn from_weights(num_actions: usize, feature_len: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != num_actions * (feature_len + 1) {
            return Err(Error::Domain(format!(
                "expected {} weights for {num_actions}×({feature_len}+1), got {}",
                num_actions * (feature_len + 1),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("policy weights must be finite".into()));
        }
        Ok(Self {
            num_actions,
            feature_len,
            weights,
            version: 0,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable weights for tests and initialization. Does not bump the version.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_len {
            return Err(Error::Domain(format!(
                "feature length {} does not match policy feature length {}",
                features.len(),
                self.feature_len
            )));
        }
        Ok(())
    }

    fn check_shape(&self, other_actions: usize, other_features: usize) -> Result<()> {
        if (self.num_actions, self.feature_len) != (other_actions, other_features) {
            return Err(Error::Domain(format!(
                "shape mismatch: {}×{} vs {other_actions}×{other_features}",
                self.num_actions, self.feature_len
            )));
        }
        Ok(())
    }

    /// Unchecked fast path used by rollouts; `out` is overwritten.
    pub(crate) fn probs_into(&self, features: &[f64], out: &mut Buf) {
        let n = self.feature_len;
        let features = &features[..n];
        out.clear();
        out.extend(self.weights.chunks_exact(n + 1).map(|row| {
            let (w, bias) = row.split_at(n);
            w.iter().zip(features).fold(0.0, |acc, (w, f)| acc + w * f) + bias[0]
        }));
        softmax_in_place(out);
    }

    pub(crate) fn probs_buf(&self, features: &[f64]) -> Buf {
        let mut z = Buf::new();
        self.probs_into(features, &mut z);
        z
    }

    pub fn action_distribution(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_features(features)?;
        Ok(self.probs_buf(features).to_vec())
    }

    /// `∇ log π(action | f) = (onehot(action) − π) ⊗ [f, 1]`.
    pub fn log_prob_grad(&self, features: &[f64], action: usize) -> Result<Gradient> {
        self.check_features(features)?;
        if action >= self.num_actions {
            return Err(Error::Domain(format!(
                "action {action} out of range for {} actions",
                self.num_actions
            )));
        }
        let mut coeff = self.probs_buf(features);
        for (a, c) in coeff.iter_mut().enumerate() {
            *c = if a == action { 1.0 } else { 0.0 } - *c;
        }
        let mut g = Gradient::zeros(self.num_actions, self.feature_len);
        g.add_outer(&coeff, features, 1.0);
        Ok(g)
    }

    /// Exact `KL(π_self ‖ π_reference)` over the action set at `features`.
    pub fn kl_divergence(&self, reference: &PolicyParams, features: &[f64]) -> Result<KlValue> {
        self.check_shape(reference.num_actions, reference.feature_len)?;
        self.check_features(features)?;
        let p = self.probs_buf(features);
        let q = reference.probs_buf(features);
        Ok(kl_from_probs(&p, &q))
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }

    /// Gradient-ascent step `θ ← θ + rate · g`. Bumps the version.
    pub fn ascend(&mut self, grad: &Gradient, rate: f64) -> Result<()> {
        self.check_shape(grad.num_actions, grad.feature_len)?;
        for (w, g) in self.weights.iter_mut().zip(&grad.values) {
            *w += rate * g;
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("update produced non-finite weights".into()));
        }
        self.version += 1;
        Ok(())
    }

    /// Index of the most probable action; ties go to the lowest index.
    pub fn greedy_action(&self, features: &[f64]) -> usize {
        let p = self.probs_buf(features);
        let mut best = 0;
        for a in 1..p.len() {
            if p[a] > p[best] {
                best = a;
            }
        }
        best
    }

    /// Binary layout, all integers and floats little-endian:
    /// `b"ATGRPOPL" | u32 num_actions | u32 feature_len | u64 version |
    /// f64 × num_actions·(feature_len + 1)` with the bias as the last column.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.num_actions as u32).to_le_bytes())?;
        w.write_all(&(self.feature_len as u32).to_le_bytes())?;
        w.write_all(&self.version.to_le_bytes())?;
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Domain("not a policy file".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let num_actions = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let feature_len = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let version = u64::from_le_bytes(u64buf);
        let mut weights = Vec::with_capacity(num_actions * (feature_len + 1));
        for _ in 0..num_actions * (feature_len + 1) {
            r.read_exact(&mut u64buf)?;
            weights.push(f64::from_le_bytes(u64buf));
        }
        let mut params = Self::from_weights(num_actions, feature_len, weights)?;
        params.version = version;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

const MAGIC: &[u8; 8] = b"ATGRPOPL";

pub(crate) fn kl_from_probs(p: &[f64], q: &[f64]) -> KlValue {
    let mut clamped = false;
    let mut value = 0.0;
    for (&pa, &qa) in p.iter().zip(q) {
        if pa == 0.0 {
            continue;
        }
        let qa = if qa < KL_FLOOR {
            clamped = true;
            KL_FLOOR
        } else {
            qa
        };
        value += pa * (pa.ln() - qa.ln());
    }
    KlValue {
        value: value.max(0.0),
        clamped,
    }
}

/// Immutable, cheaply shareable copy of a parameter set (`π_old`, `π_ref`).
#[derive(Debug, Clone)]
pub struct Snapshot(Arc<PolicyParams>);

impl Deref for Snapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

impl Gradient {
    pub fn zeros(num_actions: usize, feature_len: usize) -> Self {
        Self {
            num_actions,
            feature_len,
            values: vec![0.0; num_actions * (feature_len + 1)],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `self[a, :] += scale · coeff[a] · [f, 1]`.
    pub(crate) fn add_outer(&mut self, coeff: &[f64], features: &[f64], scale: f64) {
        let stride = self.feature_len + 1;
        for (a, &c) in coeff.iter().enumerate() {
            let k = scale * c;
            if k == 0.0 {
                continue;
            }
            let row = &mut self.values[a * stride..(a + 1) * stride];
            for (g, f) in row[..self.feature_len].iter_mut().zip(features) {
                *g += k * f;
            }
            row[self.feature_len] += k;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Per-action row sums over the feature columns (bias excluded).
    pub fn row(&self, action: usize) -> &[f64] {
        let stride = self.feature_len + 1;
        &self.values[action * stride..(action + 1) * stride]
    }
}
