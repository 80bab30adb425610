//! The toy denoiser / velocity network.
//!
//! A small fully-connected net maps `(x, t, c)` to a vector in data space:
//! the ε-prediction for the diffusion sampler or the velocity for the flow
//! sampler. Time enters through sinusoidal features, the condition through a
//! learned embedding table with one reserved null row for classifier-free
//! guidance. Everything is plain `f64` with hand-written reverse-mode
//! gradients; a single-precision forward path exists for the stored
//! log-prob precision experiment.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Network shape. `input_dim = data_dim + 2·time_pairs + cond_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_pairs: usize,
    pub cond_dim: usize,
    /// Number of real conditions; the embedding table has one extra null row.
    pub n_conditions: usize,
}

impl Arch {
    /// Default toy architecture: 3 tanh layers of 64 units, 8 sinusoidal
    /// time pairs, 8-dim condition embedding.
    pub fn default_toy(data_dim: usize, n_conditions: usize) -> Self {
        Self { data_dim, hidden: vec![64, 64, 64], time_pairs: 8, cond_dim: 8, n_conditions }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.time_pairs + self.cond_dim
    }

    /// Sizes of (weights, biases) per layer, output layer last.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        let net: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        net + (self.n_conditions + 1) * self.cond_dim
    }

    /// Offset of the condition-embedding table in the flat parameter vector.
    fn cond_table_offset(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat, seedable, checkpointable network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arch: Arch,
    pub values: Vec<f64>,
}

/// Cached activations from a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Vec<f64>,
    /// Post-activation outputs of each hidden layer.
    hidden: Vec<Vec<f64>>,
    cond_row: usize,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: PolicyParams,
}

impl PolicyParams {
    /// Random initialization: layer weights ~ N(0, 1/fan_in), zero biases,
    /// condition embeddings ~ N(0, 0.25).
    pub fn init(arch: Arch, rng: &mut impl Rng) -> Self {
        let mut values = vec![0.0; arch.param_count()];
        let mut off = 0;
        for (fan_in, fan_out) in arch.layer_dims() {
            let std = (1.0 / fan_in as f64).sqrt();
            for v in &mut values[off..off + fan_in * fan_out] {
                *v = std * normal(rng);
            }
            off += fan_in * fan_out + fan_out; // biases stay zero
        }
        for v in &mut values[off..] {
            *v = 0.5 * normal(rng);
        }
        Self { arch, values }
    }

    pub fn zeros(arch: Arch) -> Self {
        let n = arch.param_count();
        Self { arch, values: vec![0.0; n] }
    }

    fn cond_row_index(&self, c: Option<usize>) -> Result<usize> {
        match c {
            None => Ok(self.arch.n_conditions),
            Some(c) if c < self.arch.n_conditions => Ok(c),
            Some(c) => Err(Error::InvalidInput(format!(
                "condition {c} out of range (n_conditions = {})",
                self.arch.n_conditions
            ))),
        }
    }

    /// Input features: data, sinusoidal time pairs `sin/cos(2^k π t)`, and
    /// the condition embedding row (null row for `c = None`).
    fn features(&self, x: &[f64], t: f64, cond_row: usize) -> Vec<f64> {
        let a = &self.arch;
        let mut f = Vec::with_capacity(a.input_dim());
        f.extend_from_slice(x);
        for k in 0..a.time_pairs {
            let freq = (1u64 << k) as f64 * std::f64::consts::PI;
            f.push((freq * t).sin());
            f.push((freq * t).cos());
        }
        let base = a.cond_table_offset() + cond_row * a.cond_dim;
        f.extend_from_slice(&self.values[base..base + a.cond_dim]);
        f
    }

    /// Deterministic forward pass.
    pub fn predict(&self, x: &[f64], t: f64, c: Option<usize>) -> Result<Vec<f64>> {
        Ok(self.forward(x, t, c)?.0)
    }

    /// Forward pass returning the cache needed by [`Self::backward`].
    pub fn forward(&self, x: &[f64], t: f64, c: Option<usize>) -> Result<(Vec<f64>, ForwardCache)> {
        let a = &self.arch;
        if x.len() != a.data_dim {
            return Err(Error::DimensionMismatch(format!(
                "input dim {} != data_dim {}",
                x.len(),
                a.data_dim
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("t must be in [0, 1], got {t}")));
        }
        let cond_row = self.cond_row_index(c)?;
        let features = self.features(x, t, cond_row);
        let dims = a.layer_dims();
        let mut hidden = Vec::with_capacity(a.hidden.len());
        let mut off = 0;
        let mut cur = features.clone();
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.values[off..off + fan_in * fan_out];
            let b = &self.values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut next = vec![0.0; fan_out];
            for (o, nv) in next.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(&cur) {
                    acc += wi * xi;
                }
                *nv = acc;
            }
            let last = li + 1 == dims.len();
            if !last {
                for v in &mut next {
                    *v = v.tanh();
                }
                hidden.push(next.clone());
            }
            cur = next;
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok((cur, ForwardCache { features, hidden, cond_row }))
    }

    /// Single-precision forward pass: parameters and arithmetic in `f32`,
    /// result widened back. Used to inject storage-precision mismatch.
    pub fn predict_f32(&self, x: &[f64], t: f64, c: Option<usize>) -> Result<Vec<f64>> {
        let a = &self.arch;
        if x.len() != a.data_dim {
            return Err(Error::DimensionMismatch("input dim".into()));
        }
        let cond_row = self.cond_row_index(c)?;
        let feats: Vec<f32> = self
            .features(x, t, cond_row)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let dims = a.layer_dims();
        let mut off = 0;
        let mut cur = feats;
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.values[off..off + fan_in * fan_out];
            let b = &self.values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut next = vec![0.0f32; fan_out];
            for (o, nv) in next.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o] as f32;
                for (wi, xi) in row.iter().zip(&cur) {
                    acc += (*wi as f32) * xi;
                }
                *nv = acc;
            }
            if li + 1 != dims.len() {
                for v in &mut next {
                    *v = v.tanh();
                }
            }
            cur = next;
        }
        Ok(cur.into_iter().map(|v| v as f64).collect())
    }

    /// Exact reverse-mode gradient of `upstream · output` w.r.t. all
    /// parameters (including the condition-embedding row used).
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let a = &self.arch;
        if upstream.len() != a.data_dim {
            return Err(Error::DimensionMismatch("upstream dim".into()));
        }
        let dims = a.layer_dims();
        let mut grad = vec![0.0; self.values.len()];
        // Layer offsets for indexing the flat vectors.
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(fan_in, fan_out) in &dims {
            offsets.push(off);
            off += fan_in * fan_out + fan_out;
        }
        // delta starts as the upstream gradient at the (linear) output layer.
        let mut delta = upstream.to_vec();
        for li in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[li];
            let off = offsets[li];
            let input: &[f64] = if li == 0 { &cache.features } else { &cache.hidden[li - 1] };
            // Weight and bias gradients: outer product delta x input.
            for o in 0..fan_out {
                let d = delta[o];
                let grow = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, xi) in grow.iter_mut().zip(input) {
                    *g += d * xi;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            // Propagate to the layer input.
            let w = &self.values[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += d * wi;
                }
            }
            if li > 0 {
                // Through tanh: dz = (1 - h^2) * dh.
                for (p, h) in prev.iter_mut().zip(&cache.hidden[li - 1]) {
                    *p *= 1.0 - h * h;
                }
            }
            delta = prev;
        }
        // The feature gradient's condition slice belongs to the embedding row.
        let cond_start = a.data_dim + 2 * a.time_pairs;
        let table = a.cond_table_offset() + cache.cond_row * a.cond_dim;
        for i in 0..a.cond_dim {
            grad[table + i] += delta[cond_start + i];
        }
        Ok(grad)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("refusing to checkpoint non-finite parameters".into()));
        }
        let ckpt = Checkpoint { version: CHECKPOINT_VERSION, params: self.clone() };
        let json = serde_json::to_string(&ckpt)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if ckpt.params.values.len() != ckpt.params.arch.param_count() {
            return Err(Error::Serialization("parameter count mismatch".into()));
        }
        Ok(ckpt.params)
    }
}

/// Standard normal via Box–Muller (keeps init independent of distribution
/// crates).
fn normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Adam optimizer state for one [`PolicyParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update with bias correction.
    pub fn step(&mut self, params: &mut PolicyParams, grads: &[f64]) -> Result<()> {
        if grads.len() != params.values.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch("adam grads/params".into()));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn small_arch() -> Arch {
        Arch { data_dim: 2, hidden: vec![8, 8], time_pairs: 3, cond_dim: 4, n_conditions: 3 }
    }

    #[test]
    fn zero_weights_zero_output() {
        let p = PolicyParams::zeros(small_arch());
        let y = p.predict(&[0.4, -0.2], 0.3, Some(1)).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = PolicyParams::init(small_arch(), &mut StreamRng::new(1).stream(&[0]));
        let a = p.predict(&[0.4, -0.2], 0.3, Some(2)).unwrap();
        let b = p.predict(&[0.4, -0.2], 0.3, Some(2)).unwrap();
        assert_eq!(a, b);
        let c = p.predict(&[0.4, -0.2], 0.3, None).unwrap();
        assert_ne!(a, c); // null condition uses a different embedding row
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PolicyParams::zeros(small_arch());
        assert!(p.predict(&[0.0], 0.3, None).is_err());
        assert!(p.predict(&[0.0, 0.0], 1.5, None).is_err());
        assert!(p.predict(&[0.0, 0.0], 0.5, Some(3)).is_err());
    }

    #[test]
    fn zero_upstream_zero_grad() {
        let p = PolicyParams::init(small_arch(), &mut StreamRng::new(2).stream(&[0]));
        let (_, cache) = p.forward(&[0.1, 0.9], 0.7, Some(0)).unwrap();
        let g = p.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_network_grad_is_outer_product() {
        // No hidden layers: output = W f + b, so dW = upstream x features.
        let arch = Arch { data_dim: 2, hidden: vec![], time_pairs: 2, cond_dim: 3, n_conditions: 1 };
        let p = PolicyParams::init(arch.clone(), &mut StreamRng::new(3).stream(&[0]));
        let x = [0.3, -0.8];
        let (out, cache) = p.forward(&x, 0.25, Some(0)).unwrap();
        assert_eq!(out.len(), 2);
        let upstream = [1.5, -0.5];
        let g = p.backward(&cache, &upstream).unwrap();
        let fdim = arch.input_dim();
        for o in 0..2 {
            for i in 0..fdim {
                let expect = upstream[o] * cache.features[i];
                assert!((g[o * fdim + i] - expect).abs() < 1e-14);
            }
            assert!((g[2 * fdim + o] - upstream[o]).abs() < 1e-14);
        }
    }

    #[test]
    fn full_network_gradient_check() {
        let mut rng = StreamRng::new(4).stream(&[0]);
        let h = 1e-6;
        for trial in 0..20 {
            let mut p = PolicyParams::init(small_arch(), &mut rng);
            let x = [normal(&mut rng), normal(&mut rng)];
            let t = 0.37;
            let c = Some(trial % 3);
            let upstream = [normal(&mut rng), normal(&mut rng)];
            let (_, cache) = p.forward(&x, t, c).unwrap();
            let g = p.backward(&cache, &upstream).unwrap();
            let loss = |p: &PolicyParams| {
                let y = p.predict(&x, t, c).unwrap();
                y.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
            };
            // Probe a spread of parameter indices, including the cond table.
            let n = p.values.len();
            for &i in &[0usize, 7, n / 3, n / 2, n - 1, n - 3] {
                let orig = p.values[i];
                p.values[i] = orig + h;
                let up = loss(&p);
                p.values[i] = orig - h;
                let dn = loss(&p);
                p.values[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-6);
                assert!(
                    (fd - g[i]).abs() / denom <= 1e-5,
                    "param {i}: fd={fd} analytic={}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = PolicyParams::init(small_arch(), &mut StreamRng::new(5).stream(&[0]));
        let before = p.values.clone();
        let mut st = AdamState::new(p.values.len(), 1e-2);
        st.step(&mut p, &vec![0.0; before.len()]).unwrap();
        assert_eq!(p.values, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        // From zero moments: delta = -lr * g / (|g| + eps').
        let arch = Arch { data_dim: 1, hidden: vec![], time_pairs: 1, cond_dim: 1, n_conditions: 0 };
        let mut p = PolicyParams::zeros(arch);
        let n = p.values.len();
        let mut g = vec![0.0; n];
        g[0] = 0.3;
        g[1] = -2.0;
        let mut st = AdamState::new(n, 1e-3);
        st.step(&mut p, &g).unwrap();
        for i in 0..n {
            let expect = if g[i] == 0.0 { 0.0 } else { -1e-3 * g[i] / (g[i].abs() + st.eps) };
            assert!((p.values[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_replay_is_deterministic() {
        let arch = small_arch();
        let run = || {
            let mut rng = StreamRng::new(6).stream(&[0]);
            let mut p = PolicyParams::init(arch.clone(), &mut rng);
            let mut st = AdamState::new(p.values.len(), 1e-3);
            for i in 0..5 {
                let g: Vec<f64> = (0..p.values.len())
                    .map(|j| ((i * j) as f64 * 0.01).sin())
                    .collect();
                st.step(&mut p, &g).unwrap();
            }
            p.values
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("pcpo_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.json");
        let p = PolicyParams::init(small_arch(), &mut StreamRng::new(7).stream(&[0]));
        p.save_checkpoint(&path).unwrap();
        let q = PolicyParams::load_checkpoint(&path).unwrap();
        assert_eq!(p.arch, q.arch);
        assert_eq!(p.values.len(), q.values.len());
        for (a, b) in p.values.iter().zip(&q.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn f32_forward_close_but_not_identical() {
        let p = PolicyParams::init(small_arch(), &mut StreamRng::new(8).stream(&[0]));
        let x = [0.9, -1.1];
        let a = p.predict(&x, 0.5, Some(1)).unwrap();
        let b = p.predict_f32(&x, 0.5, Some(1)).unwrap();
        for (ai, bi) in a.iter().zip(&b) {
            assert!((ai - bi).abs() < 1e-4);
        }
        assert!(a.iter().zip(&b).any(|(ai, bi)| ai != bi));
    }
}
