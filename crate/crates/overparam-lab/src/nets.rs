//! Two- and three-layer ReLU learner networks: initialization profiles,
//! forward/backward passes under the 𝕀[x ≥ 0] subgradient convention, frozen
//! sign patterns, pseudo networks, and kernel-baseline feature maps.
//!
//! The hot-path primitives are free functions taking explicit weight matrices
//! (`two_layer_forward`, `three_layer_forward`, …) so the training module can
//! evaluate perturbed/effective weights (W⁰ + Wρ + Σ·Wδ) without copying nets.
//! The net methods are conveniences over those primitives at current weights.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{dot, relu, relu_grad, sample_gaussian_matrix, sample_gaussian_vector, Matrix, RngStream};

/// Weight-scale profile at initialization.
///
/// `Theory` draws the output layer at scale ε_a (two-layer analysis); the
/// `Experiment` profile draws it at unit scale as in the benchmark runs.
/// Hidden layers are identical between profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitProfile {
    Theory,
    Experiment,
}

/// Which bias terms a pseudo network keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// All biases kept: frozen signs, exact at the freezing weights.
    Full,
    /// Bias dropped at the output (top replaced) layer only.
    Semi,
    /// All biases dropped.
    None,
}

/// Frozen 0/1 activation indicators per neuron; `dv` present for three-layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignPattern {
    pub dw: Vec<u8>,
    pub dv: Option<Vec<u8>>,
}

/// Weights at which a sign pattern is read off.
#[derive(Debug, Clone, Copy)]
pub enum SignAt<'a> {
    Init,
    Current,
    /// Explicit weights (first layer; second layer for three-layer nets).
    Custom(&'a Matrix, Option<&'a Matrix>),
}

// ---------------------------------------------------------------------------
// Two-layer learner
// ---------------------------------------------------------------------------

/// f_r(x; W) = Σ_i a_{r,i} σ(⟨w_i, x⟩ + b_i), with only `wdelta` trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerNet {
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub eps_a: f64,
    pub profile: InitProfile,
    pub w0: Matrix,
    pub wdelta: Matrix,
    pub b: Vec<f64>,
    /// Output weights, k×m, frozen after init.
    pub a: Matrix,
}

pub struct TwoLayerCache {
    /// Pre-activations ⟨w_i, x⟩ + b_i.
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

/// Forward pass at explicit weights.
pub fn two_layer_forward(w: &Matrix, b: &[f64], a: &Matrix, x: &[f64]) -> TwoLayerCache {
    debug_assert_eq!(w.cols, x.len());
    let pre: Vec<f64> = (0..w.rows).map(|i| dot(w.row(i), x) + b[i]).collect();
    let hidden: Vec<f64> = pre.iter().map(|&z| relu(z)).collect();
    let out = (0..a.rows).map(|r| dot(a.row(r), &hidden)).collect();
    TwoLayerCache { pre, out }
}

/// Backpropagated per-neuron sensitivity δ_i = Σ_r g_r a_{r,i} 𝕀[pre_i ≥ 0];
/// the weight gradient is the outer product dW = δ xᵀ.
pub fn two_layer_delta(a: &Matrix, pre: &[f64], loss_grad: &[f64]) -> Vec<f64> {
    let m = pre.len();
    let mut delta = vec![0.0; m];
    for r in 0..a.rows {
        let g = loss_grad[r];
        if g == 0.0 {
            continue;
        }
        for (i, dl) in delta.iter_mut().enumerate() {
            *dl += g * a.get(r, i);
        }
    }
    for (dl, &p) in delta.iter_mut().zip(pre) {
        *dl *= relu_grad(p);
    }
    delta
}

impl TwoLayerNet {
    pub fn init(
        m: usize,
        d: usize,
        k: usize,
        eps_a: f64,
        profile: InitProfile,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if m == 0 || d == 0 || k == 0 {
            return Err(LabError::InvalidParameter("dims must be ≥ 1".into()));
        }
        if !(eps_a > 0.0 && eps_a <= 1.0) {
            return Err(LabError::InvalidParameter(format!(
                "eps_a must lie in (0, 1], got {eps_a}"
            )));
        }
        let var_w = 1.0 / m as f64;
        let w0 = sample_gaussian_matrix(m, d, var_w, rng)?;
        let b = sample_gaussian_vector(m, var_w, rng)?;
        let var_a = match profile {
            InitProfile::Theory => eps_a * eps_a,
            InitProfile::Experiment => 1.0,
        };
        let a = sample_gaussian_matrix(k, m, var_a, rng)?;
        Ok(TwoLayerNet {
            m,
            d,
            k,
            eps_a,
            profile,
            w0,
            wdelta: Matrix::zeros(m, d),
            b,
            a,
        })
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(LabError::InvalidInput(format!(
                "input dim {} ≠ net dim {}",
                x.len(),
                self.d
            )));
        }
        Ok(())
    }

    /// W⁰ + Wδ materialized.
    pub fn effective_w(&self) -> Matrix {
        let mut w = self.w0.clone();
        w.add_assign(&self.wdelta);
        w
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cache(x)?.out)
    }

    pub fn forward_cache(&self, x: &[f64]) -> Result<TwoLayerCache> {
        self.check_x(x)?;
        let w = self.effective_w();
        Ok(two_layer_forward(&w, &self.b, &self.a, x))
    }

    /// Exact subgradient of ⟨loss_grad, f(x)⟩ with respect to the trainable W.
    pub fn backward(&self, x: &[f64], loss_grad: &[f64]) -> Result<Matrix> {
        let cache = self.forward_cache(x)?;
        let delta = two_layer_delta(&self.a, &cache.pre, loss_grad);
        let mut dw = Matrix::zeros(self.m, self.d);
        for i in 0..self.m {
            if delta[i] != 0.0 {
                let row = dw.row_mut(i);
                for (rv, &xv) in row.iter_mut().zip(x) {
                    *rv = delta[i] * xv;
                }
            }
        }
        Ok(dw)
    }

    pub fn sign_pattern(&self, x: &[f64], at: SignAt) -> Result<SignPattern> {
        self.check_x(x)?;
        let dw = match at {
            SignAt::Init => sign_rows(&self.w0, &self.b, x),
            SignAt::Current => sign_rows(&self.effective_w(), &self.b, x),
            SignAt::Custom(w, _) => {
                if w.rows != self.m || w.cols != self.d {
                    return Err(LabError::InvalidInput("custom W shape mismatch".into()));
                }
                sign_rows(w, &self.b, x)
            }
        };
        Ok(SignPattern { dw, dv: None })
    }

    /// Forward with σ(z) replaced by frozen-indicator · z at current weights.
    pub fn pseudo_forward(
        &self,
        x: &[f64],
        frozen: &SignPattern,
        bias: BiasMode,
    ) -> Result<Vec<f64>> {
        self.check_x(x)?;
        if frozen.dw.len() != self.m {
            return Err(LabError::InvalidInput("frozen pattern width mismatch".into()));
        }
        let w = self.effective_w();
        let use_b = matches!(bias, BiasMode::Full);
        let hidden: Vec<f64> = (0..self.m)
            .map(|i| {
                if frozen.dw[i] == 0 {
                    0.0
                } else {
                    dot(w.row(i), x) + if use_b { self.b[i] } else { 0.0 }
                }
            })
            .collect();
        Ok((0..self.k).map(|r| dot(self.a.row(r), &hidden)).collect())
    }

    /// Hidden activations at init (conjugate-kernel features), dimension m.
    pub fn conjugate_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        Ok((0..self.m)
            .map(|i| relu(dot(self.w0.row(i), x) + self.b[i]))
            .collect())
    }

    /// Gradient of the outputs w.r.t. W at init, concatenated per output:
    /// block r holds a_{r,i} 𝕀[pre⁰_i ≥ 0] x_j in row-major (i, j) order.
    pub fn ntk_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let gates: Vec<f64> = (0..self.m)
            .map(|i| relu_grad(dot(self.w0.row(i), x) + self.b[i]))
            .collect();
        let mut feats = Vec::with_capacity(self.k * self.m * self.d);
        for r in 0..self.k {
            for i in 0..self.m {
                let c = self.a.get(r, i) * gates[i];
                for &xv in x {
                    feats.push(c * xv);
                }
            }
        }
        Ok(feats)
    }

    /// Factored linearization point for kernel-space training (k = 1 only).
    pub fn ntk_point(&self, x: &[f64]) -> Result<NtkPoint> {
        self.check_x(x)?;
        if self.k != 1 {
            return Err(LabError::InvalidInput(
                "factored NTK points support single-output nets only".into(),
            ));
        }
        let gate_a: Vec<f64> = (0..self.m)
            .map(|i| self.a.get(0, i) * relu_grad(dot(self.w0.row(i), x) + self.b[i]))
            .collect();
        let f0 = two_layer_forward(&self.w0, &self.b, &self.a, x).out[0];
        Ok(NtkPoint {
            f0,
            blocks: vec![(gate_a, x.to_vec())],
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| LabError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| LabError::Serde(e.to_string()))
    }
}

fn sign_rows(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<u8> {
    (0..w.rows)
        .map(|i| u8::from(dot(w.row(i), x) + b[i] >= 0.0))
        .collect()
}

// ---------------------------------------------------------------------------
// Three-layer learner
// ---------------------------------------------------------------------------

/// λ · F(x; W, V) with F_r = Σ_i a_{r,i} σ(⟨v_i, σ(Wx + b₁)⟩ + b₂,i);
/// only `wdelta`, `vdelta` train and the output scaling λ decays geometrically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeLayerNet {
    pub m1: usize,
    pub m2: usize,
    pub d: usize,
    pub k: usize,
    pub profile: InitProfile,
    pub w0: Matrix,
    pub v0: Matrix,
    pub wdelta: Matrix,
    pub vdelta: Matrix,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    /// Output weights, k×m₂, frozen after init.
    pub a: Matrix,
    pub lambda: f64,
}

pub struct ThreeLayerCache {
    pub pre1: Vec<f64>,
    pub h1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub h2: Vec<f64>,
    pub out: Vec<f64>,
}

/// Forward pass at explicit weights.
pub fn three_layer_forward(
    w: &Matrix,
    b1: &[f64],
    v: &Matrix,
    b2: &[f64],
    a: &Matrix,
    lambda: f64,
    x: &[f64],
) -> ThreeLayerCache {
    let pre1: Vec<f64> = (0..w.rows).map(|i| dot(w.row(i), x) + b1[i]).collect();
    let h1: Vec<f64> = pre1.iter().map(|&z| relu(z)).collect();
    let pre2: Vec<f64> = (0..v.rows).map(|i| dot(v.row(i), &h1) + b2[i]).collect();
    let h2: Vec<f64> = pre2.iter().map(|&z| relu(z)).collect();
    let out = (0..a.rows).map(|r| lambda * dot(a.row(r), &h2)).collect();
    ThreeLayerCache {
        pre1,
        h1,
        pre2,
        h2,
        out,
    }
}

/// Backpropagated sensitivities (δ₁, δ₂): the weight gradients of
/// ⟨loss_grad, out⟩ are dW = δ₁ xᵀ and dV = δ₂ h₁ᵀ, λ factor included.
pub fn three_layer_deltas(
    v: &Matrix,
    a: &Matrix,
    lambda: f64,
    cache: &ThreeLayerCache,
    loss_grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let m2 = v.rows;
    let m1 = v.cols;
    let mut delta2 = vec![0.0; m2];
    for r in 0..a.rows {
        let g = lambda * loss_grad[r];
        if g == 0.0 {
            continue;
        }
        for (i, dl) in delta2.iter_mut().enumerate() {
            *dl += g * a.get(r, i);
        }
    }
    for (dl, &p) in delta2.iter_mut().zip(&cache.pre2) {
        *dl *= relu_grad(p);
    }
    let mut delta1 = vec![0.0; m1];
    for i in 0..m2 {
        let d2 = delta2[i];
        if d2 == 0.0 {
            continue;
        }
        for (dl, &vv) in delta1.iter_mut().zip(v.row(i)) {
            *dl += d2 * vv;
        }
    }
    for (dl, &p) in delta1.iter_mut().zip(&cache.pre1) {
        *dl *= relu_grad(p);
    }
    (delta1, delta2)
}

impl ThreeLayerNet {
    pub fn init(
        m1: usize,
        m2: usize,
        d: usize,
        k: usize,
        profile: InitProfile,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if m1 == 0 || m2 == 0 || d == 0 || k == 0 {
            return Err(LabError::InvalidParameter("dims must be ≥ 1".into()));
        }
        let var1 = 1.0 / m1 as f64;
        let var2 = 1.0 / m2 as f64;
        let w0 = sample_gaussian_matrix(m1, d, var1, rng)?;
        let b1 = sample_gaussian_vector(m1, var1, rng)?;
        let v0 = sample_gaussian_matrix(m2, m1, var2, rng)?;
        let b2 = sample_gaussian_vector(m2, var2, rng)?;
        // ε_a = 1 for the three-layer learner in both profiles.
        let a = sample_gaussian_matrix(k, m2, 1.0, rng)?;
        Ok(ThreeLayerNet {
            m1,
            m2,
            d,
            k,
            profile,
            w0,
            v0,
            wdelta: Matrix::zeros(m1, d),
            vdelta: Matrix::zeros(m2, m1),
            b1,
            b2,
            a,
            lambda: 1.0,
        })
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(LabError::InvalidInput(format!(
                "input dim {} ≠ net dim {}",
                x.len(),
                self.d
            )));
        }
        Ok(())
    }

    pub fn effective_w(&self) -> Matrix {
        let mut w = self.w0.clone();
        w.add_assign(&self.wdelta);
        w
    }

    pub fn effective_v(&self) -> Matrix {
        let mut v = self.v0.clone();
        v.add_assign(&self.vdelta);
        v
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cache(x)?.out)
    }

    pub fn forward_cache(&self, x: &[f64]) -> Result<ThreeLayerCache> {
        self.check_x(x)?;
        Ok(three_layer_forward(
            &self.effective_w(),
            &self.b1,
            &self.effective_v(),
            &self.b2,
            &self.a,
            self.lambda,
            x,
        ))
    }

    /// Exact subgradients (dW, dV) of ⟨loss_grad, f(x)⟩ w.r.t. trainable weights.
    pub fn backward(&self, x: &[f64], loss_grad: &[f64]) -> Result<(Matrix, Matrix)> {
        self.check_x(x)?;
        let v = self.effective_v();
        let cache = three_layer_forward(
            &self.effective_w(),
            &self.b1,
            &v,
            &self.b2,
            &self.a,
            self.lambda,
            x,
        );
        let (d1, d2) = three_layer_deltas(&v, &self.a, self.lambda, &cache, loss_grad);
        let mut dw = Matrix::zeros(self.m1, self.d);
        for j in 0..self.m1 {
            if d1[j] != 0.0 {
                for (rv, &xv) in dw.row_mut(j).iter_mut().zip(x) {
                    *rv = d1[j] * xv;
                }
            }
        }
        let mut dv = Matrix::zeros(self.m2, self.m1);
        for i in 0..self.m2 {
            if d2[i] != 0.0 {
                for (rv, &hv) in dv.row_mut(i).iter_mut().zip(&cache.h1) {
                    *rv = d2[i] * hv;
                }
            }
        }
        Ok((dw, dv))
    }

    pub fn sign_pattern(&self, x: &[f64], at: SignAt) -> Result<SignPattern> {
        self.check_x(x)?;
        let (w, v) = match at {
            SignAt::Init => (self.w0.clone(), self.v0.clone()),
            SignAt::Current => (self.effective_w(), self.effective_v()),
            SignAt::Custom(w, v) => {
                let v = v.ok_or_else(|| {
                    LabError::InvalidInput("three-layer custom sign pattern needs V".into())
                })?;
                if w.rows != self.m1 || w.cols != self.d || v.rows != self.m2 || v.cols != self.m1
                {
                    return Err(LabError::InvalidInput("custom weight shape mismatch".into()));
                }
                (w.clone(), v.clone())
            }
        };
        let dw = sign_rows(&w, &self.b1, x);
        let h1: Vec<f64> = (0..self.m1)
            .map(|i| relu(dot(w.row(i), x) + self.b1[i]))
            .collect();
        let dv = sign_rows(&v, &self.b2, &h1);
        Ok(SignPattern {
            dw,
            dv: Some(dv),
        })
    }

    /// Forward with both ReLU layers replaced by frozen-indicator gating.
    ///
    /// `BiasMode::Semi` drops b₂ (the replaced top layer's bias),
    /// `BiasMode::None` drops b₁ as well.
    pub fn pseudo_forward(
        &self,
        x: &[f64],
        frozen: &SignPattern,
        bias: BiasMode,
    ) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let dv = frozen
            .dv
            .as_ref()
            .ok_or_else(|| LabError::InvalidInput("three-layer pseudo needs dv".into()))?;
        if frozen.dw.len() != self.m1 || dv.len() != self.m2 {
            return Err(LabError::InvalidInput("frozen pattern width mismatch".into()));
        }
        let (use_b1, use_b2) = match bias {
            BiasMode::Full => (true, true),
            BiasMode::Semi => (true, false),
            BiasMode::None => (false, false),
        };
        let w = self.effective_w();
        let v = self.effective_v();
        let g1: Vec<f64> = (0..self.m1)
            .map(|i| {
                if frozen.dw[i] == 0 {
                    0.0
                } else {
                    dot(w.row(i), x) + if use_b1 { self.b1[i] } else { 0.0 }
                }
            })
            .collect();
        let g2: Vec<f64> = (0..self.m2)
            .map(|i| {
                if dv[i] == 0 {
                    0.0
                } else {
                    dot(v.row(i), &g1) + if use_b2 { self.b2[i] } else { 0.0 }
                }
            })
            .collect();
        Ok((0..self.k)
            .map(|r| self.lambda * dot(self.a.row(r), &g2))
            .collect())
    }

    /// Top-hidden-layer activations at init, dimension m₂ (λ not applied).
    pub fn conjugate_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let c = three_layer_forward(&self.w0, &self.b1, &self.v0, &self.b2, &self.a, 1.0, x);
        Ok(c.h2)
    }

    /// Gradient of the outputs w.r.t. (V, W) at init, concatenated per output:
    /// block r = [λ a_{r,i} 𝕀₂_i h₁_j  (m₂×m₁ row-major) , δ₁_j x_l  (m₁×d)].
    pub fn ntk_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let cache =
            three_layer_forward(&self.w0, &self.b1, &self.v0, &self.b2, &self.a, self.lambda, x);
        let mut feats = Vec::with_capacity(self.k * (self.m2 * self.m1 + self.m1 * self.d));
        for r in 0..self.k {
            let mut e_r = vec![0.0; self.k];
            e_r[r] = 1.0;
            let (d1, d2) = three_layer_deltas(&self.v0, &self.a, self.lambda, &cache, &e_r);
            for i in 0..self.m2 {
                for &h in &cache.h1 {
                    feats.push(d2[i] * h);
                }
            }
            for j in 0..self.m1 {
                for &xv in x {
                    feats.push(d1[j] * xv);
                }
            }
        }
        Ok(feats)
    }

    /// Factored linearization point for kernel-space training (k = 1 only).
    pub fn ntk_point(&self, x: &[f64]) -> Result<NtkPoint> {
        self.check_x(x)?;
        if self.k != 1 {
            return Err(LabError::InvalidInput(
                "factored NTK points support single-output nets only".into(),
            ));
        }
        let cache =
            three_layer_forward(&self.w0, &self.b1, &self.v0, &self.b2, &self.a, self.lambda, x);
        let (d1, d2) = three_layer_deltas(&self.v0, &self.a, self.lambda, &cache, &[1.0]);
        Ok(NtkPoint {
            f0: cache.out[0],
            blocks: vec![(d2, cache.h1), (d1, x.to_vec())],
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| LabError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| LabError::Serde(e.to_string()))
    }
}

/// A sample's NTK linearization in factored form: the feature inner product
/// between points p, q is Σ_blocks ⟨l_p, l_q⟩·⟨r_p, r_q⟩, and `f0` is the
/// network output at init (the linear model's offset).
#[derive(Debug, Clone)]
pub struct NtkPoint {
    pub f0: f64,
    pub blocks: Vec<(Vec<f64>, Vec<f64>)>,
}

/// NTK kernel value ⟨φ(p), φ(q)⟩ from factored points.
pub fn ntk_kernel(p: &NtkPoint, q: &NtkPoint) -> f64 {
    p.blocks
        .iter()
        .zip(&q.blocks)
        .map(|((lp, rp), (lq, rq))| dot(lp, lq) * dot(rp, rq))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_x(d: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let n = crate::numerics::norm2(&x);
        x.iter_mut().for_each(|v| *v /= n);
        x
    }

    #[test]
    fn init_shapes_and_zero_deltas() {
        let mut rng = RngStream::new(1, 0);
        let net = TwoLayerNet::init(8, 3, 2, 0.5, InitProfile::Theory, &mut rng).unwrap();
        assert!(net.wdelta.data().iter().all(|&v| v == 0.0));
        let net3 = ThreeLayerNet::init(8, 6, 3, 2, InitProfile::Experiment, &mut rng).unwrap();
        assert_eq!(net3.lambda, 1.0);
        assert!(net3.vdelta.data().iter().all(|&v| v == 0.0));
        assert!(TwoLayerNet::init(8, 3, 2, 0.0, InitProfile::Theory, &mut rng).is_err());
    }

    #[test]
    fn init_weight_scales() {
        let mut rng = RngStream::new(2, 0);
        let m = 10_000;
        let net = TwoLayerNet::init(m, 4, 1, 0.1, InitProfile::Theory, &mut rng).unwrap();
        let var_w =
            net.w0.data().iter().map(|v| v * v).sum::<f64>() / (m as f64 * 4.0);
        assert!((var_w - 1.0 / m as f64).abs() < 0.05 / m as f64);
        let var_a = net.a.data().iter().map(|v| v * v).sum::<f64>() / m as f64;
        assert!((var_a - 0.01).abs() < 0.0005, "a variance {var_a}");
        let exp = TwoLayerNet::init(m, 4, 1, 0.1, InitProfile::Experiment, &mut rng).unwrap();
        let var_a =
            exp.a.data().iter().map(|v| v * v).sum::<f64>() / m as f64;
        assert!((var_a - 1.0).abs() < 0.05, "a variance {var_a}");
    }

    #[test]
    fn three_layer_init_output_scale() {
        let mut seeds = RngStream::new(77, 0);
        for s in 0..100u64 {
            let mut rng = RngStream::new(1000 + s, 0);
            let net = ThreeLayerNet::init(64, 64, 4, 1, InitProfile::Experiment, &mut rng).unwrap();
            let x = unit_x(4, &mut seeds);
            let out = net.forward(&x).unwrap()[0];
            assert!(out.abs() <= 20.0, "init output {out} too large");
        }
    }

    #[test]
    fn two_layer_forward_hand_cases() {
        let mut rng = RngStream::new(3, 0);
        let mut net = TwoLayerNet::init(1, 2, 1, 1.0, InitProfile::Theory, &mut rng).unwrap();
        net.w0 = Matrix::from_rows(vec![vec![1.0, 0.0]]);
        net.b = vec![0.0];
        net.a = Matrix::from_rows(vec![vec![1.0]]);
        assert_relative_eq!(net.forward(&[1.0, 0.0]).unwrap()[0], 1.0);
        net.w0 = Matrix::from_rows(vec![vec![-1.0, 0.0]]);
        net.b = vec![0.3];
        assert_eq!(net.forward(&[1.0, 0.0]).unwrap()[0], 0.0);
        net.a = Matrix::from_rows(vec![vec![0.0]]);
        assert_eq!(net.forward(&[0.3, 0.4]).unwrap()[0], 0.0);
        assert!(net.forward(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn three_layer_forward_hand_cases() {
        let mut rng = RngStream::new(4, 0);
        let mut net = ThreeLayerNet::init(1, 1, 1, 1, InitProfile::Theory, &mut rng).unwrap();
        net.w0 = Matrix::from_rows(vec![vec![1.0]]);
        net.v0 = Matrix::from_rows(vec![vec![1.0]]);
        net.b1 = vec![0.0];
        net.b2 = vec![0.0];
        net.a = Matrix::from_rows(vec![vec![0.7]]);
        assert_relative_eq!(net.forward(&[1.0]).unwrap()[0], 0.7);
        net.lambda = 0.5;
        assert_relative_eq!(net.forward(&[1.0]).unwrap()[0], 0.35);
        net.lambda = 0.0;
        assert_eq!(net.forward(&[1.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn lambda_scaling_is_linear() {
        let mut rng = RngStream::new(5, 0);
        let mut net = ThreeLayerNet::init(16, 16, 4, 2, InitProfile::Experiment, &mut rng).unwrap();
        let x = unit_x(4, &mut rng);
        let full = net.forward(&x).unwrap();
        net.lambda = 0.5;
        let half = net.forward(&x).unwrap();
        for (f, h) in full.iter().zip(&half) {
            assert_relative_eq!(0.5 * f, *h, epsilon = 1e-14);
        }
    }

    #[test]
    fn positive_homogeneity_bias_free() {
        // Bias-free net: scaling W and V by √λ scales the output by λ.
        let mut rng = RngStream::new(6, 0);
        let mut net = ThreeLayerNet::init(16, 16, 4, 1, InitProfile::Experiment, &mut rng).unwrap();
        net.b1 = vec![0.0; 16];
        net.b2 = vec![0.0; 16];
        let x = unit_x(4, &mut rng);
        let base = net.forward(&x).unwrap()[0];
        let lam: f64 = 0.37;
        let s = lam.sqrt();
        net.w0.scale(s);
        net.v0.scale(s);
        assert_relative_eq!(net.forward(&x).unwrap()[0], lam * base, epsilon = 1e-12);
    }

    #[test]
    fn backward_zero_loss_grad_and_dead_neurons() {
        let mut rng = RngStream::new(7, 0);
        let net = TwoLayerNet::init(32, 4, 2, 1.0, InitProfile::Experiment, &mut rng).unwrap();
        let x = unit_x(4, &mut rng);
        let dw = net.backward(&x, &[0.0, 0.0]).unwrap();
        assert!(dw.data().iter().all(|&v| v == 0.0));
        let cache = net.forward_cache(&x).unwrap();
        let dw = net.backward(&x, &[1.0, -0.5]).unwrap();
        for i in 0..net.m {
            if cache.pre[i] < 0.0 {
                assert!(dw.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    /// Central finite differences of ⟨g, f(x)⟩ at kink-free points.
    fn fd_check_two(net: &TwoLayerNet, x: &[f64], g: &[f64]) -> f64 {
        let cache = net.forward_cache(x).unwrap();
        if cache.pre.iter().any(|p| p.abs() < 1e-3) {
            return 0.0; // skip kink neighborhoods
        }
        let dw = net.backward(x, g).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..net.m.min(4) {
            for j in 0..net.d {
                let mut plus = net.clone();
                plus.wdelta.set(i, j, plus.wdelta.get(i, j) + h);
                let mut minus = net.clone();
                minus.wdelta.set(i, j, minus.wdelta.get(i, j) - h);
                let fp: f64 = plus
                    .forward(x)
                    .unwrap()
                    .iter()
                    .zip(g)
                    .map(|(o, gg)| o * gg)
                    .sum();
                let fm: f64 = minus
                    .forward(x)
                    .unwrap()
                    .iter()
                    .zip(g)
                    .map(|(o, gg)| o * gg)
                    .sum();
                let est = (fp - fm) / (2.0 * h);
                let exact = dw.get(i, j);
                let denom = exact.abs().max(1e-8);
                max_rel = max_rel.max((est - exact).abs() / denom);
            }
        }
        max_rel
    }

    #[test]
    fn two_layer_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(8, 0);
        let mut checked = 0;
        for s in 0..30u64 {
            let mut nr = RngStream::new(100 + s, 0);
            let net = TwoLayerNet::init(12, 4, 2, 1.0, InitProfile::Experiment, &mut nr).unwrap();
            let x = unit_x(4, &mut rng);
            let g = vec![rng.standard_normal(), rng.standard_normal()];
            let rel = fd_check_two(&net, &x, &g);
            if rel > 0.0 {
                checked += 1;
                assert!(rel < 1e-4, "rel error {rel}");
            }
        }
        assert!(checked >= 10, "too many kink skips: {checked}");
    }

    #[test]
    fn three_layer_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(9, 0);
        let mut checked = 0;
        for s in 0..20u64 {
            let mut nr = RngStream::new(200 + s, 0);
            let mut net =
                ThreeLayerNet::init(10, 8, 4, 1, InitProfile::Experiment, &mut nr).unwrap();
            net.lambda = 0.7;
            let x = unit_x(4, &mut rng);
            let cache = net.forward_cache(&x).unwrap();
            if cache.pre1.iter().chain(&cache.pre2).any(|p| p.abs() < 1e-3) {
                continue;
            }
            checked += 1;
            let g = vec![rng.standard_normal()];
            let (dw, dv) = net.backward(&x, &g).unwrap();
            let h = 1e-5;
            for (mat, is_w, ij) in [(&dw, true, (3usize, 2usize)), (&dv, false, (5, 4))] {
                let (i, j) = ij;
                let mut plus = net.clone();
                let mut minus = net.clone();
                if is_w {
                    plus.wdelta.set(i, j, h);
                    minus.wdelta.set(i, j, -h);
                } else {
                    plus.vdelta.set(i, j, h);
                    minus.vdelta.set(i, j, -h);
                }
                let fp = plus.forward(&x).unwrap()[0] * g[0];
                let fm = minus.forward(&x).unwrap()[0] * g[0];
                let est = (fp - fm) / (2.0 * h);
                let exact = mat.get(i, j);
                let rel = (est - exact).abs() / exact.abs().max(1e-8);
                assert!(rel < 1e-4, "rel error {rel} (is_w={is_w})");
            }
        }
        assert!(checked >= 8, "too many kink skips: {checked}");
    }

    #[test]
    fn sign_pattern_basics() {
        let mut rng = RngStream::new(10, 0);
        let net = TwoLayerNet::init(10_000, 4, 1, 1.0, InitProfile::Experiment, &mut rng).unwrap();
        let x = unit_x(4, &mut rng);
        let p1 = net.sign_pattern(&x, SignAt::Init).unwrap();
        let p2 = net.sign_pattern(&x, SignAt::Init).unwrap();
        assert_eq!(p1, p2);
        // Zero deltas: current == init == custom(w0).
        let p3 = net.sign_pattern(&x, SignAt::Current).unwrap();
        let p4 = net.sign_pattern(&x, SignAt::Custom(&net.w0, None)).unwrap();
        assert_eq!(p1, p3);
        assert_eq!(p1, p4);
        let frac = p1.dw.iter().map(|&v| v as f64).sum::<f64>() / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "active fraction {frac}");
    }

    #[test]
    fn pseudo_equals_forward_at_current_signs() {
        let mut rng = RngStream::new(11, 0);
        for s in 0..20u64 {
            let mut nr = RngStream::new(300 + s, 0);
            let mut net =
                TwoLayerNet::init(32, 4, 2, 1.0, InitProfile::Experiment, &mut nr).unwrap();
            net.wdelta = sample_gaussian_matrix(32, 4, 0.01, &mut nr).unwrap();
            let x = unit_x(4, &mut rng);
            let frozen = net.sign_pattern(&x, SignAt::Current).unwrap();
            let pseudo = net.pseudo_forward(&x, &frozen, BiasMode::Full).unwrap();
            let real = net.forward(&x).unwrap();
            assert_eq!(pseudo, real, "two-layer pseudo/real mismatch");

            let mut net3 =
                ThreeLayerNet::init(16, 12, 4, 2, InitProfile::Experiment, &mut nr).unwrap();
            net3.wdelta = sample_gaussian_matrix(16, 4, 0.01, &mut nr).unwrap();
            net3.vdelta = sample_gaussian_matrix(12, 16, 0.01, &mut nr).unwrap();
            net3.lambda = 0.9;
            let frozen = net3.sign_pattern(&x, SignAt::Current).unwrap();
            let pseudo = net3.pseudo_forward(&x, &frozen, BiasMode::Full).unwrap();
            let real = net3.forward(&x).unwrap();
            assert_eq!(pseudo, real, "three-layer pseudo/real mismatch");
        }
    }

    #[test]
    fn pseudo_is_linear_in_wdelta() {
        let mut rng = RngStream::new(12, 0);
        let mut net = TwoLayerNet::init(16, 4, 1, 1.0, InitProfile::Experiment, &mut rng).unwrap();
        let x = unit_x(4, &mut rng);
        let frozen = net.sign_pattern(&x, SignAt::Init).unwrap();
        let base = net.pseudo_forward(&x, &frozen, BiasMode::Full).unwrap()[0];
        let wp = sample_gaussian_matrix(16, 4, 1.0, &mut rng).unwrap();
        net.wdelta = wp.clone();
        let one = net.pseudo_forward(&x, &frozen, BiasMode::Full).unwrap()[0];
        net.wdelta = {
            let mut m = wp.clone();
            m.scale(2.0);
            m
        };
        let two = net.pseudo_forward(&x, &frozen, BiasMode::Full).unwrap()[0];
        // Increment part doubles: two − base = 2(one − base).
        assert_relative_eq!(two - base, 2.0 * (one - base), epsilon = 1e-10);
    }

    #[test]
    fn bias_modes_differ_only_by_bias_terms() {
        let mut rng = RngStream::new(13, 0);
        let mut net = TwoLayerNet::init(8, 4, 1, 1.0, InitProfile::Experiment, &mut rng).unwrap();
        let x = unit_x(4, &mut rng);
        let frozen = net.sign_pattern(&x, SignAt::Init).unwrap();
        let full = net.pseudo_forward(&x, &frozen, BiasMode::Full).unwrap()[0];
        let none = net.pseudo_forward(&x, &frozen, BiasMode::None).unwrap()[0];
        let bias_part: f64 = (0..net.m)
            .filter(|&i| frozen.dw[i] == 1)
            .map(|i| net.a.get(0, i) * net.b[i])
            .sum();
        assert_relative_eq!(full - none, bias_part, epsilon = 1e-12);
        // Two-layer has one bias, so semi == none here.
        let semi = net.pseudo_forward(&x, &frozen, BiasMode::Semi).unwrap()[0];
        assert_eq!(semi, none);
        // Zero biases: all modes coincide.
        net.b = vec![0.0; 8];
        let f = net.pseudo_forward(&x, &frozen, BiasMode::Full).unwrap()[0];
        let n = net.pseudo_forward(&x, &frozen, BiasMode::None).unwrap()[0];
        assert_eq!(f, n);
    }

    #[test]
    fn conjugate_features_properties() {
        let mut rng = RngStream::new(14, 0);
        let net = TwoLayerNet::init(24, 4, 1, 1.0, InitProfile::Experiment, &mut rng).unwrap();
        let x = unit_x(4, &mut rng);
        let f = net.conjugate_features(&x).unwrap();
        assert_eq!(f.len(), 24);
        assert!(f.iter().all(|&v| v >= 0.0));
        // Regressing with replaced a reproduces the forward pass.
        let mut net2 = net.clone();
        net2.a = sample_gaussian_matrix(1, 24, 1.0, &mut rng).unwrap();
        let pred = dot(net2.a.row(0), &f);
        assert_relative_eq!(pred, net2.forward(&x).unwrap()[0], epsilon = 1e-12);

        let net3 = ThreeLayerNet::init(8, 6, 4, 1, InitProfile::Experiment, &mut rng).unwrap();
        let f3 = net3.conjugate_features(&x).unwrap();
        assert_eq!(f3.len(), 6);
        assert!(f3.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ntk_features_match_directional_derivative() {
        let mut rng = RngStream::new(15, 0);
        for s in 0..10u64 {
            let mut nr = RngStream::new(400 + s, 0);
            let net = TwoLayerNet::init(64, 4, 1, 1.0, InitProfile::Experiment, &mut nr).unwrap();
            let x = unit_x(4, &mut rng);
            let feats = net.ntk_features(&x).unwrap();
            let dir = sample_gaussian_matrix(64, 4, 1.0, &mut nr).unwrap();
            let lin: f64 = feats.iter().zip(dir.data()).map(|(f, d)| f * d).sum();
            let delta = 1e-4;
            let mut pert = net.clone();
            pert.wdelta = {
                let mut m = dir.clone();
                m.scale(delta);
                m
            };
            let fd = (pert.forward(&x).unwrap()[0] - net.forward(&x).unwrap()[0]) / delta;
            assert!(
                (lin - fd).abs() / lin.abs().max(1e-8) < 1e-2,
                "directional derivative mismatch: {lin} vs {fd}"
            );
        }
    }

    #[test]
    fn ntk_point_kernel_matches_explicit_features() {
        let mut rng = RngStream::new(16, 0);
        let net = TwoLayerNet::init(32, 4, 1, 1.0, InitProfile::Experiment, &mut rng).unwrap();
        let x = unit_x(4, &mut rng);
        let y = unit_x(4, &mut rng);
        let fx = net.ntk_features(&x).unwrap();
        let fy = net.ntk_features(&y).unwrap();
        let explicit = dot(&fx, &fy);
        let k = ntk_kernel(&net.ntk_point(&x).unwrap(), &net.ntk_point(&y).unwrap());
        assert_relative_eq!(explicit, k, epsilon = 1e-10);

        let net3 = ThreeLayerNet::init(12, 10, 4, 1, InitProfile::Experiment, &mut rng).unwrap();
        let fx = net3.ntk_features(&x).unwrap();
        let fy = net3.ntk_features(&y).unwrap();
        let explicit = dot(&fx, &fy);
        let k = ntk_kernel(&net3.ntk_point(&x).unwrap(), &net3.ntk_point(&y).unwrap());
        assert_relative_eq!(explicit, k, epsilon = 1e-10);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = RngStream::new(17, 0);
        let mut net = TwoLayerNet::init(16, 4, 2, 0.3, InitProfile::Theory, &mut rng).unwrap();
        net.wdelta = sample_gaussian_matrix(16, 4, 1.0, &mut rng).unwrap();
        let json = net.to_json().unwrap();
        let back = TwoLayerNet::from_json(&json).unwrap();
        assert_eq!(net, back);

        let mut net3 = ThreeLayerNet::init(8, 6, 4, 1, InitProfile::Experiment, &mut rng).unwrap();
        net3.lambda = 0.123456789123456789;
        let json = net3.to_json().unwrap();
        let back = ThreeLayerNet::from_json(&json).unwrap();
        assert_eq!(net3, back);
    }
}
