//! Target-function concept classes, the built-in experiment targets, and
//! synthetic dataset generation.
//!
//! Two families of targets exist side by side:
//! - structured concept-class targets ([`TwoLayerTarget`], [`ThreeLayerTarget`])
//!   with unit-norm weight vectors and smooth activations carrying Taylor data,
//!   used by the constructive-approximation machinery; and
//! - the raw benchmark evaluators ([`builtin_experiment_target`]) applied
//!   directly to normalized Gaussian inputs by the experiment harness.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{dot, norm2, RngStream};

/// Default Taylor truncation degree for catalogued activations.
pub const TAYLOR_DEGREE: usize = 30;

/// Smallest degree ≥ [`TAYLOR_DEGREE`] at which the analytic tail bound
/// `|c|^{D+1}/(D+1)!` drops below 1e−13, so the truncation matches the closed
/// form within 1e−10 on [−1, 1] even for large frequencies like cos(7z).
fn degree_for(c: f64) -> usize {
    let mut d = TAYLOR_DEGREE;
    let mut tail = (0..=d).fold(1.0f64, |acc, i| {
        if i == 0 { acc } else { acc * c.abs() / i as f64 }
    }) * c.abs()
        / (d as f64 + 1.0);
    while tail > 1e-13 && d < 200 {
        d += 1;
        tail *= c.abs() / (d as f64 + 1.0);
    }
    d
}

/// A smooth scalar activation with truncated Taylor data `c_0..c_D`.
///
/// For the catalogued analytic activations (sin, cos, exp−1) the evaluator is
/// the closed form and the series matches it within 1e−10 on [−1, 1] at the
/// default degree. The `tanh-trunc` and polynomial entries are defined *as*
/// their polynomials, so evaluator and series agree identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothActivation {
    pub name: String,
    kind: ActKind,
    /// Taylor coefficients c_0..c_D of the evaluator around 0.
    pub taylor: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ActKind {
    Sin(f64),
    Cos(f64),
    ExpM1(f64),
    /// Truncated Taylor polynomial of tanh(c·z); the polynomial is the activation.
    TanhTrunc(f64),
    /// Plain polynomial with the given coefficients (low to high degree).
    Poly,
}

impl SmoothActivation {
    pub fn sin(c: f64) -> Self {
        let taylor = (0..=degree_for(c))
            .map(|i| {
                if i % 2 == 1 {
                    let sign = if i % 4 == 1 { 1.0 } else { -1.0 };
                    sign * c.powi(i as i32) / factorial(i)
                } else {
                    0.0
                }
            })
            .collect();
        SmoothActivation {
            name: format!("sin({c}z)"),
            kind: ActKind::Sin(c),
            taylor,
        }
    }

    pub fn cos(c: f64) -> Self {
        let taylor = (0..=degree_for(c))
            .map(|i| {
                if i % 2 == 0 {
                    let sign = if i % 4 == 0 { 1.0 } else { -1.0 };
                    sign * c.powi(i as i32) / factorial(i)
                } else {
                    0.0
                }
            })
            .collect();
        SmoothActivation {
            name: format!("cos({c}z)"),
            kind: ActKind::Cos(c),
            taylor,
        }
    }

    pub fn exp_m1(c: f64) -> Self {
        let taylor = (0..=degree_for(c))
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    c.powi(i as i32) / factorial(i)
                }
            })
            .collect();
        SmoothActivation {
            name: format!("exp({c}z)-1"),
            kind: ActKind::ExpM1(c),
            taylor,
        }
    }

    /// Degree-`TAYLOR_DEGREE` Taylor truncation of `tanh(c·z)`, which *is* the
    /// activation (the polynomial, not tanh itself).
    pub fn tanh_trunc(c: f64) -> Self {
        // Coefficients of tanh from its ODE: tanh' = 1 − tanh².
        let d = TAYLOR_DEGREE;
        let mut a = vec![0.0f64; d + 1];
        if d >= 1 {
            a[1] = 1.0;
        }
        for n in 1..d {
            let conv: f64 = (0..=n).map(|i| a[i] * a[n - i]).sum();
            let base = if n == 0 { 1.0 } else { 0.0 };
            a[n + 1] = (base - conv) / (n as f64 + 1.0);
        }
        let taylor: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, &ai)| ai * c.powi(i as i32))
            .collect();
        SmoothActivation {
            name: format!("tanh-trunc({c}z)"),
            kind: ActKind::TanhTrunc(c),
            taylor,
        }
    }

    pub fn polynomial(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() > TAYLOR_DEGREE + 1 {
            return Err(LabError::InvalidParameter(format!(
                "polynomial degree {} exceeds catalogue degree {TAYLOR_DEGREE}",
                coeffs.len() - 1
            )));
        }
        let mut taylor = coeffs;
        taylor.resize(TAYLOR_DEGREE + 1, 0.0);
        Ok(SmoothActivation {
            name: "poly".to_string(),
            kind: ActKind::Poly,
            taylor,
        })
    }

    /// Identity activation φ(z) = z.
    pub fn identity() -> Self {
        Self::polynomial(vec![0.0, 1.0]).expect("identity is degree 1")
    }

    pub fn constant(c: f64) -> Self {
        Self::polynomial(vec![c]).expect("constant is degree 0")
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self.kind {
            ActKind::Sin(c) => (c * z).sin(),
            ActKind::Cos(c) => (c * z).cos(),
            ActKind::ExpM1(c) => (c * z).exp_m1(),
            ActKind::TanhTrunc(_) | ActKind::Poly => self.taylor_eval(z),
        }
    }

    /// Horner evaluation of the truncated Taylor series.
    pub fn taylor_eval(&self, z: f64) -> f64 {
        self.taylor.iter().rev().fold(0.0, |acc, &c| acc * z + c)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = norm2(v);
    if (n - 1.0).abs() > 1e-9 {
        return Err(LabError::InvalidInput(format!(
            "{what} must be unit-norm, got ‖·‖₂ = {n}"
        )));
    }
    Ok(())
}

/// Two-layer concept-class target:
/// output_r(x) = Σ_{i∈[p]} a*_{r,i} · φ_i(⟨w*_{1,i}, x⟩) · ⟨w*_{2,i}, x⟩.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoLayerTarget {
    pub p: usize,
    pub k: usize,
    pub d: usize,
    /// Unit vectors w*_{1,i}, one per term.
    pub w1: Vec<Vec<f64>>,
    /// Unit vectors w*_{2,i}, one per term.
    pub w2: Vec<Vec<f64>>,
    /// a*[r][i] ∈ [−1, 1].
    pub a_star: Vec<Vec<f64>>,
    pub phis: Vec<SmoothActivation>,
}

impl TwoLayerTarget {
    pub fn new(
        w1: Vec<Vec<f64>>,
        w2: Vec<Vec<f64>>,
        a_star: Vec<Vec<f64>>,
        phis: Vec<SmoothActivation>,
    ) -> Result<Self> {
        let p = w1.len();
        if p == 0 || w2.len() != p || phis.len() != p {
            return Err(LabError::InvalidInput(
                "term lists (w1, w2, phis) must be nonempty and equal length".into(),
            ));
        }
        let d = w1[0].len();
        for (i, v) in w1.iter().chain(w2.iter()).enumerate() {
            if v.len() != d {
                return Err(LabError::InvalidInput(format!(
                    "weight vector {i} has dim {} ≠ {d}",
                    v.len()
                )));
            }
            check_unit(v, "target weight vector")?;
        }
        let k = a_star.len();
        if k == 0 {
            return Err(LabError::InvalidInput("a* must have ≥1 output row".into()));
        }
        for row in &a_star {
            if row.len() != p {
                return Err(LabError::InvalidInput("a* row length must equal p".into()));
            }
            if row.iter().any(|v| v.abs() > 1.0 + 1e-12) {
                return Err(LabError::InvalidInput("|a*| must be ≤ 1".into()));
            }
        }
        Ok(TwoLayerTarget {
            p,
            k,
            d,
            w1,
            w2,
            a_star,
            phis,
        })
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(LabError::InvalidInput(format!(
                "input dim {} ≠ target dim {}",
                x.len(),
                self.d
            )));
        }
        let terms: Vec<f64> = (0..self.p)
            .map(|i| self.phis[i].eval(dot(&self.w1[i], x)) * dot(&self.w2[i], x))
            .collect();
        Ok(self
            .a_star
            .iter()
            .map(|row| dot(row, &terms))
            .collect())
    }
}

/// Three-layer concept-class target:
/// output_r(x) = Σ_{i∈[p₁]} a*_{r,i} · Φ_i(Σ_j v*_{1,i,j} φ_{1,j}(⟨w*_{1,j},x⟩))
///                           · (Σ_j v*_{2,i,j} φ_{2,j}(⟨w*_{2,j},x⟩)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThreeLayerTarget {
    pub p1: usize,
    pub p2: usize,
    pub k: usize,
    pub d: usize,
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
    /// Unit vectors v*_{1,i}, v*_{2,i} ∈ ℝ^{p₂}, one pair per i ∈ [p₁].
    pub v1: Vec<Vec<f64>>,
    pub v2: Vec<Vec<f64>>,
    pub a_star: Vec<Vec<f64>>,
    pub phi1: Vec<SmoothActivation>,
    pub phi2: Vec<SmoothActivation>,
    pub cap_phi: Vec<SmoothActivation>,
}

impl ThreeLayerTarget {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w1: Vec<Vec<f64>>,
        w2: Vec<Vec<f64>>,
        v1: Vec<Vec<f64>>,
        v2: Vec<Vec<f64>>,
        a_star: Vec<Vec<f64>>,
        phi1: Vec<SmoothActivation>,
        phi2: Vec<SmoothActivation>,
        cap_phi: Vec<SmoothActivation>,
    ) -> Result<Self> {
        let p2 = w1.len();
        let p1 = v1.len();
        if p2 == 0 || p1 == 0 {
            return Err(LabError::InvalidInput("p1 and p2 must be ≥ 1".into()));
        }
        if w2.len() != p2 || phi1.len() != p2 || phi2.len() != p2 {
            return Err(LabError::InvalidInput("per-j lists must have length p2".into()));
        }
        if v2.len() != p1 || cap_phi.len() != p1 {
            return Err(LabError::InvalidInput("per-i lists must have length p1".into()));
        }
        let d = w1[0].len();
        for v in w1.iter().chain(w2.iter()) {
            if v.len() != d {
                return Err(LabError::InvalidInput("w* dim mismatch".into()));
            }
            check_unit(v, "w*")?;
        }
        for v in v1.iter().chain(v2.iter()) {
            if v.len() != p2 {
                return Err(LabError::InvalidInput("v* must live in ℝ^{p2}".into()));
            }
            check_unit(v, "v*")?;
        }
        let k = a_star.len();
        if k == 0 || a_star.iter().any(|r| r.len() != p1) {
            return Err(LabError::InvalidInput("a* must be k×p1 with k ≥ 1".into()));
        }
        if a_star.iter().flatten().any(|v| v.abs() > 1.0 + 1e-12) {
            return Err(LabError::InvalidInput("|a*| must be ≤ 1".into()));
        }
        Ok(ThreeLayerTarget {
            p1,
            p2,
            k,
            d,
            w1,
            w2,
            v1,
            v2,
            a_star,
            phi1,
            phi2,
            cap_phi,
        })
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(LabError::InvalidInput(format!(
                "input dim {} ≠ target dim {}",
                x.len(),
                self.d
            )));
        }
        let u1: Vec<f64> = (0..self.p2)
            .map(|j| self.phi1[j].eval(dot(&self.w1[j], x)))
            .collect();
        let u2: Vec<f64> = (0..self.p2)
            .map(|j| self.phi2[j].eval(dot(&self.w2[j], x)))
            .collect();
        let terms: Vec<f64> = (0..self.p1)
            .map(|i| self.cap_phi[i].eval(dot(&self.v1[i], &u1)) * dot(&self.v2[i], &u2))
            .collect();
        Ok(self
            .a_star
            .iter()
            .map(|row| dot(row, &terms))
            .collect())
    }
}

/// Built-in scalar benchmark targets on ℝ⁴.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentTarget {
    /// (sin 3x₁ + sin 3x₂ + sin 3x₃ − 2)² · cos 7x₄
    SinBench,
    /// (tanh 8x₁ + tanh 8x₂ + tanh 8x₃ − 2)² · tanh 8x₄
    TanhBench,
}

impl ExperimentTarget {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != 4 {
            return Err(LabError::InvalidInput(format!(
                "benchmark targets take 4-dim inputs, got {}",
                x.len()
            )));
        }
        Ok(match self {
            ExperimentTarget::SinBench => {
                let s = (3.0 * x[0]).sin() + (3.0 * x[1]).sin() + (3.0 * x[2]).sin() - 2.0;
                s * s * (7.0 * x[3]).cos()
            }
            ExperimentTarget::TanhBench => {
                let s = (8.0 * x[0]).tanh() + (8.0 * x[1]).tanh() + (8.0 * x[2]).tanh() - 2.0;
                s * s * (8.0 * x[3]).tanh()
            }
        })
    }
}

/// Look up a benchmark target by its config name.
pub fn builtin_experiment_target(name: &str) -> Result<ExperimentTarget> {
    match name {
        "sin-fig1" => Ok(ExperimentTarget::SinBench),
        "tanh-fig6" => Ok(ExperimentTarget::TanhBench),
        other => Err(LabError::InvalidParameter(format!(
            "unknown experiment target '{other}' (expected sin-fig1 or tanh-fig6)"
        ))),
    }
}

/// How inputs are placed on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaddingMode {
    /// x = g/‖g‖₂ for Gaussian g ∈ ℝ^d.
    Raw,
    /// Raw x rescaled to norm √3/2 then appended with a constant coordinate
    /// 1/2, giving a unit vector in ℝ^{d+1} with the original direction.
    PadHalf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    pub padding: PaddingMode,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.labels[0].len()
    }

    /// One row per sample: `x_1..x_d, y_1..y_k`, with header.
    pub fn to_csv(&self) -> String {
        let d = self.input_dim();
        let k = self.output_dim();
        let mut s = String::new();
        let header: Vec<String> = (1..=d)
            .map(|i| format!("x_{i}"))
            .chain((1..=k).map(|i| format!("y_{i}")))
            .collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for (x, y) in self.inputs.iter().zip(&self.labels) {
            let mut first = true;
            for v in x.iter().chain(y.iter()) {
                if !first {
                    s.push(',');
                }
                let _ = write!(s, "{v:.17e}");
                first = false;
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Generate `n` unit-sphere inputs in ℝ^d (ℝ^{d+1} for pad-half) with labels
/// from `target`.
pub fn generate_dataset<F>(
    d: usize,
    n: usize,
    target: F,
    padding: PaddingMode,
    rng: &mut RngStream,
) -> Result<Dataset>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if d == 0 || n == 0 {
        return Err(LabError::InvalidParameter(
            "generate_dataset requires d ≥ 1 and N ≥ 1".into(),
        ));
    }
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut g: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let nrm = norm2(&g);
        if nrm == 0.0 {
            return Err(LabError::InvalidInput("degenerate zero Gaussian draw".into()));
        }
        for v in g.iter_mut() {
            *v /= nrm;
        }
        let x = match padding {
            PaddingMode::Raw => g,
            PaddingMode::PadHalf => {
                let scale = 3f64.sqrt() / 2.0;
                let mut x: Vec<f64> = g.iter().map(|v| v * scale).collect();
                x.push(0.5);
                x
            }
        };
        labels.push(target(&x)?);
        inputs.push(x);
    }
    Ok(Dataset {
        inputs,
        labels,
        padding,
    })
}

/// User-supplied complexity scalars; never computed from activation data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ComplexityParams {
    pub cs: f64,
    pub ceps: f64,
    pub c0: f64,
}

impl ComplexityParams {
    pub fn new(cs: f64, ceps: f64, c0: f64) -> Result<Self> {
        if cs <= 0.0 || ceps <= 0.0 || c0 <= 0.0 {
            return Err(LabError::InvalidParameter(
                "complexity parameters must be positive".into(),
            ));
        }
        Ok(ComplexityParams { cs, ceps, c0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn catalogue_matches_taylor_on_unit_interval() {
        for act in [
            SmoothActivation::sin(3.0),
            SmoothActivation::cos(7.0),
            SmoothActivation::exp_m1(1.0),
            SmoothActivation::sin(1.0),
            SmoothActivation::cos(1.0),
        ] {
            for i in 0..=200 {
                let z = -1.0 + 2.0 * i as f64 / 200.0;
                assert!(
                    (act.eval(z) - act.taylor_eval(z)).abs() < 1e-10,
                    "{} mismatch at z={z}",
                    act.name
                );
            }
        }
    }

    #[test]
    fn tanh_truncation_is_its_own_polynomial() {
        let act = SmoothActivation::tanh_trunc(1.0);
        assert_eq!(act.eval(0.37), act.taylor_eval(0.37));
        // Low-degree coefficients of tanh: z − z³/3 + 2z⁵/15.
        assert_relative_eq!(act.taylor[1], 1.0);
        assert_relative_eq!(act.taylor[3], -1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(act.taylor[5], 2.0 / 15.0, epsilon = 1e-14);
        // Truncation tracks tanh well inside the convergence radius.
        assert!((act.eval(0.5) - 0.5f64.tanh()).abs() < 1e-10);
    }

    #[test]
    fn two_layer_identity_activation() {
        let t = TwoLayerTarget::new(
            vec![e(0, 3)],
            vec![e(0, 3)],
            vec![vec![1.0]],
            vec![SmoothActivation::identity()],
        )
        .unwrap();
        assert_relative_eq!(t.eval(&e(0, 3)).unwrap()[0], 1.0);
    }

    #[test]
    fn two_layer_zero_coefficients() {
        let t = TwoLayerTarget::new(
            vec![e(0, 3)],
            vec![e(1, 3)],
            vec![vec![0.0]],
            vec![SmoothActivation::sin(3.0)],
        )
        .unwrap();
        assert_eq!(t.eval(&e(0, 3)).unwrap()[0], 0.0);
    }

    #[test]
    fn two_layer_sin_cross_term() {
        // φ=sin(3z), w*₁=e₁, w*₂=e₂, x=(1/√2)(e₁+e₂) → sin(3/√2)/√2.
        let t = TwoLayerTarget::new(
            vec![e(0, 2)],
            vec![e(1, 2)],
            vec![vec![1.0]],
            vec![SmoothActivation::sin(3.0)],
        )
        .unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let x = vec![r, r];
        let expect = (3.0 * r).sin() * r;
        assert_relative_eq!(t.eval(&x).unwrap()[0], expect, epsilon = 1e-12);
        assert!((expect - 0.6026).abs() < 1e-3);
    }

    #[test]
    fn two_layer_rejects_bad_inputs() {
        let t = TwoLayerTarget::new(
            vec![e(0, 3)],
            vec![e(0, 3)],
            vec![vec![1.0]],
            vec![SmoothActivation::identity()],
        )
        .unwrap();
        assert!(t.eval(&[1.0, 0.0]).is_err());
        assert!(TwoLayerTarget::new(
            vec![vec![2.0, 0.0]],
            vec![e(0, 2)],
            vec![vec![1.0]],
            vec![SmoothActivation::identity()],
        )
        .is_err());
        assert!(TwoLayerTarget::new(
            vec![e(0, 2)],
            vec![e(0, 2)],
            vec![vec![1.5]],
            vec![SmoothActivation::identity()],
        )
        .is_err());
    }

    #[test]
    fn two_layer_homogeneous_in_a_and_permutation_invariant() {
        let mut rng = RngStream::new(5, 0);
        let mut unit = |d: usize| {
            let mut v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let n = norm2(&v);
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        let w1 = vec![unit(4), unit(4)];
        let w2 = vec![unit(4), unit(4)];
        let a = vec![vec![0.3, -0.7]];
        let phis = vec![SmoothActivation::sin(3.0), SmoothActivation::cos(7.0)];
        let t = TwoLayerTarget::new(w1.clone(), w2.clone(), a.clone(), phis.clone()).unwrap();

        let scaled = TwoLayerTarget::new(
            w1.clone(),
            w2.clone(),
            vec![vec![0.15, -0.35]],
            phis.clone(),
        )
        .unwrap();
        let perm = TwoLayerTarget::new(
            vec![w1[1].clone(), w1[0].clone()],
            vec![w2[1].clone(), w2[0].clone()],
            vec![vec![-0.7, 0.3]],
            vec![phis[1].clone(), phis[0].clone()],
        )
        .unwrap();

        let x = unit(4);
        let y = t.eval(&x).unwrap()[0];
        assert_relative_eq!(scaled.eval(&x).unwrap()[0], 0.5 * y, epsilon = 1e-12);
        assert_relative_eq!(perm.eval(&x).unwrap()[0], y, epsilon = 1e-12);
    }

    #[test]
    fn three_layer_identity_path() {
        let t = ThreeLayerTarget::new(
            vec![e(0, 2)],
            vec![e(0, 2)],
            vec![vec![1.0]],
            vec![vec![1.0]],
            vec![vec![1.0]],
            vec![SmoothActivation::identity()],
            vec![SmoothActivation::identity()],
            vec![SmoothActivation::identity()],
        )
        .unwrap();
        assert_relative_eq!(t.eval(&e(0, 2)).unwrap()[0], 1.0);
        let z = ThreeLayerTarget::new(
            vec![e(0, 2)],
            vec![e(0, 2)],
            vec![vec![1.0]],
            vec![vec![1.0]],
            vec![vec![0.0]],
            vec![SmoothActivation::identity()],
            vec![SmoothActivation::identity()],
            vec![SmoothActivation::identity()],
        )
        .unwrap();
        assert_eq!(z.eval(&e(0, 2)).unwrap()[0], 0.0);
    }

    #[test]
    fn benchmark_target_values() {
        let sin = builtin_experiment_target("sin-fig1").unwrap();
        // x = e₄ → (0+0+0−2)²·cos 7 = 4 cos 7.
        let v = sin.eval(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(v, 4.0 * 7f64.cos(), epsilon = 1e-12);
        assert!((v - 3.0156).abs() < 1e-3);
        // x = e₁ and x = e₃ agree by symmetry: (sin 3 − 2)².
        let v1 = sin.eval(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let v3 = sin.eval(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(v1, v3);
        assert!((v1 - 3.4554).abs() < 1e-3);

        let tanh = builtin_experiment_target("tanh-fig6").unwrap();
        let w = tanh.eval(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(w, 4.0 * 8f64.tanh(), epsilon = 1e-12);
        assert!((w - 4.0).abs() < 1e-3);

        assert!(builtin_experiment_target("bogus").is_err());
    }

    #[test]
    fn dataset_generation_norms_and_padding() {
        let mut rng = RngStream::new(7, 3);
        let sin = builtin_experiment_target("sin-fig1").unwrap();
        let ds = generate_dataset(
            4,
            200,
            |x| Ok(vec![sin.eval(x)?]),
            PaddingMode::Raw,
            &mut rng,
        )
        .unwrap();
        for x in &ds.inputs {
            assert!((norm2(x) - 1.0).abs() < 1e-12);
        }

        let mut rng = RngStream::new(7, 4);
        let ds = generate_dataset(
            3,
            200,
            |x| Ok(vec![x.iter().sum()]),
            PaddingMode::PadHalf,
            &mut rng,
        )
        .unwrap();
        for x in &ds.inputs {
            assert_eq!(x.len(), 4);
            assert_eq!(x[3], 0.5);
            assert!((norm2(x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_generation_is_seeded() {
        let gen = |seed| {
            let mut rng = RngStream::new(seed, 9);
            generate_dataset(4, 50, |x| Ok(vec![x[0]]), PaddingMode::Raw, &mut rng).unwrap()
        };
        let a = gen(11);
        let b = gen(11);
        let c = gen(12);
        assert_eq!(a.inputs, b.inputs);
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn dataset_csv_round_trip_shape() {
        let ds = Dataset {
            inputs: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            labels: vec![vec![0.5], vec![-0.5]],
            padding: PaddingMode::Raw,
        };
        let csv = ds.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "x_1,x_2,y_1");
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn rejects_empty_dataset() {
        let mut rng = RngStream::new(0, 0);
        assert!(
            generate_dataset(4, 0, |_| Ok(vec![0.0]), PaddingMode::Raw, &mut rng).is_err()
        );
    }

    #[test]
    fn complexity_params_positive() {
        assert!(ComplexityParams::new(1.0, 1.0, 1.0).is_ok());
        assert!(ComplexityParams::new(0.0, 1.0, 1.0).is_err());
    }
}
