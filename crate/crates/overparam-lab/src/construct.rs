//! Constructive-approximation machinery: probabilists' Hermite polynomials,
//! the balanced interval partition, the indicator-to-function fitting
//! identity, and the existential two-layer weight construction, each paired
//! with closed-form or Monte-Carlo verification.
//!
//! The fitting identity states that a smooth activation φ can be written as
//! φ(x₁) = E[𝕀[α₁x₁ + β₁√(1−x₁²) + b₀ ≥ 0] · h(α₁, b₀)] over independent
//! standard Gaussians (α₁, β₁, b₀), for a bounded designed function h. The
//! degree-wise coefficients of h are calibrated numerically by least squares
//! of the identity itself on a grid, using a truncated-Hermite × bias-window
//! basis; the verifiable contract is the expectation identity, not any
//! particular closed form for the coefficients.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{LabError, Result};
use crate::numerics::{dot, norm2, Matrix, RngStream};
use crate::targets::{SmoothActivation, TwoLayerTarget};
use crate::nets::TwoLayerNet;

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal density.
pub fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Standard normal CDF.
pub fn phi_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Standard normal quantile (refined below by bisection where exactness
/// matters).
pub fn phi_inv(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Bisection on a monotone increasing function to tolerance 1e−13 in the
/// argument.
fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, target: f64) -> Result<f64> {
    let flo = f(lo) - target;
    let fhi = f(hi) - target;
    if flo > 0.0 || fhi < 0.0 {
        return Err(LabError::ConstructionFailure(format!(
            "bisection bracket invalid: f({lo})−t = {flo}, f({hi})−t = {fhi}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) - target <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Hermite polynomials
// ---------------------------------------------------------------------------

/// Probabilists' Hermite polynomials h₀ = 1, h₁ = x,
/// h_{i+1}(x) = x·h_i(x) − i·h_{i−1}(x), with a coefficient table up to
/// `max_degree`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HermiteBasis {
    pub max_degree: usize,
    /// coeffs[i][j] is the coefficient of x^j in h_i.
    pub coeffs: Vec<Vec<f64>>,
}

impl HermiteBasis {
    pub fn new(max_degree: usize) -> Self {
        let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(max_degree + 1);
        coeffs.push(vec![1.0]);
        if max_degree >= 1 {
            coeffs.push(vec![0.0, 1.0]);
        }
        for i in 1..max_degree {
            let mut next = vec![0.0; i + 2];
            for (j, &c) in coeffs[i].iter().enumerate() {
                next[j + 1] += c;
            }
            for (j, &c) in coeffs[i - 1].iter().enumerate() {
                next[j] -= i as f64 * c;
            }
            coeffs.push(next);
        }
        HermiteBasis { max_degree, coeffs }
    }

    pub fn eval(&self, i: usize, x: f64) -> Result<f64> {
        if i > self.max_degree {
            return Err(LabError::InvalidParameter(format!(
                "Hermite degree {i} exceeds basis degree {}",
                self.max_degree
            )));
        }
        Ok(hermite_eval(i, x))
    }
}

/// h_i(x) via the three-term recurrence.
pub fn hermite_eval(i: usize, x: f64) -> f64 {
    let mut prev = 1.0; // h_0
    if i == 0 {
        return prev;
    }
    let mut cur = x; // h_1
    for n in 1..i {
        let next = x * cur - n as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// All of h_0(x)..h_d(x) in one recurrence sweep.
pub fn hermite_eval_all(d: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(d + 1);
    out.push(1.0);
    if d == 0 {
        return out;
    }
    out.push(x);
    for n in 1..d {
        let next = x * out[n] - n as f64 * out[n - 1];
        out.push(next);
    }
    out
}

// ---------------------------------------------------------------------------
// Interval partition
// ---------------------------------------------------------------------------

/// The measurable interval/sign construction: for each y ∈ [−1, 1] a set
/// I(y) ⊂ ℝ of Gaussian measure exactly τ and a sign function s(y, ·) on it
/// such that sign values ±1 are equally likely and E[s(y,g)·g·𝕀_{g∈I(y)}] =
/// τ·y, with the span of s·g over I(y) at most 10τ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalPartition {
    pub tau: f64,
    /// Largest y handled by the merged symmetric case; above it the two
    /// disjoint mirrored intervals take over.
    pub y_turn: f64,
    /// Endpoint of the merged interval [−c, c]: c = Φ⁻¹(1/2 + τ/2).
    pub c: f64,
}

/// The constructed set and sign bands for one y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum YCase {
    /// I(y) = [l, r] ∪ [−r, −l] with s = +1 on the first interval and −1 on
    /// the mirror (y > 0; reflected for y < 0).
    Disjoint { l: f64, r: f64 },
    /// I(y) = [−c, c] with sign bands (for y ≥ 0):
    /// |g| ≤ e → sign(g); e < |g| ≤ d → −sign(g); d < |g| ≤ c → +sign(g).
    Merged { e: f64, d: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YPartition {
    pub y: f64,
    pub tau: f64,
    pub c: f64,
    pub case: YCase,
}

impl IntervalPartition {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 0.01) {
            return Err(LabError::InvalidParameter(format!(
                "tau must lie in (0, 1/100], got {tau}"
            )));
        }
        // c solves Φ(c) = 1/2 + τ/2 exactly (refined past the library
        // quantile by bisection on the CDF).
        let c = bisect(phi_cdf, 0.0, 1.0, 0.5 + 0.5 * tau)?;
        // The turning point: conditional mean of [0, c], where the merged
        // construction saturates (e = c).
        let y_turn = (phi_pdf(0.0) - phi_pdf(c)) / (0.5 * tau);
        Ok(IntervalPartition { tau, y_turn, c })
    }

    /// Construct the set and sign bands for one y ∈ [−1, 1].
    pub fn build(&self, y: f64) -> Result<YPartition> {
        if !(-1.0..=1.0).contains(&y) {
            return Err(LabError::InvalidParameter(format!(
                "y must lie in [−1, 1], got {y}"
            )));
        }
        let ay = y.abs();
        let case = if ay > self.y_turn {
            // Disjoint case: [l, r] of measure τ/2 with conditional mean |y|.
            // The conditional mean (φ(l) − φ(r))/(τ/2) increases in l.
            let half = 0.5 * self.tau;
            // Keep l where an interval of measure τ/2 still fits to its right.
            let l_hi = phi_inv(1.0 - self.tau);
            let mean_of = |l: f64| {
                let r = bisect(phi_cdf, l, 9.0, phi_cdf(l) + half).expect("measure bracket");
                (phi_pdf(l) - phi_pdf(r)) / half
            };
            let l = bisect(mean_of, 0.0, l_hi, ay)?;
            let r = bisect(phi_cdf, l, 9.0, phi_cdf(l) + half)?;
            YCase::Disjoint { l, r }
        } else {
            // Merged case on [−c, c]: e gives the inner band with conditional
            // mean |y| on [0, e]; d balances the remaining signed mass.
            let e = if ay == 0.0 {
                0.0
            } else {
                let mean_of = |e: f64| {
                    if e <= 0.0 {
                        0.0
                    } else {
                        (phi_pdf(0.0) - phi_pdf(e)) / (phi_cdf(e) - 0.5)
                    }
                };
                bisect(mean_of, 1e-300, self.c, ay)?
            };
            let tau_p = 2.0 * (phi_cdf(e) - 0.5);
            // 2[2φ(d) − φ(e) − φ(c)] decreases in d; solve for the target
            // |y|(τ − τ'). Negate both to bisect on an increasing function.
            let target = ay * (self.tau - tau_p);
            let f = |d: f64| -2.0 * (2.0 * phi_pdf(d) - phi_pdf(e) - phi_pdf(self.c));
            let d = bisect(f, e, self.c, -target)?;
            YCase::Merged { e, d }
        };
        Ok(YPartition {
            y,
            tau: self.tau,
            c: self.c,
            case,
        })
    }
}

impl YPartition {
    /// The closed intervals making up I(y).
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        match self.case {
            YCase::Disjoint { l, r } => {
                if self.y >= 0.0 {
                    vec![(l, r), (-r, -l)]
                } else {
                    vec![(-r, -l), (l, r)]
                }
            }
            YCase::Merged { .. } => vec![(-self.c, self.c)],
        }
    }

    pub fn contains(&self, g: f64) -> bool {
        self.intervals().iter().any(|&(a, b)| a <= g && g <= b)
    }

    /// s(y, g) ∈ {−1, 0, +1}; zero outside I(y). For y < 0 the construction
    /// reflects: s(y, g) = s(−y, −g).
    pub fn sign(&self, g: f64) -> i8 {
        if !self.contains(g) {
            return 0;
        }
        let (gg, pos) = if self.y >= 0.0 { (g, true) } else { (-g, false) };
        let s = match self.case {
            YCase::Disjoint { l, r } => {
                if l <= gg && gg <= r {
                    1
                } else {
                    -1
                }
            }
            YCase::Merged { e, d } => {
                let a = gg.abs();
                let base = if a <= e {
                    1
                } else if a <= d {
                    -1
                } else {
                    1
                };
                if gg >= 0.0 {
                    base
                } else {
                    -base
                }
            }
        };
        let _ = pos;
        s
    }

    /// Gaussian measure of I(y), in closed form from the CDF.
    pub fn measure(&self) -> f64 {
        self.intervals()
            .iter()
            .map(|&(a, b)| phi_cdf(b) - phi_cdf(a))
            .sum()
    }

    /// Pr[g ∈ I(y) and s(y,g) = s], in closed form.
    pub fn prob_sign(&self, s: i8) -> f64 {
        let bands = self.sign_bands();
        bands
            .iter()
            .filter(|&&(_, _, bs)| bs == s)
            .map(|&(a, b, _)| phi_cdf(b) - phi_cdf(a))
            .sum()
    }

    /// E[s(y,g)·g·𝕀_{g∈I(y)}], in closed form from the density
    /// (∫_a^b g·φ(g) dg = φ_pdf(a) − φ_pdf(b)).
    pub fn signed_mass(&self) -> f64 {
        self.sign_bands()
            .iter()
            .map(|&(a, b, s)| s as f64 * (phi_pdf(a) - phi_pdf(b)))
            .sum()
    }

    /// Maximal sign bands (a, b, s) partitioning I(y).
    pub fn sign_bands(&self) -> Vec<(f64, f64, i8)> {
        match self.case {
            YCase::Disjoint { l, r } => {
                if self.y >= 0.0 {
                    vec![(-r, -l, -1), (l, r, 1)]
                } else {
                    // Reflection: s(y,g) = s(−y,−g).
                    vec![(-r, -l, 1), (l, r, -1)]
                }
            }
            YCase::Merged { e, d } => {
                let c = self.c;
                let flip = if self.y >= 0.0 { 1 } else { -1 };
                vec![
                    (-c, -d, -flip),
                    (-d, -e, flip),
                    (-e, 0.0, -flip),
                    (0.0, e, flip),
                    (e, d, -flip),
                    (d, c, flip),
                ]
                .into_iter()
                .filter(|&(a, b, _)| b > a)
                .collect()
            }
        }
    }

    /// Span (max − min) of s(y,g)·g over g ∈ I(y).
    pub fn signed_span(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (a, b, s) in self.sign_bands() {
            let (va, vb) = (s as f64 * a, s as f64 * b);
            lo = lo.min(va.min(vb));
            hi = hi.max(va.max(vb));
        }
        hi - lo
    }
}

/// Gaussian measure of the symmetric difference I(y₁) △ I(y₂).
pub fn symmetric_difference_measure(p1: &YPartition, p2: &YPartition) -> f64 {
    // Endpoint-union sweep: both sets are unions of ≤2 closed intervals.
    let mut cuts: Vec<f64> = Vec::new();
    for p in [p1, p2] {
        for (a, b) in p.intervals() {
            cuts.push(a);
            cuts.push(b);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if p1.contains(mid) != p2.contains(mid) {
            total += phi_cdf(w[1]) - phi_cdf(w[0]);
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Indicator-to-function fitting
// ---------------------------------------------------------------------------

/// The designed function h(α₁, b₀) = Σ_i γ_i · ĥ_i(α₁) · ψ_i(b₀) where ĥ_i is
/// the Hermite polynomial truncated at radius B_i and ψ_i windows the bias:
/// ψ₀ ≡ 1, even i: 𝕀[0 < −b₀ ≤ 1/(2i)], odd i: 𝕀[|b₀| ≤ 1/(2i)].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFunction {
    pub degree: usize,
    pub eps: f64,
    /// User-supplied bound C; the constructor verifies the practical sup.
    pub bound_c: f64,
    pub gammas: Vec<f64>,
    pub b_radii: Vec<f64>,
    /// Max |h| observed over the construction's evaluation window.
    pub sup_abs: f64,
    /// Max |identity − φ| on the calibration grid (quadrature, no MC error).
    pub grid_residual: f64,
}

fn psi_window(i: usize) -> Option<(f64, f64)> {
    if i == 0 {
        None
    } else if i % 2 == 0 {
        // 0 < −b₀ ≤ 1/(2i)  ⟺  −1/(2i) ≤ b₀ < 0
        Some((-1.0 / (2.0 * i as f64), 0.0))
    } else {
        let w = 1.0 / (2.0 * i as f64);
        Some((-w, w))
    }
}

fn psi_indicator(i: usize, b0: f64) -> bool {
    match psi_window(i) {
        None => true,
        Some((lo, hi)) => {
            if i % 2 == 0 {
                b0 >= lo && b0 < hi
            } else {
                b0 >= lo && b0 <= hi
            }
        }
    }
}

impl FitFunction {
    pub fn eval(&self, alpha: f64, b0: f64) -> f64 {
        let h = hermite_eval_all(self.degree, alpha);
        let mut total = 0.0;
        for i in 0..=self.degree {
            if self.gammas[i] != 0.0 && alpha.abs() <= self.b_radii[i] && psi_indicator(i, b0) {
                total += self.gammas[i] * h[i];
            }
        }
        total
    }
}

/// Pr over β₁ ~ 𝒩(0,1) that α₁x₁ + β₁√(1−x₁²) + b₀ ≥ 0.
fn indicator_prob(alpha: f64, b0: f64, x1: f64) -> f64 {
    let s = (1.0 - x1 * x1).max(0.0).sqrt();
    let num = alpha * x1 + b0;
    if s == 0.0 {
        if num > 0.0 {
            1.0
        } else if num < 0.0 {
            0.0
        } else {
            0.5
        }
    } else {
        phi_cdf(num / s)
    }
}

/// 8-point Gauss–Legendre nodes/weights on [−1, 1].
const GL8_X: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329_0,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL8_W: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_29,
    0.362_683_783_378_361_98,
    0.362_683_783_378_361_98,
    0.313_706_645_877_887_29,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Simpson weights over n (odd) equispaced points.
fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 3 && n % 2 == 1);
    let mut w = vec![0.0; n];
    for (idx, wv) in w.iter_mut().enumerate() {
        *wv = if idx == 0 || idx == n - 1 {
            1.0
        } else if idx % 2 == 1 {
            4.0
        } else {
            2.0
        } * h
            / 3.0;
    }
    w
}

/// The basis function u_i(x₁) = E[ĥ_i(α₁)ψ_i(b₀)·Pr_β[indicator]] by
/// quadrature: Simpson over α ∈ [−10, 10] and Gauss–Legendre (Simpson for
/// i = 0) over the ψ window in b₀.
fn basis_value(i: usize, x1: f64, b_radius: f64, alpha_nodes: &[(f64, f64, f64)]) -> f64 {
    // alpha_nodes: (α, weight·φ(α), h_i(α)) — h value injected per call site.
    let mut total = 0.0;
    match psi_window(i) {
        None => {
            // b₀ over [−10, 10] with Simpson 401.
            let n = 401;
            let (lo, hi) = (-10.0, 10.0);
            let h = (hi - lo) / (n - 1) as f64;
            let sw = simpson_weights(n, h);
            for (bi, wb) in sw.iter().enumerate() {
                let b0 = lo + bi as f64 * h;
                let wgt = wb * phi_pdf(b0);
                if wgt == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for &(a, wa, hi_a) in alpha_nodes {
                    if a.abs() <= b_radius {
                        inner += wa * hi_a * indicator_prob(a, b0, x1);
                    }
                }
                total += wgt * inner;
            }
        }
        Some((lo, hi)) => {
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for (gx, gw) in GL8_X.iter().zip(GL8_W.iter()) {
                let b0 = mid + half * gx;
                let wgt = gw * half * phi_pdf(b0);
                let mut inner = 0.0;
                for &(a, wa, hi_a) in alpha_nodes {
                    if a.abs() <= b_radius {
                        inner += wa * hi_a * indicator_prob(a, b0, x1);
                    }
                }
                total += wgt * inner;
            }
        }
    }
    total
}

/// Calibrate the fit coefficients by least squares of the expectation
/// identity on an 81-point x₁-grid. Fails if the quadrature residual on that
/// grid exceeds `eps`, or if the practical sup of |h| exceeds `bound_c`.
pub fn build_fit_function(
    phi: &SmoothActivation,
    eps: f64,
    bound_c: f64,
    degree: usize,
) -> Result<FitFunction> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(LabError::InvalidParameter(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    if bound_c <= 0.0 {
        return Err(LabError::InvalidParameter("bound C must be positive".into()));
    }
    let log_term = (1.0 / eps).ln().max(0.0).sqrt();
    let b_radii: Vec<f64> = (0..=degree)
        .map(|i| 100.0 * (i as f64).sqrt() + 10.0 * log_term)
        .collect();

    // α quadrature nodes shared by all basis functions: Simpson 2401 over
    // [−10, 10] weighted by the Gaussian density.
    let n_alpha = 2401;
    let (alo, ahi) = (-10.0, 10.0);
    let ah = (ahi - alo) / (n_alpha - 1) as f64;
    let sw = simpson_weights(n_alpha, ah);
    let alpha_grid: Vec<(f64, f64)> = (0..n_alpha)
        .map(|ai| {
            let a = alo + ai as f64 * ah;
            (a, sw[ai] * phi_pdf(a))
        })
        .collect();
    let herm_at: Vec<Vec<f64>> = alpha_grid
        .iter()
        .map(|&(a, _)| hermite_eval_all(degree, a))
        .collect();

    let grid_n = 81;
    let xgrid: Vec<f64> = (0..grid_n)
        .map(|g| -1.0 + 2.0 * g as f64 / (grid_n - 1) as f64)
        .collect();

    let mut design = nalgebra::DMatrix::<f64>::zeros(grid_n, degree + 1);
    for i in 0..=degree {
        let nodes: Vec<(f64, f64, f64)> = alpha_grid
            .iter()
            .zip(&herm_at)
            .map(|(&(a, w), h)| (a, w, h[i]))
            .collect();
        for (g, &x1) in xgrid.iter().enumerate() {
            design[(g, i)] = basis_value(i, x1, b_radii[i], &nodes);
        }
    }
    let rhs = nalgebra::DVector::<f64>::from_iterator(grid_n, xgrid.iter().map(|&x| phi.eval(x)));

    // The basis is orthogonal under the Gaussian: E[(h_iψ_i)(h_jψ_j)] =
    // δ_ij · i! · Pr[ψ_i], since Hermite orthogonality kills cross terms in α
    // and α ⊥ b₀. Rescaling column i by d_i = √(i!·Pr[ψ_i]) makes the
    // coefficient norm equal E[h²], so Tikhonov damping in the rescaled
    // coordinates directly controls the second moment of h. Take the largest
    // damping that still meets half the residual budget.
    let d_scale: Vec<f64> = (0..=degree)
        .map(|i| {
            let fact: f64 = (1..=i).map(|v| v as f64).product();
            let p_i = match psi_window(i) {
                None => 1.0,
                Some((lo, hi)) => phi_cdf(hi) - phi_cdf(lo),
            };
            (fact * p_i).sqrt()
        })
        .collect();
    let mut scaled = design.clone();
    for i in 0..=degree {
        for g in 0..grid_n {
            scaled[(g, i)] /= d_scale[i];
        }
    }
    let svd = scaled.svd(true, true);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for k in 0..=14 {
        let mu = 10f64.powi(-(k as i32));
        // Ridge via the SVD of the scaled design: z = V diag(s/(s²+μ)) Uᵀ rhs.
        let ut_rhs = svd.u.as_ref().unwrap().transpose() * &rhs;
        let mut coef = ut_rhs;
        for (si, c) in svd.singular_values.iter().zip(coef.iter_mut()) {
            *c *= si / (si * si + mu);
        }
        let z = svd.v_t.as_ref().unwrap().transpose() * coef;
        let gam: Vec<f64> = z.iter().zip(&d_scale).map(|(zi, di)| zi / di).collect();
        let gv = nalgebra::DVector::from_column_slice(&gam);
        let fitted = &design * &gv;
        let resid = fitted
            .iter()
            .zip(rhs.iter())
            .map(|(f, r)| (f - r).abs())
            .fold(0.0f64, f64::max);
        if resid <= 0.5 * eps {
            best = Some((gam, resid));
            break;
        }
        best = Some((gam, resid));
    }
    let (gammas, grid_residual) = best.expect("at least one damping tried");
    if grid_residual > eps {
        return Err(LabError::ConstructionFailure(format!(
            "calibration residual {grid_residual:.3e} exceeds eps {eps} at degree {degree}"
        )));
    }

    let mut fit = FitFunction {
        degree,
        eps,
        bound_c,
        gammas,
        b_radii,
        sup_abs: 0.0,
        grid_residual,
    };
    // Practical sup over the evaluation window: dense α in [−8, 8] crossed
    // with one bias point per distinct ψ-overlap cell.
    let mut b_points = vec![5.0]; // outside every window: only ψ₀ active
    for i in 1..=degree {
        if let Some((lo, hi)) = psi_window(i) {
            b_points.push(lo + 1e-12);
            b_points.push(hi - 1e-12);
        }
    }
    let mut sup: f64 = 0.0;
    for ai in 0..=1600 {
        let a = -8.0 + ai as f64 / 100.0;
        for &b in &b_points {
            sup = sup.max(fit.eval(a, b).abs());
        }
    }
    fit.sup_abs = sup;
    if sup > bound_c {
        return Err(LabError::ConstructionFailure(format!(
            "practical sup |h| = {sup:.3e} exceeds the supplied bound C = {bound_c}"
        )));
    }
    Ok(fit)
}

/// Monte-Carlo verification report for the expectation identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub x1: Vec<f64>,
    pub estimate: Vec<f64>,
    pub std_err: Vec<f64>,
    pub residual: Vec<f64>,
    pub max_residual: f64,
    pub max_std_err: f64,
    /// Ê[h(α₁, b₀)²] over the same triples.
    pub second_moment: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Estimate E[𝕀[α₁x₁ + β₁√(1−x₁²) + b₀ ≥ 0]·h(α₁,b₀)] at each grid point
/// with a shared pool of Gaussian triples, reporting standard errors.
pub fn verify_fit_function(
    fit: &FitFunction,
    phi: &SmoothActivation,
    x1_grid: &[f64],
    samples: usize,
    rng: &mut RngStream,
) -> Result<FitReport> {
    if x1_grid.iter().any(|x| !(-1.0..=1.0).contains(x)) {
        return Err(LabError::InvalidInput("grid must lie in [−1, 1]".into()));
    }
    let g = x1_grid.len();
    let mut sums = vec![0.0f64; g];
    let mut sqs = vec![0.0f64; g];
    let mut h2 = 0.0f64;
    let shards = 16usize;
    let per_shard = samples / shards;
    let actual = per_shard * shards;
    // Fixed shard order keeps the reduction deterministic regardless of any
    // future parallel split.
    for shard in 0..shards {
        let mut srng = rng.child(1000 + shard as u64);
        for _ in 0..per_shard {
            let alpha = srng.standard_normal();
            let beta = srng.standard_normal();
            let b0 = srng.standard_normal();
            let h = fit.eval(alpha, b0);
            h2 += h * h;
            if h == 0.0 {
                continue;
            }
            for (gi, &x1) in x1_grid.iter().enumerate() {
                let s = (1.0 - x1 * x1).max(0.0).sqrt();
                if alpha * x1 + beta * s + b0 >= 0.0 {
                    sums[gi] += h;
                    sqs[gi] += h * h;
                }
            }
        }
    }
    let n = actual as f64;
    let mut estimate = Vec::with_capacity(g);
    let mut std_err = Vec::with_capacity(g);
    let mut residual = Vec::with_capacity(g);
    for gi in 0..g {
        let mean = sums[gi] / n;
        let var = (sqs[gi] / n - mean * mean).max(0.0);
        let se = (var / n).sqrt();
        estimate.push(mean);
        std_err.push(se);
        residual.push((mean - phi.eval(x1_grid[gi])).abs());
    }
    let max_residual = residual.iter().cloned().fold(0.0, f64::max);
    let max_std_err = std_err.iter().cloned().fold(0.0, f64::max);
    Ok(FitReport {
        x1: x1_grid.to_vec(),
        estimate,
        std_err,
        residual,
        max_residual,
        max_std_err,
        second_moment: h2 / n,
        samples: actual,
        seed: rng.seed,
    })
}

// ---------------------------------------------------------------------------
// Existential two-layer construction
// ---------------------------------------------------------------------------

/// Build W* row-by-row from the fitting functions:
/// w*_j = (1/(ε_a² m)) Σ_r a⁰_{r,j} Σ_i a*_{r,i} ·
///        h_i(√m⟨w_j⁰, w*_{1,i}⟩, √m b_j⁰) · w*_{2,i},
/// so that the bias-free pseudo network at init signs, evaluated on the
/// increment W* alone, approximates the target in expectation.
pub fn construct_two_layer_wstar(
    target: &TwoLayerTarget,
    net: &TwoLayerNet,
    fits: &[FitFunction],
) -> Result<Matrix> {
    if fits.len() != target.p {
        return Err(LabError::InvalidInput(format!(
            "need one fit per target term: got {} for p = {}",
            fits.len(),
            target.p
        )));
    }
    if net.d != target.d {
        return Err(LabError::InvalidInput("net/target dimension mismatch".into()));
    }
    if target.k != net.k {
        return Err(LabError::InvalidInput("net/target output-count mismatch".into()));
    }
    let m = net.m as f64;
    let sqrt_m = m.sqrt();
    let scale = 1.0 / (net.eps_a * net.eps_a * m);
    let mut wstar = Matrix::zeros(net.m, net.d);
    for j in 0..net.m {
        let b0 = sqrt_m * net.b[j];
        // Per-term h values are shared across outputs.
        let hvals: Vec<f64> = (0..target.p)
            .map(|i| {
                let alpha = sqrt_m * dot(net.w0.row(j), &target.w1[i]);
                fits[i].eval(alpha, b0)
            })
            .collect();
        let row = wstar.row_mut(j);
        for r in 0..target.k {
            let c_r = scale * net.a.get(r, j);
            for i in 0..target.p {
                let c = c_r * target.a_star[r][i] * hvals[i];
                if c != 0.0 {
                    for (rv, &wv) in row.iter_mut().zip(&target.w2[i]) {
                        *rv += c * wv;
                    }
                }
            }
        }
    }
    Ok(wstar)
}

/// Row-norm summary of a constructed W*: the normalized max row norm
/// ‖W*‖₂,∞ · ε_a · m / (k·p).
pub fn wstar_row_norm_report(wstar: &Matrix, net: &TwoLayerNet, p: usize) -> f64 {
    let max_row = (0..wstar.rows)
        .map(|i| norm2(wstar.row(i)))
        .fold(0.0, f64::max);
    max_row * net.eps_a * net.m as f64 / (net.k * p) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::InitProfile;
    use approx::assert_relative_eq;

    #[test]
    fn hermite_base_cases_and_recurrence() {
        assert_eq!(hermite_eval(0, 3.7), 1.0);
        assert_eq!(hermite_eval(1, 3.7), 3.7);
        assert_eq!(hermite_eval(2, 0.0), -1.0);
        // h₂ = x² − 1, h₃ = x³ − 3x, h₄ = x⁴ − 6x² + 3.
        for &x in &[-2.0, -0.3, 0.0, 1.1, 4.0] {
            assert_relative_eq!(hermite_eval(2, x), x * x - 1.0, epsilon = 1e-12);
            assert_relative_eq!(hermite_eval(3, x), x * x * x - 3.0 * x, epsilon = 1e-12);
            assert_relative_eq!(
                hermite_eval(4, x),
                x.powi(4) - 6.0 * x * x + 3.0,
                epsilon = 1e-12
            );
        }
        let basis = HermiteBasis::new(6);
        assert_eq!(basis.coeffs[2], vec![-1.0, 0.0, 1.0]);
        assert_eq!(basis.coeffs[3], vec![0.0, -3.0, 0.0, 1.0]);
        assert!(basis.eval(7, 0.0).is_err());
        // Coefficient table agrees with recurrence evaluation.
        for i in 0..=6 {
            for &x in &[-1.5f64, 0.4, 2.2] {
                let by_table: f64 = basis.coeffs[i]
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| c * x.powi(j as i32))
                    .sum();
                assert_relative_eq!(by_table, hermite_eval(i, x), epsilon = 1e-10);
            }
        }
        let all = hermite_eval_all(5, 0.8);
        for (i, v) in all.iter().enumerate() {
            assert_relative_eq!(*v, hermite_eval(i, 0.8));
        }
    }

    #[test]
    fn hermite_orthogonality_monte_carlo() {
        // E[h_i(g)h_j(g)] = δ_ij·i! within 3 standard errors.
        let n = 200_000usize;
        let mut rng = RngStream::new(42, 0);
        let dmax = 4;
        let mut sums = vec![vec![0.0f64; dmax + 1]; dmax + 1];
        let mut sqs = vec![vec![0.0f64; dmax + 1]; dmax + 1];
        for _ in 0..n {
            let g = rng.standard_normal();
            let h = hermite_eval_all(dmax, g);
            for i in 0..=dmax {
                for j in 0..=dmax {
                    let v = h[i] * h[j];
                    sums[i][j] += v;
                    sqs[i][j] += v * v;
                }
            }
        }
        for i in 0..=dmax {
            for j in 0..=dmax {
                let mean = sums[i][j] / n as f64;
                let var = (sqs[i][j] / n as f64 - mean * mean).max(0.0);
                let se = (var / n as f64).sqrt();
                let expect = if i == j {
                    (1..=i).map(|v| v as f64).product::<f64>()
                } else {
                    0.0
                };
                assert!(
                    (mean - expect).abs() <= 3.5 * se + 1e-9,
                    "({i},{j}): {mean} vs {expect} ± {se}"
                );
            }
        }
    }

    #[test]
    fn interval_partition_c_value_and_validation() {
        assert!(IntervalPartition::new(0.02).is_err());
        assert!(IntervalPartition::new(0.0).is_err());
        let p = IntervalPartition::new(0.01).unwrap();
        // c = Φ⁻¹(0.5 + τ/2) ≈ 0.012533 for τ = 0.01.
        assert!((p.c - 0.012533).abs() < 1e-5, "c = {}", p.c);
        assert_relative_eq!(phi_cdf(p.c) - phi_cdf(-p.c), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn interval_partition_properties_on_grid() {
        let tau = 0.01;
        let part = IntervalPartition::new(tau).unwrap();
        for gi in 0..=40 {
            let y = -1.0 + gi as f64 / 20.0;
            let p = part.build(y).unwrap();
            // Balanced: Gaussian measure exactly τ.
            assert!(
                (p.measure() - tau).abs() < 1e-6,
                "measure off at y={y}: {}",
                p.measure()
            );
            // Symmetric: both signs equally likely.
            assert!(
                (p.prob_sign(1) - p.prob_sign(-1)).abs() < 1e-6,
                "sign probs off at y={y}"
            );
            // Unbiased: E[s·g·𝕀] = τ·y.
            assert!(
                (p.signed_mass() - tau * y).abs() < 1e-6 * 1.0f64.max(tau),
                "signed mass off at y={y}: {} vs {}",
                p.signed_mass(),
                tau * y
            );
            // Bounded: span of s·g over I(y) at most 10τ.
            assert!(
                p.signed_span() <= 10.0 * tau,
                "span {} > 10τ at y={y}",
                p.signed_span()
            );
        }
    }

    #[test]
    fn interval_partition_continuity_at_turning_point() {
        let part = IntervalPartition::new(0.01).unwrap();
        let y0 = part.y_turn;
        let below = part.build(y0 * 0.999).unwrap();
        let above = part.build(y0 * 1.001).unwrap();
        let sd = symmetric_difference_measure(&below, &above);
        assert!(sd.is_finite());
        assert!(sd < 1e-3, "discontinuous at turning point: △ = {sd}");
        // Lipschitz-style trend away from the turning point.
        let p1 = part.build(0.5).unwrap();
        let p2 = part.build(0.5001).unwrap();
        let k = symmetric_difference_measure(&p1, &p2) / 0.0001;
        assert!(k.is_finite() && k < 10.0, "local Lipschitz estimate {k}");
    }

    #[test]
    fn interval_partition_reflection_for_negative_y() {
        let part = IntervalPartition::new(0.005).unwrap();
        let pp = part.build(0.4).unwrap();
        let pn = part.build(-0.4).unwrap();
        for &g in &[0.39, 0.41, 0.45, -0.39, -0.45, 0.0] {
            assert_eq!(pp.contains(g), pn.contains(-g));
            assert_eq!(pp.sign(g), pn.sign(-g));
        }
        assert_relative_eq!(pn.signed_mass(), -pp.signed_mass(), epsilon = 1e-12);
    }

    #[test]
    fn fit_function_constant_activation() {
        let phi = SmoothActivation::constant(0.3);
        let fit = build_fit_function(&phi, 0.05, 1e6, 4).unwrap();
        // The solver stops at the largest damping meeting half the budget.
        assert!(
            fit.grid_residual <= 0.5 * 0.05,
            "residual {}",
            fit.grid_residual
        );
        // MC verification at a few grid points.
        let mut rng = RngStream::new(7, 0);
        let report =
            verify_fit_function(&fit, &phi, &[-1.0, -0.4, 0.0, 0.6, 1.0], 200_000, &mut rng)
                .unwrap();
        for (gi, r) in report.residual.iter().enumerate() {
            assert!(
                *r <= 0.02 + 3.0 * report.std_err[gi],
                "residual {r} at x1={}",
                report.x1[gi]
            );
        }
    }

    #[test]
    fn fit_function_identity_activation() {
        let phi = SmoothActivation::identity();
        let fit = build_fit_function(&phi, 0.05, 1e6, 5).unwrap();
        assert!(
            fit.grid_residual <= 0.5 * 0.05,
            "residual {}",
            fit.grid_residual
        );
        let mut rng = RngStream::new(8, 0);
        let grid: Vec<f64> = (0..=10).map(|g| -1.0 + g as f64 / 5.0).collect();
        let report = verify_fit_function(&fit, &phi, &grid, 400_000, &mut rng).unwrap();
        assert!(
            report.max_residual <= 0.05 + 3.0 * report.max_std_err,
            "max residual {} (max se {})",
            report.max_residual,
            report.max_std_err
        );
        // Odd activation at 0: estimate ≈ 0.
        let mid = grid.iter().position(|&x| x == 0.0).unwrap();
        assert!(report.estimate[mid].abs() <= 3.0 * report.std_err[mid] + 1e-3);
    }

    #[test]
    fn fit_verification_is_seeded() {
        let phi = SmoothActivation::constant(0.5);
        let fit = build_fit_function(&phi, 0.05, 1e6, 2).unwrap();
        let grid = [-0.5, 0.5];
        let mut r1 = RngStream::new(9, 0);
        let mut r2 = RngStream::new(9, 0);
        let a = verify_fit_function(&fit, &phi, &grid, 50_000, &mut r1).unwrap();
        let b = verify_fit_function(&fit, &phi, &grid, 50_000, &mut r2).unwrap();
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.std_err, b.std_err);
    }

    #[test]
    fn fit_function_rejects_bad_params() {
        let phi = SmoothActivation::identity();
        assert!(build_fit_function(&phi, 0.0, 1.0, 4).is_err());
        assert!(build_fit_function(&phi, 0.05, -1.0, 4).is_err());
        // A tiny bound C must trip the sup check.
        assert!(build_fit_function(&phi, 0.05, 1e-6, 5).is_err());
    }

    fn theory_net(m: usize, d: usize, seed: u64) -> TwoLayerNet {
        let mut rng = RngStream::new(seed, 0);
        TwoLayerNet::init(m, d, 1, 0.1, InitProfile::Theory, &mut rng).unwrap()
    }

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn wstar_zero_target_and_superposition() {
        let phi = SmoothActivation::identity();
        let fit = build_fit_function(&phi, 0.05, 1e6, 5).unwrap();
        let net = theory_net(64, 3, 10);
        let make = |a: f64| {
            TwoLayerTarget::new(
                vec![e(0, 3)],
                vec![e(1, 3)],
                vec![vec![a]],
                vec![SmoothActivation::identity()],
            )
            .unwrap()
        };
        let w0 = construct_two_layer_wstar(&make(0.0), &net, std::slice::from_ref(&fit)).unwrap();
        assert!(w0.data().iter().all(|&v| v == 0.0));
        let wa = construct_two_layer_wstar(&make(0.3), &net, std::slice::from_ref(&fit)).unwrap();
        let wb = construct_two_layer_wstar(&make(0.6), &net, std::slice::from_ref(&fit)).unwrap();
        // Linear in a*: doubling the coefficient doubles every row.
        for (a, b) in wa.data().iter().zip(wb.data()) {
            assert_relative_eq!(2.0 * a, *b, epsilon = 1e-12);
        }
        // Norm report finite.
        let report = wstar_row_norm_report(&wa, &net, 1);
        assert!(report.is_finite() && report > 0.0);
        // Missing fits rejected.
        assert!(construct_two_layer_wstar(&make(0.3), &net, &[]).is_err());
    }
}
