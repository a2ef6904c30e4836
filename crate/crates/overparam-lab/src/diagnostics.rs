//! Structural probes: sign-flip sparsity under weight perturbations, a
//! symmetric-difference curvature estimator, the row-norm concentration
//! ratio, and train/test gap plumbing.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nets::{BiasMode, SignAt, ThreeLayerNet};
use crate::numerics::{dot, norm2, Matrix};
use crate::train::TrainLog;

/// Sign-flip counts and pseudo-vs-real output gap for one perturbation of a
/// three-layer net.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingReport {
    pub m1: usize,
    pub m2: usize,
    /// Max row 2-norm of the first-layer perturbation.
    pub tau_w: f64,
    /// Frobenius norm of the second-layer perturbation.
    pub tau_v: f64,
    pub seed: u64,
    /// First-layer indicator disagreements between init and perturbed
    /// weights.
    pub flips1: usize,
    /// Second-layer indicator disagreements (perturbation propagated through
    /// the perturbed first layer).
    pub flips2: usize,
    /// |pseudo(init-frozen signs) − real forward| at the perturbed weights,
    /// ℓ₂ over outputs.
    pub output_gap: f64,
}

/// Count indicator disagreements at `x` between the net's init weights
/// (W⁰, V⁰) and the perturbed weights (W⁰+Wpert, V⁰+Vpert), and record the
/// pseudo-vs-real output gap at the perturbed point with init-frozen signs.
/// Any trained increments already on `net` are ignored; the probe is about
/// the init point.
pub fn count_sign_flips(
    net: &ThreeLayerNet,
    x: &[f64],
    wpert: &Matrix,
    vpert: &Matrix,
) -> Result<CouplingReport> {
    if wpert.rows != net.m1 || wpert.cols != net.d {
        return Err(LabError::InvalidInput(format!(
            "first-layer perturbation shape {}×{} does not match {}×{}",
            wpert.rows, wpert.cols, net.m1, net.d
        )));
    }
    if vpert.rows != net.m2 || vpert.cols != net.m1 {
        return Err(LabError::InvalidInput(format!(
            "second-layer perturbation shape {}×{} does not match {}×{}",
            vpert.rows, vpert.cols, net.m2, net.m1
        )));
    }
    let mut base = net.clone();
    for v in base.wdelta.data_mut() {
        *v = 0.0;
    }
    for v in base.vdelta.data_mut() {
        *v = 0.0;
    }
    let mut pert = base.clone();
    pert.wdelta = wpert.clone();
    pert.vdelta = vpert.clone();

    let p0 = base.sign_pattern(x, SignAt::Init)?;
    let p1 = pert.sign_pattern(x, SignAt::Current)?;
    let flips1 = p0.dw.iter().zip(&p1.dw).filter(|(a, b)| a != b).count();
    let (d0, d1) = (
        p0.dv.as_ref().expect("three-layer pattern"),
        p1.dv.as_ref().expect("three-layer pattern"),
    );
    let flips2 = d0.iter().zip(d1.iter()).filter(|(a, b)| a != b).count();

    let pseudo = pert.pseudo_forward(x, &p0, BiasMode::Full)?;
    let real = pert.forward(x)?;
    let output_gap = pseudo
        .iter()
        .zip(&real)
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        .sqrt();

    let tau_w = (0..wpert.rows)
        .map(|i| norm2(wpert.row(i)))
        .fold(0.0, f64::max);
    let tau_v = vpert.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(CouplingReport {
        m1: net.m1,
        m2: net.m2,
        tau_w,
        tau_v,
        seed: 0,
        flips1,
        flips2,
        output_gap,
    })
}

/// Greedy first-layer perturbation under a (2,4) row-norm budget: flip the
/// neurons whose init pre-activation is cheapest to cross, spending
/// Σ‖row‖₂⁴ ≤ τ_w⁴. Each chosen row is −(pre_j + margin·sign(pre_j))·x/‖x‖²,
/// exactly crossing the kink. This is the extremal perturbation behind the
/// sparsity scaling: the flip count grows like τ_w^{4/5}·m₁^{6/5}.
pub fn flip_budget_perturbation(net: &ThreeLayerNet, x: &[f64], tau_w: f64) -> Result<Matrix> {
    if tau_w <= 0.0 {
        return Err(LabError::InvalidParameter("tau_w must be positive".into()));
    }
    let xn2 = dot(x, x);
    if xn2 == 0.0 {
        return Err(LabError::InvalidInput("x must be nonzero".into()));
    }
    let mut pre: Vec<(f64, usize)> = (0..net.m1)
        .map(|j| {
            let p = dot(net.w0.row(j), x) + net.b1[j];
            (p.abs(), j)
        })
        .collect();
    pre.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let budget = tau_w.powi(4);
    let mut spent = 0.0;
    let mut out = Matrix::zeros(net.m1, net.d);
    for &(mag, j) in &pre {
        let margin = 1e-9 * (1.0 + mag);
        let row_norm = (mag + margin) / xn2.sqrt();
        let cost = row_norm.powi(4);
        if spent + cost > budget {
            break;
        }
        spent += cost;
        let p = dot(net.w0.row(j), x) + net.b1[j];
        let sign = if p >= 0.0 { 1.0 } else { -1.0 };
        let c = -(mag + margin) * sign / xn2;
        for (o, &xv) in out.row_mut(j).iter_mut().zip(x.iter()) {
            *o = c * xv;
        }
    }
    Ok(out)
}

/// Symmetric-difference curvature estimate along a unit direction:
/// mean over `samples` of [f(p+√η·dir) + f(p−√η·dir) − 2f(p)] / η,
/// estimating dirᵀ∇²f·dir. Exact for quadratics at any η.
pub fn curvature_probe<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    direction: &[f64],
    eta: f64,
    samples: usize,
) -> Result<f64> {
    if eta <= 0.0 {
        return Err(LabError::InvalidParameter("eta must be positive".into()));
    }
    if samples == 0 {
        return Err(LabError::InvalidParameter("samples must be positive".into()));
    }
    let dn = norm2(direction);
    if (dn - 1.0).abs() > 1e-8 {
        return Err(LabError::InvalidInput(format!(
            "direction must be unit norm, got {dn}"
        )));
    }
    let h = eta.sqrt();
    let plus: Vec<f64> = point
        .iter()
        .zip(direction)
        .map(|(p, d)| p + h * d)
        .collect();
    let minus: Vec<f64> = point
        .iter()
        .zip(direction)
        .map(|(p, d)| p - h * d)
        .collect();
    let mut total = 0.0;
    for _ in 0..samples {
        total += (f(&plus) + f(&minus) - 2.0 * f(point)) / eta;
    }
    Ok(total / samples as f64)
}

/// Row-norm concentration ratio m·‖W‖₂,₄⁴ / ‖W‖_F⁴ (m = row count): 1 for
/// equal-norm rows, m for a single nonzero row.
pub fn norm_ratio(w: &Matrix) -> Result<f64> {
    let mut sum_sq = 0.0; // ‖W‖_F² = Σ q_i
    let mut sum_q2 = 0.0; // ‖W‖₂,₄⁴ = Σ q_i²
    for i in 0..w.rows {
        let q: f64 = w.row(i).iter().map(|v| v * v).sum();
        sum_sq += q;
        sum_q2 += q * q;
    }
    if sum_sq == 0.0 {
        return Err(LabError::InvalidInput("norm_ratio of the zero matrix".into()));
    }
    Ok(w.rows as f64 * sum_q2 / (sum_sq * sum_sq))
}

/// Final test loss minus final train loss.
pub fn generalization_gap(log: &TrainLog) -> Result<f64> {
    let test = log
        .final_test_loss
        .ok_or_else(|| LabError::InvalidInput("log has no test loss".into()))?;
    if !test.is_finite() || !log.final_train_loss.is_finite() {
        return Err(LabError::InvalidInput("non-finite losses in log".into()));
    }
    Ok(test - log.final_train_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::InitProfile;
    use crate::numerics::RngStream;
    use approx::assert_relative_eq;

    fn small_net(m1: usize, m2: usize, seed: u64) -> ThreeLayerNet {
        let mut rng = RngStream::new(seed, 0);
        ThreeLayerNet::init(m1, m2, 4, 1, InitProfile::Experiment, &mut rng).unwrap()
    }

    fn unit_x(d: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let n = norm2(&x);
        for v in &mut x {
            *v /= n;
        }
        x
    }

    #[test]
    fn zero_perturbation_means_zero_flips_and_gap() {
        let net = small_net(64, 16, 3);
        let mut rng = RngStream::new(9, 0);
        let x = unit_x(4, &mut rng);
        let rep = count_sign_flips(
            &net,
            &x,
            &Matrix::zeros(64, 4),
            &Matrix::zeros(16, 64),
        )
        .unwrap();
        assert_eq!(rep.flips1, 0);
        assert_eq!(rep.flips2, 0);
        assert_eq!(rep.output_gap, 0.0);
        assert_eq!(rep.tau_w, 0.0);
        assert_eq!(rep.tau_v, 0.0);
    }

    #[test]
    fn flip_counts_bounded_and_reproducible() {
        let net = small_net(128, 16, 4);
        let mut rng = RngStream::new(11, 0);
        let x = unit_x(4, &mut rng);
        let wpert = crate::numerics::sample_gaussian_matrix(128, 4, 0.01, &mut rng).unwrap();
        let vpert = crate::numerics::sample_gaussian_matrix(16, 128, 0.01, &mut rng).unwrap();
        let a = count_sign_flips(&net, &x, &wpert, &vpert).unwrap();
        let b = count_sign_flips(&net, &x, &wpert, &vpert).unwrap();
        assert!(a.flips1 <= 128 && a.flips2 <= 16);
        assert_eq!(a.flips1, b.flips1);
        assert_eq!(a.flips2, b.flips2);
        assert_eq!(a.output_gap, b.output_gap);
        assert!(a.output_gap.is_finite());
        assert!(a.tau_w > 0.0 && a.tau_v > 0.0);
    }

    #[test]
    fn budgeted_perturbation_respects_budget_and_is_monotone() {
        let net = small_net(256, 8, 5);
        let mut rng = RngStream::new(13, 0);
        let x = unit_x(4, &mut rng);
        let vzero = Matrix::zeros(8, 256);
        let mut last = 0usize;
        for &tau in &[0.01, 0.02, 0.04, 0.08] {
            let wpert = flip_budget_perturbation(&net, &x, tau).unwrap();
            // (2,4) norm within budget.
            let n24: f64 = (0..wpert.rows)
                .map(|i| norm2(wpert.row(i)).powi(4))
                .sum::<f64>()
                .powf(0.25);
            assert!(n24 <= tau * (1.0 + 1e-12), "{n24} > {tau}");
            let rep = count_sign_flips(&net, &x, &wpert, &vzero).unwrap();
            // Doubling τ can only add flips.
            assert!(rep.flips1 >= last, "{} < {last} at tau={tau}", rep.flips1);
            last = rep.flips1;
        }
        assert!(last > 0, "largest budget should flip something");
    }

    #[test]
    fn budgeted_perturbation_rejects_bad_input() {
        let net = small_net(8, 4, 6);
        assert!(flip_budget_perturbation(&net, &[1.0, 0.0, 0.0, 0.0], 0.0).is_err());
        assert!(flip_budget_perturbation(&net, &[0.0; 4], 0.1).is_err());
    }

    #[test]
    fn curvature_probe_exact_on_quadratics() {
        // f(x) = ‖x‖²: dirᵀ∇²f·dir = 2 for any unit direction and any η.
        let f = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        for &eta in &[1e-2, 1e-4, 1e-6] {
            let est = curvature_probe(f, &[0.3, -0.7, 1.1], &[0.6, 0.8, 0.0], eta, 1).unwrap();
            assert!((est - 2.0).abs() < 1e-6, "eta={eta}: {est}");
        }
        // f(u, v) = u² − v², direction e_v: −2.
        let g = |p: &[f64]| p[0] * p[0] - p[1] * p[1];
        let est = curvature_probe(g, &[0.5, 0.25], &[0.0, 1.0], 1e-4, 3).unwrap();
        assert!((est + 2.0).abs() < 1e-6, "{est}");
    }

    #[test]
    fn curvature_probe_validates_input() {
        let f = |p: &[f64]| p[0];
        assert!(curvature_probe(f, &[0.0], &[1.0], 0.0, 1).is_err());
        assert!(curvature_probe(f, &[0.0], &[1.0], 1e-4, 0).is_err());
        assert!(curvature_probe(f, &[0.0], &[0.5], 1e-4, 1).is_err());
    }

    #[test]
    fn norm_ratio_endpoints_exact() {
        // Equal-norm rows with power-of-two norms: exactly 1.
        let w = Matrix::from_rows(vec![
            vec![2.0, 0.0, 0.0],
            vec![0.0, -2.0, 0.0],
            vec![0.0, 0.0, 2.0],
            vec![2.0, 0.0, 0.0],
        ]);
        assert_eq!(norm_ratio(&w).unwrap(), 1.0);
        // Single nonzero row among 10: exactly 10.
        let mut s = Matrix::zeros(10, 3);
        s.row_mut(4).copy_from_slice(&[0.3, -1.2, 0.4]);
        assert_eq!(norm_ratio(&s).unwrap(), 10.0);
        assert!(norm_ratio(&Matrix::zeros(5, 2)).is_err());
    }

    #[test]
    fn norm_ratio_in_range_on_random_matrices() {
        let mut rng = RngStream::new(21, 0);
        for _ in 0..200 {
            let w = crate::numerics::sample_gaussian_matrix(17, 5, 1.0, &mut rng).unwrap();
            let r = norm_ratio(&w).unwrap();
            assert!((1.0..=17.0).contains(&r), "ratio {r} out of range");
        }
    }

    #[test]
    fn generalization_gap_basics() {
        let mut log = TrainLog {
            final_train_loss: 0.25,
            final_test_loss: Some(0.4),
            ..TrainLog::default()
        };
        assert_relative_eq!(generalization_gap(&log).unwrap(), 0.15, epsilon = 1e-15);
        log.final_test_loss = None;
        assert!(generalization_gap(&log).is_err());
        log.final_test_loss = Some(f64::NAN);
        assert!(generalization_gap(&log).is_err());
    }
}
