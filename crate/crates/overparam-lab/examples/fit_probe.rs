use overparam_lab::diagnostics::{count_sign_flips, flip_budget_perturbation};
use overparam_lab::nets::{InitProfile, ThreeLayerNet};
use overparam_lab::numerics::{norm2, Matrix, RngStream};

fn main() {
    let tau = 0.02f64;
    let t0 = std::time::Instant::now();
    let mut medians = Vec::new();
    for &m1 in &[1000usize, 4000, 16000] {
        let mut flips: Vec<usize> = Vec::new();
        for seed in 0..20u64 {
            let mut rng = RngStream::new(100 + seed, 0);
            let net = ThreeLayerNet::init(m1, 8, 4, 1, InitProfile::Experiment, &mut rng).unwrap();
            let mut x: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
            let n = norm2(&x);
            for v in &mut x { *v /= n; }
            let wpert = flip_budget_perturbation(&net, &x, tau).unwrap();
            let rep = count_sign_flips(&net, &x, &wpert, &Matrix::zeros(8, m1)).unwrap();
            flips.push(rep.flips1);
        }
        flips.sort();
        let med = flips[10] as f64;
        println!("m1={m1}: median flips {med} (min {} max {})", flips[0], flips[19]);
        medians.push((m1 as f64).ln());
        medians.push(med.ln());
    }
    // slope over the three points by least squares
    let xs = [medians[0], medians[2], medians[4]];
    let ys = [medians[1], medians[3], medians[5]];
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    println!("slope {slope:.3} elapsed {:?}", t0.elapsed());
}
