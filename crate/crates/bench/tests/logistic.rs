use cubestrat::{estimate_vanishing, vanishing_grid, ScaleConvention, StreamKey};
use cubestrat_bench::logistic::{log_sigmoid, logistic_marginal_likelihood, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn quadrature_mean(fit_integrand: &(impl cubestrat::Integrand + ?Sized), s: usize, k: usize, reps: u64) -> (f64, f64) {
    let grid = vanishing_grid(s, k, 3).unwrap();
    let vals: Vec<f64> =
        (0..reps).into_par_iter().map(|j| estimate_vanishing(fit_integrand, 3, &grid, &StreamKey::new(77, j)).unwrap().value).collect();
    mean_se(&vals)
}

#[test]
fn no_observations_gives_the_prior_mass() {
    let data = Dataset::from_reader("a,b,y\n".as_bytes()).unwrap();
    for convention in [ScaleConvention::CholeskyOfHessian, ScaleConvention::CholeskyOfInverseHessian] {
        let fit = logistic_marginal_likelihood(&data, 2, 5.0, 1.5, convention, false).unwrap();
        assert!(fit.mode.iter().all(|m| m.abs() < 1e-10));
        let (m, se) = quadrature_mean(&fit.integrand, 2, 8, 200);
        assert!((m - 1.0).abs() <= 4.0 * se.max(1e-12), "{convention:?}: {m} ± {se}");
    }
}

/// Synthetic data from a known β; the marginal likelihood is checked against
/// plain Monte Carlo over the prior, `Z = E_prior[Π_i F(y_i βᵀx_i)]`.
#[test]
fn marginal_likelihood_matches_prior_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let beta = [0.4, -1.1];
    let mut text = String::from("x,y\n");
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..50 {
        let x: f64 = rng.sample(StandardNormal);
        let p = 1.0 / (1.0 + (-(beta[0] + beta[1] * x)).exp());
        let y = if rng.random::<f64>() < p { 1.0 } else { -1.0 };
        text.push_str(&format!("{x},{}\n", if y > 0.0 { 1 } else { 0 }));
        xs.push(x);
        ys.push(y);
    }
    let data = Dataset::from_reader(text.as_bytes()).unwrap();

    // both conventions share the mode, so they share the offset
    let mut quad = Vec::new();
    for convention in [ScaleConvention::CholeskyOfHessian, ScaleConvention::CholeskyOfInverseHessian] {
        let fit = logistic_marginal_likelihood(&data, 2, 5.0, 1.5, convention, true).unwrap();
        let (m, se) = quadrature_mean(&fit.integrand, 2, 16, 200);
        quad.push((convention, fit.integrand.log_offset(), m, se));
    }
    let offset = quad[0].1;
    assert_eq!(offset, quad[1].1);

    let prior = Normal::new(0.0, 5.0).unwrap();
    let draws: Vec<f64> = (0..64u64)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + chunk);
            let (xs, ys) = (&xs, &ys);
            (0..40_000).map(move |_| {
                let b0 = prior.sample(&mut rng);
                let b1 = prior.sample(&mut rng);
                let ll: f64 = xs.iter().zip(ys).map(|(x, y)| log_sigmoid(y * (b0 + b1 * x))).sum();
                (ll - offset).exp()
            })
        })
        .collect();
    let (mc, se_mc) = mean_se(&draws);

    for &(convention, _, m, se) in &quad {
        let gap = (m - mc).abs() / (se * se + se_mc * se_mc).sqrt();
        assert!(gap <= 4.0, "{convention:?}: {m:e} ± {se:e} vs prior MC {mc:e} ± {se_mc:e}");
    }
    // Scaling by the posterior covariance factor makes the integrand nearly
    // flat; 200 quadrature runs then beat 2.56e6 prior draws.
    let inverse = quad[1].3;
    assert!(inverse < se_mc && inverse < quad[0].3, "{quad:?} vs {se_mc:e}");
}
