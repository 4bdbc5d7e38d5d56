//! Noise oracles against quadrature, Tweedie's formula and perturbation statistics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use polaris::oracle::{AnalyticModel, Condition, GaussianComponent, NoisePredictor, Perturbed};
use polaris::rng;

struct Density {
    weight: f64,
    mean: DVector<f64>,
    prec: DMatrix<f64>,
    log_norm: f64,
}

impl Density {
    fn new(weight: f64, mean: &[f64], cov: &DMatrix<f64>) -> Self {
        let d = mean.len() as f64;
        Self {
            weight,
            mean: DVector::from_column_slice(mean),
            prec: cov.clone().try_inverse().unwrap(),
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln()),
        }
    }

    fn pdf(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mean;
        self.weight * (self.log_norm - 0.5 * r.dot(&(&self.prec * &r))).exp()
    }
}

/// `E[eps | x_t]` by trapezoid quadrature over `x0` on a uniform box grid.
fn quadrature_noise(parts: &[&Density], x_t: &DVector<f64>, ab: f64, half_width: f64, n: usize) -> DVector<f64> {
    let d = x_t.len();
    let h = 2.0 * half_width / (n - 1) as f64;
    let (s, var) = (ab.sqrt(), 1.0 - ab);
    let mut num = DVector::zeros(d);
    let mut den = 0.0;
    let mut idx = vec![0usize; d];
    loop {
        let x0 = DVector::from_fn(d, |i, _| -half_width + h * idx[i] as f64);
        let lik = (-(x_t - &x0 * s).norm_squared() / (2.0 * var)).exp();
        let w = lik * parts.iter().map(|p| p.pdf(&x0)).sum::<f64>();
        num += &x0 * w;
        den += w;
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    let post_mean = num / den;
    (x_t - post_mean * s) / var.sqrt()
}

fn spd(entries: &[f64], d: usize) -> DMatrix<f64> {
    let l = DMatrix::from_row_slice(d, d, entries);
    &l * l.transpose()
}

#[test]
fn mixture_noise_matches_quadrature() {
    // (dim, grid points per axis, half width)
    for (d, n, hw) in [(1usize, 4001usize, 12.0), (2, 1201, 12.0), (3, 161, 9.0)] {
        let (m0, m1): (Vec<f64>, Vec<f64>) = (
            (0..d).map(|i| 1.0 - 0.5 * i as f64).collect(),
            (0..d).map(|i| -1.2 + 0.3 * i as f64).collect(),
        );
        let l0: Vec<f64> = (0..d * d)
            .map(|k| {
                if k % (d + 1) == 0 {
                    0.8
                } else if k / d > k % d {
                    0.3
                } else {
                    0.0
                }
            })
            .collect();
        let l1: Vec<f64> = (0..d * d)
            .map(|k| {
                if k % (d + 1) == 0 {
                    0.6 + 0.1 * (k / d) as f64
                } else if k / d > k % d {
                    -0.2
                } else {
                    0.0
                }
            })
            .collect();
        let (c0, c1) = (spd(&l0, d), spd(&l1, d));
        let model = AnalyticModel::new(vec![
            GaussianComponent::from_covariance(0.35, DVector::from_column_slice(&m0), c0.clone()).unwrap(),
            GaussianComponent::from_covariance(0.65, DVector::from_column_slice(&m1), c1.clone()).unwrap(),
        ])
        .unwrap();
        let (p0, p1) = (Density::new(0.35, &m0, &c0), Density::new(0.65, &m1, &c1));
        let p0_alone = Density::new(1.0, &m0, &c0);
        for (ab, x) in [(0.3f64, 0.4), (0.7, -0.9), (0.95, 0.2)] {
            let x_t = DVector::from_fn(d, |i, _| x + 0.3 * i as f64);
            let cases = [
                (Condition::Unconditional, quadrature_noise(&[&p0, &p1], &x_t, ab, hw, n)),
                (Condition::Component(0), quadrature_noise(&[&p0_alone], &x_t, ab, hw, n)),
            ];
            for (cond, reference) in cases {
                let got = model.predict_noise(&x_t, &cond, ab).unwrap();
                let err = (&got - &reference).amax();
                assert!(err < 1e-6, "d={d} ab={ab} {cond:?}: {got} vs {reference} (err {err:e})");
            }
        }
    }
}

fn log_gaussian(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let r = x - mean;
    let d = x.len() as f64;
    -0.5 * (r.dot(&(cov.clone().try_inverse().unwrap() * &r))
        + cov.determinant().ln()
        + d * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn tweedie_noise_is_scaled_negative_score() {
    let mut r = rng::keyed(5, 0x7E);
    for d in [1, 3, 6] {
        let l = DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => r.random_range(0.5..1.5),
            std::cmp::Ordering::Greater => r.random_range(-0.5..0.5),
            _ => 0.0,
        });
        let cov = &l * l.transpose();
        let mean = DVector::from_fn(d, |_, _| r.random_range(-2.0..2.0));
        let model = AnalyticModel::new(vec![
            GaussianComponent::from_covariance(1.0, mean.clone(), cov.clone()).unwrap()
        ])
        .unwrap();
        for ab in [0.05f64, 0.5, 0.98] {
            let marg_mean = &mean * ab.sqrt();
            let marg_cov = &cov * ab + DMatrix::identity(d, d) * (1.0 - ab);
            let x = DVector::from_fn(d, |_, _| r.random_range(-2.0..2.0));
            let h = 1e-5;
            let grad = DVector::from_fn(d, |i, _| {
                let mut e = DVector::zeros(d);
                e[i] = h;
                (log_gaussian(&(&x + &e), &marg_mean, &marg_cov) - log_gaussian(&(&x - &e), &marg_mean, &marg_cov))
                    / (2.0 * h)
            });
            let tweedie = -grad * (1.0 - ab).sqrt();
            let eps = model.predict_noise(&x, &Condition::Unconditional, ab).unwrap();
            let rel = (&eps - &tweedie).norm() / tweedie.norm();
            assert!(rel < 1e-5, "d={d} ab={ab}: relative error {rel:e}");
            let lp = model.marginal_log_density(&x, &Condition::Unconditional, ab).unwrap();
            assert!((lp - log_gaussian(&x, &marg_mean, &marg_cov)).abs() < 1e-10);
        }
    }
}

#[test]
fn perturbation_statistics() {
    let scale = 0.3;
    let base = AnalyticModel::standard_gaussian(1);
    let noisy = Perturbed::new(&base, scale, 11).unwrap();
    let x = DVector::from_element(1, 0.7);
    let exact = base.predict_noise(&x, &Condition::Unconditional, 0.5).unwrap()[0];
    let n = 100_000;
    let deltas: Vec<f64> = (0..n)
        .map(|_| noisy.predict_noise(&x, &Condition::Unconditional, 0.5).unwrap()[0] - exact)
        .collect();
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let std = (deltas.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!(mean.abs() < 4.0 * scale / (n as f64).sqrt(), "mean {mean}");
    assert!((std / scale - 1.0).abs() < 0.02, "std {std}");
    assert_eq!(noisy.calls(), n as u64);
}
