use super::*;
use super::regularizer::penalty_anchored;
use crate::linalg::{bauer_fike_bound, symmetric_eigen, EigenSpectrum, SquareMatrix};
use crate::nn::{build_discriminator, build_mlp, DiscSpec, LayerSpec, MlpSpec, NetworkSpec};
use num_complex::Complex64;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, v).unwrap()
}

fn linear_critic(w: &[f64], bias: f64) -> Network {
    let spec = NetworkSpec {
        input_shape: vec![w.len()],
        layers: vec![LayerSpec::LinearLogit],
    };
    let mut net = Network::new(spec, 0).unwrap();
    let mut p = w.to_vec();
    p.push(bias);
    net.set_params(&p).unwrap();
    net
}

fn mlp_critic(seed: u64) -> Network {
    build_mlp(
        &MlpSpec {
            input_dim: 2,
            hidden: vec![8, 8],
            output_dim: 1,
            weight_norm: true,
            logit_head: true,
        },
        seed,
    )
    .unwrap()
}

fn small_disc(seed: u64) -> Network {
    build_discriminator(
        &DiscSpec {
            height: 4,
            width: 6,
            channels: 2,
            res_blocks: 1,
            kernel: 3,
            tail_convs: 1,
        },
        seed,
    )
    .unwrap()
}

fn theta_with(w: Vec<f64>) -> ThetaMatrix {
    ThetaMatrix {
        magnitudes: vec![],
        n_frames: 0,
        n_bins: 0,
        band_weights: w,
    }
}

fn sorted_real(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).unwrap().then(b.partial_cmp(a).unwrap()));
    v
}

#[test]
fn band_edges_cover_range() {
    for (len, n) in [(26, 16), (6, 2), (7, 3), (5, 5)] {
        let e = band_edges(len, n);
        assert_eq!(e.len(), n);
        assert_eq!(e[0].0, 0);
        assert_eq!(e[n - 1].1, len);
        for w in e.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        assert!(e.iter().all(|(a, b)| b > a));
    }
}

#[test]
fn mixture_is_deterministic_and_fair() {
    let real = randn(vec![10_000, 2], 1);
    let fake = randn(vec![10_000, 2], 2);
    let a = mixture_sample(&real, &fake, 7).unwrap();
    let b = mixture_sample(&real, &fake, 7).unwrap();
    assert_eq!(a, b);
    let frac = a.from_real.iter().filter(|r| **r).count() as f64 / a.len() as f64;
    assert!((0.47..=0.53).contains(&frac), "{frac}");
    for i in 0..a.len() {
        let src = if a.from_real[i] { &real } else { &fake };
        assert_eq!(&a.items.values[i * 2..i * 2 + 2], &src.values[i * 2..i * 2 + 2]);
    }
    let c = mixture_sample(&real, &fake, 8).unwrap();
    assert_ne!(a.from_real, c.from_real);
}

#[test]
fn mixture_rejects_bad_batches() {
    let real = randn(vec![4, 2], 1);
    assert!(matches!(
        mixture_sample(&Tensor::zeros(vec![0, 2]), &Tensor::zeros(vec![0, 2]), 0),
        Err(Error::EmptyBatch)
    ));
    assert!(mixture_sample(&real, &randn(vec![3, 2], 2), 0).is_err());
}

#[test]
fn ipm_zero_for_identical_batches() {
    let critic = mlp_critic(3);
    let x = randn(vec![16, 2], 4);
    let mu = mixture_sample(&x, &x, 1).unwrap();
    let e = sipm_objective(&critic, &x, &x, &mu).unwrap();
    assert_eq!(e.ipm_value, 0.0);
    assert!(e.sobolev_term > 0.0);
}

#[test]
fn ipm_matches_direct_means() {
    let critic = mlp_critic(5);
    let real = randn(vec![32, 2], 6);
    let fake = randn(vec![32, 2], 7);
    let mu = mixture_sample(&real, &fake, 2).unwrap();
    let e = sipm_objective(&critic, &real, &fake, &mu).unwrap();
    let mean = |t: &Tensor| critic.predict(t).unwrap().values.iter().sum::<f64>() / 32.0;
    assert!((e.ipm_value - (mean(&real) - mean(&fake))).abs() < 1e-12);
}

#[test]
fn linear_critic_sobolev_term_is_squared_norm() {
    let w = [0.5, -2.0, 1.5];
    let critic = linear_critic(&w, 0.3);
    let real = randn(vec![8, 3], 1);
    let fake = randn(vec![8, 3], 2);
    let mu = mixture_sample(&real, &fake, 3).unwrap();
    let e = sipm_objective(&critic, &real, &fake, &mu).unwrap();
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    assert!((e.sobolev_term - norm2).abs() < 1e-12);
}

#[test]
fn linear_critic_scale_covariance() {
    let w = [0.7, -0.1, 0.4];
    let real = randn(vec![8, 3], 11);
    let fake = randn(vec![8, 3], 12);
    let mu = mixture_sample(&real, &fake, 3).unwrap();
    let base = sipm_objective(&linear_critic(&w, 0.0), &real, &fake, &mu).unwrap();
    for c in [0.5, 2.0, 3.0] {
        let ws: Vec<f64> = w.iter().map(|v| v * c).collect();
        let e = sipm_objective(&linear_critic(&ws, 0.0), &real, &fake, &mu).unwrap();
        assert!((e.ipm_value - c * base.ipm_value).abs() < 1e-12);
        assert!((e.sobolev_term - c * c * base.sobolev_term).abs() < 1e-12);
    }
}

#[test]
fn critic_spectrum_matches_explicit_gram() {
    let critic = mlp_critic(9);
    let x = randn(vec![16, 2], 10);
    let got = critic_eigen_spectrum(&critic, &x, 2).unwrap();
    let t = critic.trace(&x.values, 16).unwrap();
    let width = critic.feature_size();
    let mut a = [[0.0; 2]; 2];
    for s in 0..16 {
        let r = &t.features()[s * width..s * width + 2];
        for i in 0..2 {
            for j in 0..2 {
                a[i][j] += r[i] * r[j] / 16.0;
            }
        }
    }
    // closed form for a symmetric 2x2
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = (tr * tr / 4.0 - det).sqrt();
    let want = sorted_real(vec![tr / 2.0 + disc, tr / 2.0 - disc]);
    for (g, w) in got.values.iter().zip(want) {
        assert!((g.re - w).abs() < 1e-10 && g.im.abs() < 1e-12);
    }
}

#[test]
fn critic_spectrum_identity_and_zero_features() {
    // features of a bare logit head are its inputs
    let n = 4;
    let b = 4;
    let mut v = vec![0.0; b * n];
    for i in 0..n {
        v[i * n + i] = (b as f64).sqrt();
    }
    let x = Tensor::new(vec![b, n], v).unwrap();
    let critic = linear_critic(&[1.0; 4], 0.0);
    let s = critic_eigen_spectrum(&critic, &x, n).unwrap();
    assert!(s.values.iter().all(|l| (l.re - 1.0).abs() < 1e-12));
    let z = critic_eigen_spectrum(&critic, &Tensor::zeros(vec![b, n]), n).unwrap();
    assert!(z.values.iter().all(|l| l.norm() == 0.0));
    assert!(critic_eigen_spectrum(&critic, &Tensor::zeros(vec![2, n]), n).is_err());
}

#[test]
fn gradient_spectrum_of_constant_and_linear_critics() {
    let real = randn(vec![8, 4], 1);
    let fake = randn(vec![8, 4], 2);
    let mu = mixture_sample(&real, &fake, 1).unwrap();
    let zero = linear_critic(&[0.0; 4], 1.0);
    let s = gradient_eigen_spectrum(&zero, &mu, 2).unwrap();
    assert!(s.values.iter().all(|l| l.norm() == 0.0));
    let lin = linear_critic(&[1.0, -1.0, 2.0, 0.5], 0.0);
    let s = gradient_eigen_spectrum(&lin, &mu, 2).unwrap();
    // every pooled gradient is the same vector: rank one
    assert!(s.values[0].re > 0.1);
    assert!(s.values[1].norm() < 1e-12);
}

#[test]
fn gradient_spectrum_matches_finite_differences() {
    let critic = small_disc(3);
    let shape = critic.input_shape().to_vec();
    let mut bshape = vec![6];
    bshape.extend(&shape);
    let real = randn(bshape.clone(), 4);
    let fake = randn(bshape, 5);
    let mu = mixture_sample(&real, &fake, 6).unwrap();
    let n = 3;
    let got = gradient_eigen_spectrum(&critic, &mu, n).unwrap();

    let d = critic.input_size();
    let last = *shape.last().unwrap();
    let outer = d / last;
    let edges = band_edges(last, n);
    let h = 1e-5;
    let f = |x: &[f64]| critic.trace(x, 1).unwrap().output()[0];
    let mut pooled = Vec::new();
    for i in 0..6 {
        let x = &mu.items.values[i * d..(i + 1) * d];
        let mut grad = vec![0.0; d];
        for (j, gj) in grad.iter_mut().enumerate() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            *gj = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        for (lo, hi) in &edges {
            let mut acc = 0.0;
            for o in 0..outer {
                for c in *lo..*hi {
                    acc += grad[o * last + c];
                }
            }
            pooled.push(acc / ((hi - lo) * outer) as f64);
        }
    }
    let mut a = vec![vec![0.0; n]; n];
    for r in pooled.chunks(n) {
        for i in 0..n {
            for j in 0..n {
                a[i][j] += r[i] * r[j] / 6.0;
            }
        }
    }
    let want = symmetric_eigen(&SquareMatrix::from_rows(&a).unwrap()).unwrap();
    for (g, w) in got.values.iter().zip(&want.values) {
        assert!((g.re - w).abs() < 1e-4, "{} vs {w}", g.re);
    }
}

fn c(v: &[f64]) -> EigenSpectrum {
    EigenSpectrum::new(v.iter().map(|x| Complex64::new(*x, 0.0)).collect())
}

#[test]
fn penalty_cases() {
    let th = theta_with(vec![1.0, 1.0]);
    assert_eq!(regularizer_penalty(&c(&[3.0, 1.0]), &c(&[3.0, 1.0]), &th, 1.0).unwrap(), 0.0);
    // λ_f = 0: the bound vanishes and the penalty is Σ|λ_∇|
    let p = regularizer_penalty(&c(&[0.0, 0.0]), &c(&[2.0, -1.0]), &th, 1.0).unwrap();
    assert!((p - 3.0).abs() < 1e-12);
    // gap 4, bound 0.5·‖(3,4)‖ = 2.5
    let th2 = theta_with(vec![1.0, 1.0]);
    let p = regularizer_penalty(&c(&[4.0, 3.0]), &c(&[1.0, 2.0]), &th2, 0.5).unwrap();
    assert!((p - 1.5).abs() < 1e-12);
    // large weights make the bound slack
    let wide = theta_with(vec![10.0, 10.0]);
    assert_eq!(regularizer_penalty(&c(&[4.0, 3.0]), &c(&[1.0, 2.0]), &wide, 0.5).unwrap(), 0.0);
    assert!(regularizer_penalty(&c(&[1.0]), &c(&[1.0, 2.0]), &th, 1.0).is_err());
}

#[test]
fn penalty_gradient_mode_anchor() {
    let lf = [Complex64::new(4.0, 0.0), Complex64::new(3.0, 0.0)];
    let lg = [Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)];
    let w = [1.0, 1.0];
    let f = penalty_anchored(&lf, &lg, &w, 1.0, MatrixMode::FeatureGram).unwrap();
    let g = penalty_anchored(&lf, &lg, &w, 1.0, MatrixMode::GradientGram).unwrap();
    assert!((f - 2.0).abs() < 1e-12);
    assert!((g - 7.0).abs() < 1e-12);
}

#[test]
fn bauer_fike_holds_for_critic_matrices() {
    let critic = small_disc(8);
    let mut shape = vec![8];
    shape.extend(critic.input_shape());
    let real = randn(shape.clone(), 1);
    let fake = randn(shape, 2);
    let mu = mixture_sample(&real, &fake, 3).unwrap();
    let n = 3;
    let t = critic.trace(&real.values, 8).unwrap();
    let w = critic.feature_size();
    let f: Vec<f64> = (0..8).flat_map(|s| t.features()[s * w..s * w + n].to_vec()).collect();
    let af = gram(&f, 8, n);
    let pool = BandPooling::new(critic.input_shape(), n).unwrap();
    let g: Vec<f64> = gradients_at(&critic, &mu.items)
        .unwrap()
        .chunks(pool.item_size)
        .flat_map(|r| pool.apply(r))
        .collect();
    let ag = gram(&g, 8, n);
    let e = SquareMatrix::new(ag.sub(&af).unwrap()).unwrap();
    let a = SquareMatrix::new(af.clone()).unwrap();
    let bound = bauer_fike_bound(&a, &e).unwrap();
    let disp = crate::linalg::max_displacement(&a, &e).unwrap();
    assert!(disp <= bound * (1.0 + 1e-9), "{disp} > {bound}");
}

fn fd_check(critic: &mut Network, real: &Tensor, fake: &Tensor, cfg: &ObjectiveConfig, theta: Option<&ThetaMatrix>) {
    let mu = mixture_sample(real, fake, 5).unwrap();
    let lambda = 0.3;
    critic.reset_backward_passes();
    let g = critic_gradient(critic, real, fake, &mu, lambda, cfg, theta).unwrap();
    assert_eq!(g.passes, cfg.passes_per_step());
    if cfg.regularizer.is_some() {
        assert!(g.estimate.penalty > 0.0, "penalty inactive");
    }
    let n = critic.n_params();
    let h = 1e-5;
    let stride = (n / 40).max(1);
    for i in (0..n).step_by(stride) {
        let p0 = critic.params()[i];
        critic.params_mut()[i] = p0 + h;
        let lp = critic_gradient(critic, real, fake, &mu, lambda, cfg, theta).unwrap().loss;
        critic.params_mut()[i] = p0 - h;
        let lm = critic_gradient(critic, real, fake, &mu, lambda, cfg, theta).unwrap().loss;
        critic.params_mut()[i] = p0;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - g.grads[i]).abs();
        assert!(err <= 1e-4 * fd.abs().max(1.0), "param {i}: fd {fd} vs {}", g.grads[i]);
    }
}

#[test]
fn critic_gradient_matches_finite_differences_mlp() {
    let real = randn(vec![8, 2], 1);
    let fake = randn(vec![8, 2], 2);
    let theta = theta_with(vec![0.8, 0.3]);
    let reg = RegularizerConfig {
        eta: 0.05,
        eigen_dim: 2,
        matrix_mode: MatrixMode::FeatureGram,
        rho: 2.0,
    };
    for (constraint, regularizer) in [(false, None), (true, None), (true, Some(reg)), (false, Some(reg))] {
        let mut critic = mlp_critic(21);
        let cfg = ObjectiveConfig {
            constraint,
            rho_al: 1.5,
            regularizer,
        };
        fd_check(&mut critic, &real, &fake, &cfg, Some(&theta));
    }
    let mut critic = mlp_critic(22);
    let cfg = ObjectiveConfig {
        constraint: true,
        rho_al: 1.0,
        regularizer: Some(RegularizerConfig {
            matrix_mode: MatrixMode::GradientGram,
            ..reg
        }),
    };
    fd_check(&mut critic, &real, &fake, &cfg, Some(&theta));
}

#[test]
fn critic_gradient_matches_finite_differences_conv() {
    let mut critic = small_disc(4);
    let mut shape = vec![4];
    shape.extend(critic.input_shape());
    let real = randn(shape.clone(), 7);
    let fake = randn(shape, 8);
    let theta = theta_with(vec![1.0, 0.5]);
    let cfg = ObjectiveConfig {
        constraint: true,
        rho_al: 2.0,
        regularizer: Some(RegularizerConfig {
            eta: 0.05,
            eigen_dim: 2,
            matrix_mode: MatrixMode::FeatureGram,
            rho: 1.0,
        }),
    };
    fd_check(&mut critic, &real, &fake, &cfg, Some(&theta));
}

#[test]
fn critic_gradient_argument_errors() {
    let critic = mlp_critic(1);
    let real = randn(vec![4, 2], 1);
    let fake = randn(vec![4, 2], 2);
    let mu = mixture_sample(&real, &fake, 0).unwrap();
    let cfg = ObjectiveConfig::default();
    // regularizer without theta
    let small = ObjectiveConfig {
        regularizer: Some(RegularizerConfig {
            eigen_dim: 2,
            ..RegularizerConfig::default()
        }),
        ..cfg
    };
    assert!(critic_gradient(&critic, &real, &fake, &mu, 0.0, &small, None).is_err());
    // eigen dimension above the batch size
    let th = theta_with(vec![1.0; 16]);
    assert!(critic_gradient(&critic, &real, &fake, &mu, 0.0, &cfg, Some(&th)).is_err());
    let short = mixture_sample(&randn(vec![3, 2], 1), &randn(vec![3, 2], 2), 0).unwrap();
    assert!(critic_gradient(&critic, &real, &fake, &short, 0.0, &small, Some(&theta_with(vec![1.0, 1.0]))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ipm_is_antisymmetric(seed in 0u64..1000) {
        let critic = mlp_critic(seed);
        let real = randn(vec![8, 2], seed + 1);
        let fake = randn(vec![8, 2], seed + 2);
        let mu = mixture_sample(&real, &fake, seed).unwrap();
        let a = sipm_objective(&critic, &real, &fake, &mu).unwrap();
        let b = sipm_objective(&critic, &fake, &real, &mu).unwrap();
        prop_assert!((a.ipm_value + b.ipm_value).abs() < 1e-12);
        prop_assert!(a.sobolev_term >= 0.0);
    }

    #[test]
    fn penalty_is_a_hinge(
        lf in proptest::collection::vec(-5.0f64..5.0, 3),
        lg in proptest::collection::vec(-5.0f64..5.0, 3),
        w in proptest::collection::vec(1e-6f64..2.0, 3),
        eta in 0.01f64..3.0,
    ) {
        let th = theta_with(w.clone());
        let p = regularizer_penalty(&c(&lf), &c(&lg), &th, eta).unwrap();
        let a = c(&lf);
        let b = c(&lg);
        let gap: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm()).sum();
        let bound = eta * a.values.iter().zip(&w).map(|(l, wk)| (wk * l.re).powi(2)).sum::<f64>().sqrt();
        prop_assert!(p >= 0.0);
        prop_assert!((p - (gap - bound).max(0.0)).abs() < 1e-12);
        let same = regularizer_penalty(&a, &a, &th, eta).unwrap();
        prop_assert_eq!(same, 0.0);
    }
}
