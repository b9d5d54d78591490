mod common;

use common::{psd_with_spectrum, symmetric_eigenvalues};
use quantlab::hawq::{
    hvp_finite_diff, model_sensitivities, power_iteration_sensitivity, rank_sensitivities, EpsPolicy, Granularity,
    ModelObjective, QuadraticProbe, RankMode, SecondOrderObjective, SensitivityConfig,
};
use quantlab::model::{io, Batch, ModelCheckpoint, ModelConfig};
use quantlab::numerics::{Rng, Tensor};
use quantlab::Result;

fn diag_probe() -> QuadraticProbe {
    let a = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
    QuadraticProbe::new(vec![("w".into(), a, Tensor::vector(vec![0.5, -0.2]))]).unwrap()
}

#[test]
fn hvp_on_a_diagonal_quadratic() {
    let mut p = diag_probe();
    let hv = hvp_finite_diff(&mut p, "w", &Tensor::vector(vec![1.0, 0.0]), 1e-3).unwrap();
    assert!((hv.data()[0] - 3.0).abs() <= 3e-6, "{:?}", hv.data());
    assert!(hv.data()[1].abs() <= 1e-6);
}

#[test]
fn hvp_is_odd_in_the_direction() {
    let mut rng = Rng::new(1);
    let a = psd_with_spectrum(&mut rng, &[4.0, 2.0, 1.0, 0.5]);
    let mut p = QuadraticProbe::new(vec![("w".into(), a, Tensor::vector(vec![0.3, -1.0, 0.2, 0.7]))]).unwrap();
    let v = Tensor::vector(vec![0.5, 0.5, -0.5, 0.5]);
    let mut neg = v.clone();
    neg.scale(-1.0);
    let plus = hvp_finite_diff(&mut p, "w", &v, 1e-3).unwrap();
    let minus = hvp_finite_diff(&mut p, "w", &neg, 1e-3).unwrap();
    for (x, y) in plus.data().iter().zip(minus.data()) {
        assert!((x + y).abs() <= 1e-4, "{x} vs {y}");
    }
}

#[test]
fn halving_eps_is_exact_on_quadratics() {
    let mut p = diag_probe();
    let v = Tensor::vector(vec![0.6, 0.8]);
    let a = hvp_finite_diff(&mut p, "w", &v, 1e-3).unwrap();
    let b = hvp_finite_diff(&mut p, "w", &v, 5e-4).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
}

fn spectrum_probe(seed: u64, spectrum: &[f64]) -> QuadraticProbe {
    let mut rng = Rng::new(seed);
    let a = psd_with_spectrum(&mut rng, spectrum);
    let w = Tensor::vector((0..spectrum.len()).map(|_| rng.normal()).collect());
    QuadraticProbe::new(vec![("w".into(), a, w)]).unwrap()
}

fn dense(iters: usize) -> SensitivityConfig {
    SensitivityConfig {
        rho: 1.0,
        n_power_iters: iters,
        ..SensitivityConfig::default()
    }
}

#[test]
fn dense_power_iteration_finds_the_top_eigenvalue() {
    let mut p = spectrum_probe(2, &[5.0, 1.0, 0.1]);
    let r = power_iteration_sensitivity(&mut p, "w", &dense(100)).unwrap();
    assert!((r.lambda - 5.0).abs() <= 0.05, "{}", r.lambda);
    assert!(r.converged);
    assert_eq!(r.iters_used, 100);
}

#[test]
fn power_iterates_increase_towards_the_top_eigenvalue() {
    let mut p = spectrum_probe(3, &[5.0, 1.0, 0.1]);
    let r = power_iteration_sensitivity(&mut p, "w", &dense(5)).unwrap();
    assert_eq!(r.trajectory.len(), 5);
    for w in r.trajectory.windows(2) {
        assert!(w[1] >= w[0] - 1e-6, "{:?}", r.trajectory);
    }
    assert!(r.lambda >= r.trajectory[0] && r.lambda <= 5.0 * 1.01);
}

#[test]
fn random_psd_probes_match_the_dense_oracle() {
    let mut rng = Rng::new(4);
    for trial in 0..10 {
        let spectrum: Vec<f64> = (0..12).map(|_| rng.uniform_in(0.0, 3.0)).collect();
        let mut spectrum = spectrum;
        spectrum[0] = 6.0;
        let mut p = spectrum_probe(100 + trial, &spectrum);
        let a_top = *symmetric_eigenvalues(&psd_with_spectrum(&mut Rng::new(100 + trial), &spectrum))
            .last()
            .unwrap();
        let r = power_iteration_sensitivity(&mut p, "w", &dense(100)).unwrap();
        assert!((r.lambda - a_top).abs() <= 0.01 * a_top, "{} vs {a_top}", r.lambda);
    }
}

/// Records which coordinates the first perturbation touched.
struct SupportSpy {
    inner: QuadraticProbe,
    origin: Vec<f64>,
    support: Option<Vec<usize>>,
}

impl SecondOrderObjective for SupportSpy {
    fn parameter(&self, path: &str) -> Result<&Tensor> {
        self.inner.parameter(path)
    }

    fn parameter_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.inner.parameter_mut(path)
    }

    fn gradients(&mut self, paths: &[String]) -> Result<Vec<Tensor>> {
        let now = self.inner.parameter("w")?.data().to_vec();
        if self.support.is_none() && now != self.origin {
            self.support = Some((0..now.len()).filter(|&i| now[i] != self.origin[i]).collect());
        }
        self.inner.gradients(paths)
    }
}

#[test]
fn sparse_estimate_is_bounded_by_the_restricted_spectrum() {
    let mut rng = Rng::new(5);
    for trial in 0..20 {
        let spectrum: Vec<f64> = (0..40).map(|_| rng.uniform_in(0.0, 4.0)).collect();
        let inner = spectrum_probe(200 + trial, &spectrum);
        let origin = inner.parameter("w").unwrap().data().to_vec();
        let a = psd_with_spectrum(&mut Rng::new(200 + trial), &spectrum);
        let mut spy = SupportSpy {
            inner,
            origin,
            support: None,
        };
        let cfg = SensitivityConfig {
            seed: trial,
            ..SensitivityConfig::default()
        };
        let r = power_iteration_sensitivity(&mut spy, "w", &cfg).unwrap();
        let support = spy.support.unwrap();
        assert_eq!(support.len(), 4);
        let k = support.len();
        let mut sub = Tensor::zeros(&[k, k]);
        for (i, &si) in support.iter().enumerate() {
            for (j, &sj) in support.iter().enumerate() {
                sub.set(i, j, a.at(si, sj));
            }
        }
        let top = *symmetric_eigenvalues(&sub).last().unwrap();
        assert!(r.lambda <= top + 1e-6, "{} > {top}", r.lambda);
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn block_diagonal_probe(seed: u64, modules: usize, dim: usize) -> QuadraticProbe {
    let mut rng = Rng::new(seed);
    let blocks = (0..modules)
        .map(|m| {
            let level = 10f64.powf(m as f64 / (modules - 1) as f64 * 2.0);
            let spectrum: Vec<f64> = (0..dim).map(|_| level * rng.uniform_in(0.2, 1.0)).collect();
            let a = psd_with_spectrum(&mut rng, &spectrum);
            let w = Tensor::vector((0..dim).map(|_| rng.normal()).collect());
            (format!("m{m:02}"), a, w)
        })
        .collect();
    QuadraticProbe::new(blocks).unwrap()
}

#[test]
fn sparse_estimates_track_dense_ones_on_block_diagonal_probes() {
    let mut probe = block_diagonal_probe(6, 10, 60);
    let names = probe.names().to_vec();
    let dense_l: Vec<f64> = names
        .iter()
        .map(|n| power_iteration_sensitivity(&mut probe, n, &dense(100)).unwrap().lambda)
        .collect();
    let mut rhos = Vec::new();
    for resample in 0..50 {
        let cfg = SensitivityConfig {
            seed: 1000 + resample,
            ..SensitivityConfig::default()
        };
        let sparse_l: Vec<f64> = names
            .iter()
            .map(|n| power_iteration_sensitivity(&mut probe, n, &cfg).unwrap().lambda)
            .collect();
        rhos.push(spearman(&sparse_l, &dense_l));
    }
    rhos.sort_by(f64::total_cmp);
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    assert!(mean >= 0.5, "mean Spearman {mean}, min {}", rhos[0]);
    assert!(rhos[0] > 0.0, "{rhos:?}");
}

fn tiny_model() -> ModelCheckpoint {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 2,
        max_seq_len: 8,
        ..ModelConfig::default()
    };
    ModelCheckpoint::init(cfg, 3).unwrap()
}

fn batches(seed: u64, n: usize) -> Vec<Batch> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let seqs: Vec<Vec<u32>> = (0..2)
                .map(|_| (0..8).map(|_| rng.below(256) as u32).collect())
                .collect();
            Batch::next_token(&seqs).unwrap()
        })
        .collect()
}

#[test]
fn flat_model_has_zero_sensitivity() {
    let mut ck = ModelCheckpoint::zeros(tiny_model().config).unwrap();
    let b = batches(1, 2);
    let recs = model_sensitivities(&mut ck, &b, &SensitivityConfig::default(), false).unwrap();
    assert_eq!(recs.len(), 12);
    for r in recs {
        assert!(r.lambda.abs() <= 1e-12, "{}: {}", r.path, r.lambda);
        assert!(r.converged);
    }
}

#[test]
fn sensitivity_run_restores_the_checkpoint_bytes() {
    let mut ck = tiny_model();
    let before = io::encode(&ck, &[]).unwrap();
    let b = batches(2, 2);
    let recs = model_sensitivities(&mut ck, &b, &SensitivityConfig::default(), true).unwrap();
    assert_eq!(recs.len(), 14);
    assert!(recs.iter().all(|r| r.lambda > 0.0 && r.lambda.is_finite()));
    assert_eq!(io::encode(&ck, &[]).unwrap(), before);
}

#[test]
fn scaling_the_loss_scales_every_lambda() {
    let b = batches(3, 2);
    let cfg = SensitivityConfig::default();
    let mut ck = tiny_model();
    let paths = ck.quantizable_paths(false);
    let run = |ck: &mut ModelCheckpoint, c: f64| {
        let mut obj = ModelObjective::new(ck, &b);
        obj.loss_scale = c;
        paths
            .iter()
            .map(|p| power_iteration_sensitivity(&mut obj, p, &cfg).unwrap())
            .collect::<Vec<_>>()
    };
    let base = run(&mut ck, 1.0);
    let four = run(&mut ck, 4.0);
    let three = run(&mut ck, 3.0);
    for ((a, b), c) in base.iter().zip(&four).zip(&three) {
        assert_eq!(b.lambda, 4.0 * a.lambda);
        assert!((c.lambda - 3.0 * a.lambda).abs() <= 1e-6 * c.lambda);
    }
    for mode in [RankMode::Raw, RankMode::Normalized] {
        assert_eq!(
            rank_sensitivities(&base, mode).unwrap(),
            rank_sensitivities(&three, mode).unwrap()
        );
    }
}

#[test]
fn per_block_granularity() {
    let mut ck = tiny_model();
    let cfg = SensitivityConfig {
        granularity: Granularity::PerBlock,
        eps: EpsPolicy::Fixed(1e-4),
        ..SensitivityConfig::default()
    };
    let recs = model_sensitivities(&mut ck, &batches(4, 1), &cfg, false).unwrap();
    let names: Vec<&str> = recs.iter().map(|r| r.path.as_str()).collect();
    assert_eq!(names, ["layers.0", "layers.1"]);
    assert_eq!(recs[0].n_params, 4 * 64 + 2 * 128);
    assert_eq!(recs[0].eps, 1e-4);
}

#[test]
fn invalid_configs() {
    let mut p = diag_probe();
    for cfg in [
        SensitivityConfig {
            rho: 0.0,
            ..SensitivityConfig::default()
        },
        SensitivityConfig {
            rho: 1.5,
            ..SensitivityConfig::default()
        },
        SensitivityConfig {
            n_power_iters: 0,
            ..SensitivityConfig::default()
        },
        SensitivityConfig {
            eps: EpsPolicy::Fixed(0.0),
            ..SensitivityConfig::default()
        },
    ] {
        assert!(power_iteration_sensitivity(&mut p, "w", &cfg).is_err());
    }
}
