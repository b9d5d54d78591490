mod common;

use common::{random_matrix, symmetric_eigenvalues};
use quantlab::gptq::{
    collect_calibration, gptq_quantize_layer, gptq_quantize_model, recon_error, ColumnOrder, GptqConfig,
    LayerCalibration,
};
use quantlab::model::{Batch, ModelCheckpoint, ModelConfig};
use quantlab::numerics::{matmul, Rng, Tensor};
use quantlab::quant::{dequantize, qmax, quantize_weight, GroupQuantSpec};
use quantlab::Error;

fn calibration_from(x: &Tensor) -> LayerCalibration {
    let mut c = LayerCalibration::new("w", x.shape()[1]);
    c.add_inputs(x).unwrap();
    c
}

/// Inputs whose columns are correlated through a random mixing matrix.
fn correlated_inputs(rng: &mut Rng, samples: usize, d: usize) -> Tensor {
    let z = random_matrix(rng, samples, d);
    let mut mix = random_matrix(rng, d, d);
    for i in 0..d {
        let v = mix.at(i, i) + 2.0;
        mix.set(i, i, v);
    }
    matmul(&z, &mix).unwrap()
}

#[test]
fn identity_hessian_reproduces_round_to_nearest() {
    let mut rng = Rng::new(1);
    for bits in [2u8, 3, 4, 8] {
        let w = random_matrix(&mut rng, 8, 12);
        let calib = LayerCalibration {
            path: "w".into(),
            h: Tensor::identity(12),
            n_samples: 1,
        };
        let cfg = GptqConfig {
            bits,
            group_size: 5,
            ..GptqConfig::default()
        };
        let got = gptq_quantize_layer(&w, &calib, &cfg).unwrap().weight;
        let rtn = quantize_weight(&w, GroupQuantSpec::new(bits, 5).unwrap()).unwrap();
        assert_eq!(got, rtn, "bits {bits}");
    }
}

/// Smallest `tr(ΔHΔᵀ)/2` over every code pair on the grid of `scale`.
fn brute_force_two_columns(w: &Tensor, h: &Tensor, scale: f64, bits: u8) -> f64 {
    let q = qmax(bits);
    let mut best = f64::INFINITY;
    for c1 in -q..=q {
        for c2 in -q..=q {
            let cand = Tensor::from_rows(&[vec![c1 as f64 * scale, c2 as f64 * scale]]).unwrap();
            best = best.min(recon_error(w, &cand, h).unwrap());
        }
    }
    best
}

fn strongly_correlated_pair(rng: &mut Rng) -> LayerCalibration {
    let rows: Vec<Vec<f64>> = (0..64)
        .map(|_| {
            let a = rng.normal();
            vec![a, 0.95 * a + 0.1 * rng.normal()]
        })
        .collect();
    calibration_from(&Tensor::from_rows(&rows).unwrap())
}

#[test]
fn two_column_instance_is_optimal_on_its_grid() {
    let mut rng = Rng::new(2);
    let calib = strongly_correlated_pair(&mut rng);
    let w = Tensor::from_rows(&[vec![1.0, 0.55]]).unwrap();
    let cfg = GptqConfig {
        bits: 2,
        group_size: 2,
        ..GptqConfig::default()
    };
    let res = gptq_quantize_layer(&w, &calib, &cfg).unwrap();
    let scale = res.weight.scales().unwrap()[0];
    let best = brute_force_two_columns(&w, &calib.h, scale, 2);
    assert!(res.recon_error <= best * (1.0 + 1e-9), "{} vs {best}", res.recon_error);
    let rtn = dequantize(&quantize_weight(&w, GroupQuantSpec::new(2, 2).unwrap()).unwrap());
    assert!(res.recon_error <= recon_error(&w, &rtn, &calib.h).unwrap());
}

#[test]
fn beats_round_to_nearest_on_random_layers() {
    let mut rng = Rng::new(4);
    let mut wins = 0;
    let mut improvements = Vec::new();
    for _ in 0..100 {
        let w = random_matrix(&mut rng, 16, 16);
        let calib = calibration_from(&correlated_inputs(&mut rng, 64, 16));
        let cfg = GptqConfig {
            bits: 3,
            ..GptqConfig::default()
        };
        let g = gptq_quantize_layer(&w, &calib, &cfg).unwrap().recon_error;
        let rtn = dequantize(&quantize_weight(&w, GroupQuantSpec::new(3, 128).unwrap()).unwrap());
        let r = recon_error(&w, &rtn, &calib.h).unwrap();
        if g <= r {
            wins += 1;
        }
        improvements.push(r - g);
    }
    improvements.sort_by(f64::total_cmp);
    assert!(wins >= 90, "{wins} wins");
    assert!(improvements[50] > 0.0);
}

#[test]
fn diagonal_order_keeps_groups_and_beats_round_to_nearest() {
    let mut rng = Rng::new(5);
    let w = random_matrix(&mut rng, 6, 10);
    let calib = calibration_from(&correlated_inputs(&mut rng, 40, 10));
    let cfg = GptqConfig {
        bits: 4,
        group_size: 4,
        column_order: ColumnOrder::ByDiagDesc,
        ..GptqConfig::default()
    };
    let res = gptq_quantize_layer(&w, &calib, &cfg).unwrap();
    assert_eq!(res.weight.scales().unwrap().len(), 6 * 3);
    let rtn = dequantize(&quantize_weight(&w, GroupQuantSpec::new(4, 4).unwrap()).unwrap());
    assert!(res.recon_error <= recon_error(&w, &rtn, &calib.h).unwrap());
}

#[test]
fn hessian_is_symmetric_psd_and_additive() {
    let mut rng = Rng::new(6);
    let x = correlated_inputs(&mut rng, 5, 8);
    let once = calibration_from(&x);
    let mut twice = once.clone();
    twice.add_inputs(&x).unwrap();
    for (a, b) in once.h.data().iter().zip(twice.h.data()) {
        assert_eq!(2.0 * a, *b);
    }
    assert_eq!(once.h, once.h.transpose().unwrap());
    let min = symmetric_eigenvalues(&once.h)[0];
    assert!(min >= -1e-8, "{min}");
}

fn small_model() -> ModelCheckpoint {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 2,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    ModelCheckpoint::init(cfg, 11).unwrap()
}

fn batches(rng: &mut Rng, n: usize) -> Vec<Batch> {
    (0..n)
        .map(|_| {
            let seqs: Vec<Vec<u32>> = (0..4)
                .map(|_| (0..16).map(|_| rng.below(256) as u32).collect())
                .collect();
            Batch::next_token(&seqs).unwrap()
        })
        .collect()
}

#[test]
fn calibration_doubles_with_a_duplicated_batch() {
    let ck = small_model();
    let mut rng = Rng::new(7);
    let b = batches(&mut rng, 1);
    let paths = ck.quantizable_paths(false);
    let one = collect_calibration(&ck, &b, &paths).unwrap();
    let two = collect_calibration(&ck, &[b[0].clone(), b[0].clone()], &paths).unwrap();
    for p in &paths {
        for (a, c) in one[p].h.data().iter().zip(two[p].h.data()) {
            assert_eq!(2.0 * a, *c);
        }
    }
    assert!(matches!(collect_calibration(&ck, &[], &paths), Err(Error::Contract(_))));
}

#[test]
fn model_quantization_is_deterministic_and_covers_every_layer() {
    let ck = small_model();
    let mut rng = Rng::new(8);
    let b = batches(&mut rng, 2);
    let cfg = GptqConfig {
        bits: 4,
        group_size: 8,
        ..GptqConfig::default()
    };
    let a = gptq_quantize_model(&ck, &b, &cfg).unwrap();
    let again = gptq_quantize_model(&ck, &b, &cfg).unwrap();
    assert_eq!(a.checkpoint, again.checkpoint);
    assert_eq!(a.report.len(), 12);
    assert!(a.report.iter().all(|r| r.recon_error >= 0.0 && r.bits == 4));
    for p in ck.quantizable_paths(false) {
        assert_ne!(a.checkpoint.param(&p).unwrap(), ck.param(&p).unwrap(), "{p}");
    }
    assert_eq!(a.checkpoint.param("ln_f.gain").unwrap(), ck.param("ln_f.gain").unwrap());

    let isolated = gptq_quantize_model(
        &ck,
        &b,
        &GptqConfig {
            sequential: false,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_eq!(isolated.report.len(), 12);
    // The first stage sees identical inputs either way.
    assert_eq!(isolated.report[0], a.report[0]);

    let with_emb = gptq_quantize_model(
        &ck,
        &b,
        &GptqConfig {
            include_embeddings: true,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(with_emb.report.len(), 14);
}

#[test]
fn sixteen_bits_is_rejected() {
    let ck = small_model();
    let mut rng = Rng::new(9);
    let cfg = GptqConfig {
        bits: 16,
        ..GptqConfig::default()
    };
    assert!(matches!(
        gptq_quantize_model(&ck, &batches(&mut rng, 1), &cfg),
        Err(Error::Parameter(_))
    ));
}
