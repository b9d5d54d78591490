use quantlab::model::{forward, forward_tokens, loss, loss_and_grads, Batch, Mode, ModelCheckpoint, ModelConfig, BOS};
use quantlab::numerics::{finite_diff_grad_check, Rng};
use quantlab::Error;

fn reduced(mode: Mode) -> ModelConfig {
    ModelConfig {
        vocab_size: 259,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 6,
        mode,
    }
}

fn random_seqs(rng: &mut Rng, n: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| (0..len).map(|_| rng.below(vocab) as u32).collect())
        .collect()
}

fn grad_batch(mode: Mode, rng: &mut Rng) -> Batch {
    let seqs = random_seqs(rng, 2, 5, 256);
    match mode {
        Mode::Ar => Batch::next_token(&seqs).unwrap(),
        Mode::Diffusion => {
            let maskable = vec![vec![true; 5]; 2];
            Batch::masked(&seqs, &maskable, 0.5, rng).unwrap()
        }
    }
}

fn worst_grad_error(mode: Mode, seed: u64) -> (String, f64) {
    let mut rng = Rng::new(seed);
    let ck = ModelCheckpoint::init(reduced(mode), seed).unwrap();
    let batch = grad_batch(mode, &mut rng);
    let (_, grads) = loss_and_grads(&ck, &batch).unwrap();
    let mut worst = (String::new(), 0.0);
    for (path, point) in ck.params() {
        let err = finite_diff_grad_check(
            |p| {
                let mut probe = ck.clone();
                probe.set_param(path, p.clone()).unwrap();
                loss(&probe, &batch).unwrap()
            },
            &grads[path],
            point,
            1e-5,
        )
        .unwrap();
        if err > worst.1 {
            worst = (path.clone(), err);
        }
    }
    worst
}

#[test]
fn gradients_match_central_differences_ar() {
    let (path, err) = worst_grad_error(Mode::Ar, 1);
    assert!(err <= 1e-4, "{path}: {err}");
}

#[test]
fn gradients_match_central_differences_diffusion() {
    let (path, err) = worst_grad_error(Mode::Diffusion, 2);
    assert!(err <= 1e-4, "{path}: {err}");
}

#[test]
fn ar_logits_are_causal() {
    let ck = ModelCheckpoint::init(reduced(Mode::Ar), 5).unwrap();
    let base = vec![BOS, 10, 20, 30, 40, 50];
    let mut changed = base.clone();
    changed[3] = 99;
    let a = forward_tokens(&ck, &base, 1, 6).unwrap();
    let b = forward_tokens(&ck, &changed, 1, 6).unwrap();
    let v = ck.config.vocab_size;
    assert_eq!(a.data()[..3 * v], b.data()[..3 * v]);
    assert_ne!(a.data()[3 * v..], b.data()[3 * v..]);
}

#[test]
fn diffusion_logits_see_the_whole_sequence() {
    let ck = ModelCheckpoint::init(reduced(Mode::Diffusion), 5).unwrap();
    let base = vec![BOS, 10, 20, 30, 40, 50];
    let mut changed = base.clone();
    changed[3] = 99;
    let a = forward_tokens(&ck, &base, 1, 6).unwrap();
    let b = forward_tokens(&ck, &changed, 1, 6).unwrap();
    let v = ck.config.vocab_size;
    assert_ne!(a.data()[..v], b.data()[..v]);
}

#[test]
fn zero_network_gives_uniform_logits() {
    let ck = ModelCheckpoint::zeros(reduced(Mode::Ar)).unwrap();
    let logits = forward_tokens(&ck, &[BOS, 1, 2, 3], 1, 4).unwrap();
    let first = logits.data()[0];
    assert!(logits.data().iter().all(|&x| x == first));
}

#[test]
fn duplicated_rows_leave_the_mean_loss_unchanged() {
    let mut rng = Rng::new(8);
    let ck = ModelCheckpoint::init(reduced(Mode::Ar), 8).unwrap();
    let batch = Batch::next_token(&random_seqs(&mut rng, 3, 6, 256)).unwrap();
    let single = loss(&ck, &batch).unwrap();
    let double = loss(&ck, &batch.duplicated()).unwrap();
    assert!((single - double).abs() <= 1e-12 * single);
}

#[test]
fn initial_loss_is_close_to_uniform_entropy() {
    let mut rng = Rng::new(9);
    let cfg = ModelConfig {
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    let ck = ModelCheckpoint::init(cfg, 9).unwrap();
    let batch = Batch::next_token(&random_seqs(&mut rng, 4, 32, 256)).unwrap();
    let l = loss(&ck, &batch).unwrap();
    let expected = (259f64).ln();
    assert!((l - expected).abs() <= 0.1 * expected, "{l} vs {expected}");
}

#[test]
fn empty_loss_mask_is_a_contract_error() {
    let ck = ModelCheckpoint::init(reduced(Mode::Ar), 1).unwrap();
    let batch = Batch::new(1, 3, vec![1, 2, 3], vec![2, 3, 0], vec![false; 3]).unwrap();
    assert!(matches!(loss_and_grads(&ck, &batch), Err(Error::Contract(_))));
}

#[test]
fn oversized_sequence_is_a_shape_error() {
    let ck = ModelCheckpoint::init(reduced(Mode::Ar), 1).unwrap();
    let batch = Batch::next_token(&[vec![1; 7]]).unwrap();
    assert!(matches!(forward(&ck, &batch), Err(Error::Dimension(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = ModelCheckpoint::init(reduced(Mode::Diffusion), 21).unwrap();
    quantlab::model::save_checkpoint(&ck, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = quantlab::model::load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    quantlab::model::save_checkpoint(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}
