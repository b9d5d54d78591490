use super::checkpoint::ModelCheckpoint;
use super::config::{Mode, MASK};
use super::transformer::logits_for_rows;
use crate::error::{Error, Result};

fn argmax(row: &[f64], skip: Option<usize>) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best == usize::MAX || v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn check_prompts(prompts: &[Vec<u32>]) -> Result<usize> {
    let len = prompts.first().map(Vec::len).unwrap_or(0);
    if len == 0 || prompts.iter().any(|p| p.len() != len) {
        return Err(Error::Parameter("prompts must be non-empty and of equal length".into()));
    }
    Ok(len)
}

/// Greedy decoding of `max_new` tokens per prompt.
pub fn generate_ar(ck: &ModelCheckpoint, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    Ok(generate_ar_batch(ck, &[prompt.to_vec()], max_new)?.remove(0))
}

/// Greedy decoding for equal-length prompts run side by side.
pub fn generate_ar_batch(ck: &ModelCheckpoint, prompts: &[Vec<u32>], max_new: usize) -> Result<Vec<Vec<u32>>> {
    if ck.config.mode != Mode::Ar {
        return Err(Error::Contract("generate_ar needs an autoregressive checkpoint".into()));
    }
    let mut seqs = prompts.to_vec();
    if max_new == 0 {
        return Ok(seqs);
    }
    let len = check_prompts(prompts)?;
    if len + max_new - 1 > ck.config.max_seq_len {
        return Err(Error::Dimension(format!(
            "prompt {len} + {max_new} new tokens exceeds max_seq_len {}",
            ck.config.max_seq_len
        )));
    }
    let vocab = ck.config.vocab_size;
    for _ in 0..max_new {
        let cur = seqs[0].len();
        let tokens: Vec<u32> = seqs.concat();
        let rows: Vec<usize> = (0..seqs.len()).map(|b| b * cur + cur - 1).collect();
        let logits = logits_for_rows(ck, &tokens, seqs.len(), cur, &rows)?;
        for (b, seq) in seqs.iter_mut().enumerate() {
            seq.push(argmax(&logits[b * vocab..(b + 1) * vocab], None) as u32);
        }
    }
    Ok(seqs)
}

/// Output of a denoising run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffusionTrace {
    pub sequences: Vec<Vec<u32>>,
    /// Masked positions left in the first sequence after each step that ran.
    pub remaining: Vec<usize>,
}

/// Confidence-ordered parallel unmasking over `steps` denoising steps.
pub fn generate_diffusion(ck: &ModelCheckpoint, prompt: &[u32], target_len: usize, steps: usize) -> Result<Vec<u32>> {
    Ok(generate_diffusion_batch(ck, &[prompt.to_vec()], target_len, steps)?
        .sequences
        .remove(0))
}

/// Batched denoising for equal-length prompts.
///
/// The completion starts fully masked. Each step runs one forward pass over
/// the whole sequence; every still-masked position proposes its argmax token
/// (MASK excluded) with the softmax probability of that token as confidence,
/// and the `ceil(masked / steps_left)` most confident positions are
/// committed, ties going to the lower position. Steps with nothing left to
/// unmask are skipped.
pub fn generate_diffusion_batch(
    ck: &ModelCheckpoint,
    prompts: &[Vec<u32>],
    target_len: usize,
    steps: usize,
) -> Result<DiffusionTrace> {
    if ck.config.mode != Mode::Diffusion {
        return Err(Error::Contract(
            "generate_diffusion needs a diffusion checkpoint".into(),
        ));
    }
    if steps < 1 {
        return Err(Error::Parameter("at least one denoising step is required".into()));
    }
    let len = check_prompts(prompts)?;
    if target_len + len > ck.config.max_seq_len {
        return Err(Error::Parameter(format!(
            "prompt {len} + target {target_len} exceeds max_seq_len {}",
            ck.config.max_seq_len
        )));
    }
    let vocab = ck.config.vocab_size;
    let total = len + target_len;
    let mut seqs: Vec<Vec<u32>> = prompts
        .iter()
        .map(|p| {
            let mut s = p.clone();
            s.resize(total, MASK);
            s
        })
        .collect();
    let mut remaining = Vec::new();

    for step in 0..steps {
        let masked: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| (len..total).filter(|&i| s[i] == MASK).collect())
            .collect();
        if masked.iter().all(Vec::is_empty) {
            break;
        }
        let steps_left = steps - step;
        let rows: Vec<usize> = masked
            .iter()
            .enumerate()
            .flat_map(|(b, ps)| ps.iter().map(move |&p| b * total + p))
            .collect();
        let tokens = seqs.concat();
        let logits = logits_for_rows(ck, &tokens, seqs.len(), total, &rows)?;

        let mut cursor = 0;
        for (b, positions) in masked.iter().enumerate() {
            let mut proposals: Vec<(usize, u32, f64)> = Vec::with_capacity(positions.len());
            for &pos in positions {
                let row = &logits[cursor * vocab..(cursor + 1) * vocab];
                cursor += 1;
                let tok = argmax(row, Some(MASK as usize));
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let conf = (row[tok] - max).exp() / z;
                proposals.push((pos, tok as u32, conf));
            }
            let k = positions.len().div_ceil(steps_left);
            proposals.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(pos, tok, _) in proposals.iter().take(k) {
                seqs[b][pos] = tok;
            }
        }
        remaining.push(seqs[0][len..].iter().filter(|&&t| t == MASK).count());
    }
    Ok(DiffusionTrace {
        sequences: seqs,
        remaining,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(mode: Mode) -> ModelCheckpoint {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 1,
            max_seq_len: 24,
            mode,
            ..ModelConfig::default()
        };
        ModelCheckpoint::init(cfg, 3).unwrap()
    }

    #[test]
    fn zero_new_tokens() {
        let ck = tiny(Mode::Ar);
        assert_eq!(generate_ar(&ck, &[1, 2, 3], 0).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn ar_is_deterministic() {
        let ck = tiny(Mode::Ar);
        let a = generate_ar(&ck, &[1, 2, 3], 5).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, generate_ar(&ck, &[1, 2, 3], 5).unwrap());
    }

    #[test]
    fn mode_mismatch() {
        assert!(matches!(
            generate_ar(&tiny(Mode::Diffusion), &[1], 2),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            generate_diffusion(&tiny(Mode::Ar), &[1], 2, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_step_fills_everything() {
        let ck = tiny(Mode::Diffusion);
        let t = generate_diffusion_batch(&ck, &[vec![1, 2]], 6, 1).unwrap();
        assert_eq!(t.remaining, vec![0]);
        assert!(!t.sequences[0].contains(&MASK));
    }

    #[test]
    fn one_per_step_when_steps_equal_length() {
        let ck = tiny(Mode::Diffusion);
        let t = generate_diffusion_batch(&ck, &[vec![1, 2]], 5, 5).unwrap();
        assert_eq!(t.remaining, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn ceil_schedule() {
        let ck = tiny(Mode::Diffusion);
        let t = generate_diffusion_batch(&ck, &[vec![7]], 10, 4).unwrap();
        assert_eq!(t.remaining, vec![7, 4, 2, 0]);
    }

    #[test]
    fn bad_parameters() {
        let ck = tiny(Mode::Diffusion);
        assert!(matches!(generate_diffusion(&ck, &[1], 3, 0), Err(Error::Parameter(_))));
        assert!(matches!(
            generate_diffusion(&ck, &[1; 20], 10, 2),
            Err(Error::Parameter(_))
        ));
    }
}
