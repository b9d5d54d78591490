use super::config::{MASK, PAD};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// A rectangular grid of token sequences plus per-position supervision.
///
/// `inputs` is what the model reads, `targets[i]` is the token position `i`
/// must predict, and only positions with `loss_mask[i]` contribute to the
/// loss. For next-token batches `targets` is `inputs` shifted left; for
/// denoising batches `inputs` carries MASK where `targets` holds the clean
/// token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn new(
        batch_size: usize,
        seq_len: usize,
        inputs: Vec<u32>,
        targets: Vec<u32>,
        loss_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = batch_size * seq_len;
        if n == 0 || inputs.len() != n || targets.len() != n || loss_mask.len() != n {
            return Err(Error::Dimension(format!(
                "batch {batch_size}x{seq_len} with {} inputs, {} targets, {} mask entries",
                inputs.len(),
                targets.len(),
                loss_mask.len()
            )));
        }
        Ok(Self {
            batch_size,
            seq_len,
            inputs,
            targets,
            loss_mask,
        })
    }

    fn check_rectangular(seqs: &[Vec<u32>]) -> Result<usize> {
        let s = seqs.first().map(Vec::len).unwrap_or(0);
        if s == 0 || seqs.iter().any(|q| q.len() != s) {
            return Err(Error::Dimension("sequences must be non-empty and equal length".into()));
        }
        Ok(s)
    }

    /// Next-token batch: every position that has a non-PAD successor is
    /// supervised.
    pub fn next_token(seqs: &[Vec<u32>]) -> Result<Self> {
        let s = Self::check_rectangular(seqs)?;
        let mut targets = Vec::with_capacity(seqs.len() * s);
        let mut mask = Vec::with_capacity(seqs.len() * s);
        for q in seqs {
            for t in 0..s {
                let next = q.get(t + 1).copied().unwrap_or(PAD);
                targets.push(next);
                mask.push(next != PAD);
            }
        }
        Self::new(seqs.len(), s, seqs.concat(), targets, mask)
    }

    /// Denoising batch: each position flagged in `maskable` is replaced by
    /// MASK with probability `ratio`, and masked positions are supervised.
    /// Every row gets at least one masked position.
    pub fn masked(seqs: &[Vec<u32>], maskable: &[Vec<bool>], ratio: f64, rng: &mut Rng) -> Result<Self> {
        Self::masked_per_row(seqs, maskable, &vec![ratio; seqs.len()], rng)
    }

    /// As [`Batch::masked`] with a separate ratio for every row.
    pub fn masked_per_row(seqs: &[Vec<u32>], maskable: &[Vec<bool>], ratios: &[f64], rng: &mut Rng) -> Result<Self> {
        let s = Self::check_rectangular(seqs)?;
        if maskable.len() != seqs.len() || maskable.iter().any(|m| m.len() != s) || ratios.len() != seqs.len() {
            return Err(Error::Dimension(
                "maskable flags and ratios must match the sequences".into(),
            ));
        }
        let mut inputs = Vec::with_capacity(seqs.len() * s);
        let mut mask = Vec::with_capacity(seqs.len() * s);
        for ((q, m), &ratio) in seqs.iter().zip(maskable).zip(ratios) {
            let mut row_mask: Vec<bool> = m.iter().map(|&ok| ok && rng.uniform() < ratio).collect();
            if !row_mask.iter().any(|&x| x) {
                let candidates: Vec<usize> = (0..s).filter(|&i| m[i]).collect();
                if candidates.is_empty() {
                    return Err(Error::Contract("a row has no maskable position".into()));
                }
                row_mask[candidates[rng.below(candidates.len())]] = true;
            }
            for (tok, &hide) in q.iter().zip(&row_mask) {
                inputs.push(if hide { MASK } else { *tok });
            }
            mask.extend(row_mask);
        }
        Self::new(seqs.len(), s, inputs, seqs.concat(), mask)
    }

    pub fn loss_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// The same rows twice over.
    pub fn duplicated(&self) -> Self {
        Self {
            batch_size: self.batch_size * 2,
            seq_len: self.seq_len,
            inputs: [self.inputs.as_slice(), &self.inputs].concat(),
            targets: [self.targets.as_slice(), &self.targets].concat(),
            loss_mask: [self.loss_mask.as_slice(), &self.loss_mask].concat(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_token_shifts() {
        let b = Batch::next_token(&[vec![1, 2, 3]]).unwrap();
        assert_eq!(b.targets, vec![2, 3, PAD]);
        assert_eq!(b.loss_mask, vec![true, true, false]);
    }

    #[test]
    fn masked_keeps_at_least_one() {
        let mut rng = Rng::new(0);
        let b = Batch::masked(&[vec![5, 6, 7, 8]], &[vec![false, false, true, true]], 0.0, &mut rng).unwrap();
        assert_eq!(b.loss_positions(), 1);
        assert!(!b.loss_mask[0] && !b.loss_mask[1]);
        for i in 0..4 {
            assert_eq!(b.inputs[i] == MASK, b.loss_mask[i]);
        }
        assert_eq!(b.targets, vec![5, 6, 7, 8]);
    }

    #[test]
    fn ragged_rejected() {
        assert!(Batch::next_token(&[vec![1, 2], vec![1]]).is_err());
    }
}
