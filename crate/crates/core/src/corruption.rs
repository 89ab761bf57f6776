//! Caption corruption for the masked-fragment and denoising tasks.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::vocab::{MASK, NUM_RESERVED};

/// Mean of the span-length law before truncation.
pub const SPAN_LAMBDA: f64 = 3.0;
/// Default fraction of caption tokens masked by denoising.
pub const IDA_MASK_RATE: f64 = 0.3;
/// Fraction of the caption covered by the masked fragment.
pub const IMLM_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Imlm,
    IdaSingle,
    IdaMulti,
}

/// How a denoising span appears in the corrupted caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IdaMode {
    /// One `[MASK]` per span.
    Single,
    /// One `[MASK]` per masked token.
    Multi,
}

impl std::str::FromStr for IdaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(IdaMode::Single),
            "multi" => Ok(IdaMode::Multi),
            _ => Err(Error::Config(format!("ida mask mode must be single or multi, got {s:?}"))),
        }
    }
}

/// A corrupted caption together with what the decoder must produce.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSample {
    pub original: Vec<u32>,
    /// Encoder-side tokens, at positions `0..corrupted.len()`.
    pub corrupted: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub target_positions: Vec<usize>,
    /// One flag per original token; set where it was corrupted.
    pub mask: Vec<bool>,
    /// `(start, len)` in original coordinates, left to right.
    pub spans: Vec<(usize, usize)>,
    pub strategy: Strategy,
}

impl MaskedSample {
    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Noises each listed position in place: 80% `[MASK]`, 10% a uniformly drawn
/// ordinary token, 10% unchanged.
pub fn apply_801010<R: Rng + ?Sized>(
    tokens: &mut [u32],
    positions: &[usize],
    vocab_size: usize,
    rng: &mut R,
) -> Result<()> {
    if vocab_size <= NUM_RESERVED as usize {
        return Err(Error::Input("vocabulary has no ordinary tokens".into()));
    }
    for &p in positions {
        let u: f64 = rng.random();
        if u < 0.8 {
            tokens[p] = MASK;
        } else if u < 0.9 {
            tokens[p] = rng.random_range(NUM_RESERVED..vocab_size as u32);
        }
    }
    Ok(())
}

/// Fragment of `round(M/2)` tokens clamped to `[1, M-1]`, starting at `start`.
pub fn imlm_fragment_len(m: usize) -> usize {
    ((IMLM_FRACTION * m as f64).round() as usize).clamp(1, m.saturating_sub(1).max(1))
}

/// The masked-fragment sample with a given start; noise drawn from `rng`.
pub fn imlm_at<R: Rng + ?Sized>(w: &[u32], start: usize, vocab_size: usize, rng: &mut R) -> Result<MaskedSample> {
    let m = w.len();
    let len = imlm_fragment_len(m);
    if m < 2 || start + len > m {
        return Err(Error::Input(format!("fragment start {start} invalid for {m} tokens")));
    }
    let positions: Vec<usize> = (start..start + len).collect();
    let mut corrupted = w.to_vec();
    apply_801010(&mut corrupted, &positions, vocab_size, rng)?;
    let mut mask = vec![false; m];
    mask[start..start + len].fill(true);
    Ok(MaskedSample {
        original: w.to_vec(),
        corrupted,
        target_tokens: w[start..start + len].to_vec(),
        target_positions: positions,
        mask,
        spans: vec![(start, len)],
        strategy: Strategy::Imlm,
    })
}

/// Masked-fragment sample with a uniform start. `None` for captions shorter
/// than two tokens.
pub fn sample_imlm<R: Rng + ?Sized>(w: &[u32], vocab_size: usize, rng: &mut R) -> Result<Option<MaskedSample>> {
    let m = w.len();
    if m < 2 {
        return Ok(None);
    }
    let start = rng.random_range(0..=m - imlm_fragment_len(m));
    imlm_at(w, start, vocab_size, rng).map(Some)
}

/// Poisson(λ) length redrawn until it lies in `1..=max`.
pub fn draw_span_length<R: Rng + ?Sized>(lambda: f64, max: usize, rng: &mut R) -> usize {
    let law = Poisson::new(lambda).expect("positive rate");
    loop {
        let k = law.sample(rng) as usize;
        if (1..=max).contains(&k) {
            return k;
        }
    }
}

/// Builds a denoising sample from explicit spans; they must be in order,
/// non-empty, in range and separated by at least one token.
pub fn ida_from_spans(w: &[u32], spans: &[(usize, usize)], mode: IdaMode) -> Result<MaskedSample> {
    let m = w.len();
    let mut mask = vec![false; m];
    let mut next_free = 0;
    for (k, &(s, l)) in spans.iter().enumerate() {
        let min_start = if k == 0 { 0 } else { next_free + 1 };
        if l == 0 || s < min_start || s + l > m {
            return Err(Error::Input(format!("span {k} {:?} invalid for {m} tokens", (s, l))));
        }
        mask[s..s + l].fill(true);
        next_free = s + l;
    }
    if spans.is_empty() {
        return Err(Error::Input("denoising sample needs at least one span".into()));
    }
    let mut corrupted = Vec::with_capacity(m);
    let mut t = 0;
    for &(s, l) in spans {
        corrupted.extend_from_slice(&w[t..s]);
        match mode {
            IdaMode::Single => corrupted.push(MASK),
            IdaMode::Multi => corrupted.extend(std::iter::repeat_n(MASK, l)),
        }
        t = s + l;
    }
    corrupted.extend_from_slice(&w[t..]);
    Ok(MaskedSample {
        original: w.to_vec(),
        corrupted,
        target_tokens: w.to_vec(),
        target_positions: (0..m).collect(),
        mask,
        spans: spans.to_vec(),
        strategy: match mode {
            IdaMode::Single => Strategy::IdaSingle,
            IdaMode::Multi => Strategy::IdaMulti,
        },
    })
}

/// Denoising sample: span lengths drawn left to right until `max(1,
/// round(rate·M))` tokens are covered, then placed uniformly among all
/// non-adjacent arrangements. `None` for captions shorter than two tokens.
pub fn sample_ida<R: Rng + ?Sized>(w: &[u32], mode: IdaMode, rate: f64, rng: &mut R) -> Result<Option<MaskedSample>> {
    let m = w.len();
    if m < 2 {
        return Ok(None);
    }
    let budget = ((rate * m as f64).round() as usize).clamp(1, m);
    let mut lens = Vec::new();
    let mut covered = 0;
    while covered < budget {
        // k spans of total S need S + k - 1 tokens; stop drawing once the
        // next span could not be separated from the previous one.
        let room = m - (covered + lens.len());
        let max = (budget - covered).min(room);
        if max == 0 {
            break;
        }
        let l = draw_span_length(SPAN_LAMBDA, max, rng);
        lens.push(l);
        covered += l;
    }
    let k = lens.len();
    // Gaps g_0, g_k >= 0 and inner gaps >= 1; after removing the mandatory
    // inner tokens this is a uniform composition of n into k+1 parts.
    let n = m - covered - (k - 1);
    let picks = rand::seq::index::sample(rng, n + k, k).into_vec();
    let mut cuts = picks;
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(k);
    let mut pos = 0;
    let mut prev: Option<usize> = None;
    for (i, &c) in cuts.iter().enumerate() {
        pos += match prev {
            None => c,
            Some(p) => c - p,
        };
        spans.push((pos, lens[i]));
        pos += lens[i];
        prev = Some(c);
    }
    ida_from_spans(w, &spans, mode).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn caption(m: usize) -> Vec<u32> {
        (0..m as u32).map(|i| 5 + i).collect()
    }

    #[test]
    fn imlm_examples() {
        let mut rng = RngStream::new(0, 0, "t").rng();
        let s = imlm_at(&caption(10), 3, 50, &mut rng).unwrap();
        assert_eq!(s.target_positions, vec![3, 4, 5, 6, 7]);
        assert_eq!(s.target_tokens, vec![8, 9, 10, 11, 12]);
        assert_eq!(s.num_masked(), 5);
        assert_eq!(imlm_fragment_len(2), 1);
        assert_eq!(sample_imlm(&[7], 50, &mut rng).unwrap(), None);
    }

    #[test]
    fn ida_examples() {
        let w = caption(10);
        let s = ida_from_spans(&w, &[(2, 3)], IdaMode::Single).unwrap();
        assert_eq!(s.corrupted.len(), 8);
        assert_eq!(s.corrupted[2], MASK);
        assert_eq!(s.corrupted[3], w[5]);
        let m = ida_from_spans(&w, &[(2, 3)], IdaMode::Multi).unwrap();
        assert_eq!(m.corrupted.len(), 10);
        assert_eq!(&m.corrupted[2..5], &[MASK; 3]);
        assert_eq!(m.target_tokens, w);
        assert!(ida_from_spans(&w, &[(0, 2), (2, 1)], IdaMode::Single).is_err());
        assert!(ida_from_spans(&w, &[(8, 3)], IdaMode::Single).is_err());
    }

    #[test]
    fn truncated_poisson_mean() {
        let mut rng = RngStream::new(1, 0, "span").rng();
        let n = 100_000;
        let mean = (0..n).map(|_| draw_span_length(3.0, usize::MAX, &mut rng)).sum::<usize>() as f64 / n as f64;
        let exact = 3.0 / (1.0 - (-3.0f64).exp());
        assert!((mean - exact).abs() < 0.05, "{mean} vs {exact}");
    }

    #[test]
    fn noise_proportions() {
        let mut rng = RngStream::new(2, 0, "noise").rng();
        let n = 100_000;
        let mut toks = vec![7u32; n];
        let positions: Vec<usize> = (0..n).collect();
        apply_801010(&mut toks, &positions, 50, &mut rng).unwrap();
        let masked = toks.iter().filter(|&&t| t == MASK).count() as f64 / n as f64;
        // A random draw can land on 7 as well: 1 in 45 of the random slice.
        let random = toks.iter().filter(|&&t| t != MASK && t != 7).count() as f64 / n as f64;
        let kept = toks.iter().filter(|&&t| t == 7).count() as f64 / n as f64;
        assert!((masked - 0.8).abs() < 0.01);
        assert!((random - 0.1 * 44.0 / 45.0).abs() < 0.01);
        assert!((kept - (0.1 + 0.1 / 45.0)).abs() < 0.01);
        assert!(toks.iter().all(|&t| t == MASK || t >= NUM_RESERVED));
        assert!(apply_801010(&mut [7], &[0], 5, &mut rng).is_err());
    }

    #[test]
    fn imlm_position_frequencies_match_uniform_start() {
        let m = 10;
        let len = imlm_fragment_len(m);
        let starts = m - len + 1;
        let mut rng = RngStream::new(3, 0, "imlm").rng();
        let n = 100_000;
        let mut hits = vec![0usize; m];
        for _ in 0..n {
            let s = sample_imlm(&caption(m), 50, &mut rng).unwrap().unwrap();
            for (h, &f) in hits.iter_mut().zip(&s.mask) {
                *h += f as usize;
            }
        }
        for (p, &h) in hits.iter().enumerate() {
            let covering = (0..starts).filter(|&s| s <= p && p < s + len).count();
            let expect = covering as f64 / starts as f64;
            assert!((h as f64 / n as f64 - expect).abs() < 0.01, "position {p}");
        }
        let overall = hits.iter().sum::<usize>() as f64 / (n * m) as f64;
        assert!((overall - 0.5).abs() < 0.01);
    }

    #[test]
    fn ida_start_positions_cover_sequence() {
        let mut rng = RngStream::new(4, 0, "ida").rng();
        let mut first = [false; 12];
        for _ in 0..2000 {
            let s = sample_ida(&caption(12), IdaMode::Single, IDA_MASK_RATE, &mut rng).unwrap().unwrap();
            first[s.spans[0].0] = true;
            assert_eq!(s.num_masked(), 4);
        }
        assert!(first[0] && first[8]);
    }

    proptest! {
        #[test]
        fn ida_invariants(m in 2usize..=60, seed in 0u64..10_000, multi in any::<bool>(), rate in 0.05f64..0.6) {
            let mode = if multi { IdaMode::Multi } else { IdaMode::Single };
            let w = caption(m);
            let mut rng = RngStream::new(seed, m as u64, "ida").rng();
            let s = sample_ida(&w, mode, rate, &mut rng).unwrap().unwrap();
            prop_assert!(s.num_masked() > 0);
            let budget = ((rate * m as f64).round() as usize).clamp(1, m);
            prop_assert!(s.num_masked() <= budget);
            for pair in s.spans.windows(2) {
                prop_assert!(pair[0].0 + pair[0].1 < pair[1].0);
            }
            let collapsed: usize = s.spans.iter().map(|&(_, l)| l - 1).sum();
            match mode {
                IdaMode::Single => prop_assert_eq!(s.corrupted.len(), m - collapsed),
                IdaMode::Multi => prop_assert_eq!(s.corrupted.len(), m),
            }
            prop_assert_eq!(&s.target_tokens, &w);
            if mode == IdaMode::Multi {
                for t in 0..m {
                    if !s.mask[t] {
                        prop_assert_eq!(s.corrupted[t], w[t]);
                    } else {
                        prop_assert_eq!(s.corrupted[t], MASK);
                    }
                }
            }
        }

        #[test]
        fn imlm_invariants(m in 2usize..=60, seed in 0u64..10_000) {
            let w = caption(m);
            let mut rng = RngStream::new(seed, 0, "imlm").rng();
            let s = sample_imlm(&w, 70, &mut rng).unwrap().unwrap();
            prop_assert!(s.num_masked() >= 1 && s.num_masked() < m);
            prop_assert_eq!(s.corrupted.len(), m);
            for t in 0..m {
                if !s.mask[t] {
                    prop_assert_eq!(s.corrupted[t], w[t]);
                }
            }
            let again = sample_imlm(&w, 70, &mut RngStream::new(seed, 0, "imlm").rng()).unwrap().unwrap();
            prop_assert_eq!(s, again);
        }
    }
}
