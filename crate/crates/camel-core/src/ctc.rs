//! CTC loss via the forward algorithm and CTC prefix beam search.
//!
//! All probability arithmetic is in log space; probability-space products
//! underflow long before realistic frame counts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tape::{log_add, NodeId, Tape};
use crate::numerics::Tensor;

/// Blank index, fixed globally (matches the vocabulary layout).
pub const BLANK: usize = 0;

/// Blank-free label sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtcTarget {
    labels: Vec<usize>,
}

impl CtcTarget {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l == BLANK) {
            return Err(Error::InvalidToken {
                id: bad,
                detail: "CTC target may not contain the blank".into(),
            });
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Frames needed to emit this target: one per label plus one per
    /// adjacent repeat (repeats need a separating blank).
    pub fn min_frames(&self) -> usize {
        self.labels.len() + self.labels.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Scored transcript candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Log-probability mass of the prefix under CTC.
    pub ctc_score: f64,
    /// Teacher-forced decoder log-probability; set by rescoring.
    pub att_score: Option<f64>,
}

/// `-log P(target | softmax(logits))` summed over all valid alignments.
/// Gradient w.r.t. `logits` is exact.
pub fn ctc_loss(tape: &mut Tape, logits: NodeId, target: &CtcTarget) -> Result<NodeId> {
    let logp = tape.row_log_softmax(logits)?;
    tape.ctc_loss_logp(logp, target.labels())
}

#[derive(Clone, Copy)]
struct PrefixMass {
    /// Log-mass of paths ending in blank.
    blank: f64,
    /// Log-mass of paths ending in the prefix's last label.
    non_blank: f64,
}

impl PrefixMass {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// Standard CTC prefix beam search over `[T x V]` row-normalized
/// log-probabilities. Returns up to `beam` hypotheses sorted by total prefix
/// log-probability (non-increasing). `skip_labels` excludes symbols from
/// being proposed (their emission mass is simply dropped).
pub fn ctc_prefix_beam_search_with(
    logprobs: &Tensor,
    beam: usize,
    skip_labels: &[usize],
) -> Result<Vec<Hypothesis>> {
    if beam < 1 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    if logprobs.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "ctc_prefix_beam_search",
            shape: logprobs.shape().to_vec(),
            detail: "log-probabilities must be [T x V]".into(),
        });
    }
    let (t_len, v) = (logprobs.rows(), logprobs.cols());
    let skip: Vec<bool> = {
        let mut s = vec![false; v];
        for &l in skip_labels {
            if l < v {
                s[l] = true;
            }
        }
        s
    };

    // BTreeMap keeps iteration (and therefore tie handling) deterministic.
    let mut beams: BTreeMap<Vec<usize>, PrefixMass> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        PrefixMass {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    );

    for t in 0..t_len {
        let row = &logprobs.data()[t * v..(t + 1) * v];
        let mut next: BTreeMap<Vec<usize>, PrefixMass> = BTreeMap::new();
        let mut bump = |prefix: Vec<usize>, blank_part: f64, non_blank_part: f64| {
            let e = next.entry(prefix).or_insert(PrefixMass {
                blank: f64::NEG_INFINITY,
                non_blank: f64::NEG_INFINITY,
            });
            e.blank = log_add(e.blank, blank_part);
            e.non_blank = log_add(e.non_blank, non_blank_part);
        };
        for (prefix, mass) in &beams {
            for k in 0..v {
                let lp = row[k];
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                if k == BLANK {
                    bump(prefix.clone(), mass.total() + lp, f64::NEG_INFINITY);
                } else if skip[k] {
                    continue;
                } else if prefix.last() == Some(&k) {
                    // Repeat symbol: extends the run (same prefix) from
                    // non-blank mass, or starts a new label after a blank.
                    bump(prefix.clone(), f64::NEG_INFINITY, mass.non_blank + lp);
                    let mut ext = prefix.clone();
                    ext.push(k);
                    bump(ext, f64::NEG_INFINITY, mass.blank + lp);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    bump(ext, f64::NEG_INFINITY, mass.total() + lp);
                }
            }
        }
        if next.len() > beam {
            let mut scored: Vec<(Vec<usize>, PrefixMass)> = next.into_iter().collect();
            scored.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
            scored.truncate(beam);
            next = scored.into_iter().collect();
        }
        beams = next;
    }

    let mut hyps: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(tokens, mass)| Hypothesis {
            tokens,
            ctc_score: mass.total(),
            att_score: None,
        })
        .filter(|h| h.ctc_score > f64::NEG_INFINITY)
        .collect();
    hyps.sort_by(|a, b| b.ctc_score.total_cmp(&a.ctc_score).then_with(|| a.tokens.cmp(&b.tokens)));
    hyps.truncate(beam);
    Ok(hyps)
}

pub fn ctc_prefix_beam_search(logprobs: &Tensor, beam: usize) -> Result<Vec<Hypothesis>> {
    ctc_prefix_beam_search_with(logprobs, beam, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_logits(seed: u64, t: usize, v: usize) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..t * v).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![t, v], data).unwrap()
    }

    fn log_softmax_rows(logits: &Tensor) -> Tensor {
        let (r, c) = (logits.rows(), logits.cols());
        let mut out = logits.clone();
        for i in 0..r {
            let row: Vec<f64> = (0..c).map(|j| logits.at(i, j)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out.data_mut()[i * c + j] = row[j] - lse;
            }
        }
        out
    }

    /// Exhaustive alignment enumeration: sum the probability of every frame
    /// labeling that collapses (merge repeats, drop blanks) to `target`.
    fn brute_force_nll(logp: &Tensor, target: &[usize]) -> f64 {
        let (t_len, v) = (logp.rows(), logp.cols());
        let mut total = f64::NEG_INFINITY;
        let n_paths = v.pow(t_len as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push(c % v);
                c /= v;
            }
            if collapse(&path) != target {
                continue;
            }
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp.at(t, k)).sum();
            total = log_add(total, lp);
        }
        -total
    }

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = BLANK;
        for &k in path {
            if k != BLANK && k != prev {
                out.push(k);
            }
            prev = k;
        }
        out
    }

    #[test]
    fn single_frame_uniform_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap());
        let target = CtcTarget::new(vec![1]).unwrap();
        let loss = ctc_loss(&mut tape, logits, &target).unwrap();
        let got = tape.value(loss).data()[0];
        assert!((got - 2.0f64.ln()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let logits = random_logits(17, 3, 3);
        let mut tape = Tape::new();
        let node = tape.input(logits.clone());
        let target = CtcTarget::new(vec![1, 2]).unwrap();
        let loss = ctc_loss(&mut tape, node, &target).unwrap();
        let got = tape.value(loss).data()[0];
        let want = brute_force_nll(&log_softmax_rows(&logits), &[1, 2]);
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn repeat_needs_separating_blank() {
        let mut tape = Tape::new();
        let logits = tape.input(random_logits(1, 2, 3));
        let target = CtcTarget::new(vec![1, 1]).unwrap();
        assert_eq!(target.min_frames(), 3);
        match ctc_loss(&mut tape, logits, &target) {
            Err(Error::InfeasibleTarget { frames, labels, repeats }) => {
                assert_eq!((frames, labels, repeats), (2, 2, 1));
            }
            other => panic!("expected InfeasibleTarget, got {other:?}"),
        }
    }

    #[test]
    fn target_rejects_blank() {
        assert!(CtcTarget::new(vec![0, 1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::numerics::{grad_check, GradCheckConfig, ParamStore};
        let mut store = ParamStore::new();
        store.insert("logits", random_logits(23, 5, 4));
        let f = |s: &ParamStore| {
            let mut tape = Tape::new();
            let logits = tape.param(s, "logits")?;
            let target = CtcTarget::new(vec![1, 3, 3]).unwrap();
            let loss = ctc_loss(&mut tape, logits, &target)?;
            let val = tape.value(loss).data()[0];
            Ok((val, tape.backward(loss)?))
        };
        let report = grad_check(
            &f,
            &store,
            &GradCheckConfig {
                max_probes_per_tensor: 20,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn blank_only_stream_gives_empty_hypothesis() {
        // All mass on blank every frame (hard one-hot in log space).
        let t = 4;
        let v = 3;
        let mut data = vec![f64::NEG_INFINITY; t * v];
        for i in 0..t {
            data[i * v + BLANK] = 0.0;
        }
        let logp = Tensor::new(vec![t, v], data).unwrap();
        let hyps = ctc_prefix_beam_search(&logp, 8).unwrap();
        assert_eq!(hyps.len(), 1);
        assert!(hyps[0].tokens.is_empty());
        assert!(hyps[0].ctc_score.abs() < 1e-12);
    }

    #[test]
    fn peaked_stream_collapses_greedily() {
        // blank, a, a, blank, b spells "ab".
        let v = 3;
        let frames = [BLANK, 1, 1, BLANK, 2];
        let peak = 0.999f64;
        let rest = ((1.0 - peak) / (v as f64 - 1.0)).ln();
        let mut data = vec![rest; frames.len() * v];
        for (t, &k) in frames.iter().enumerate() {
            data[t * v + k] = peak.ln();
        }
        let logp = Tensor::new(vec![frames.len(), v], data).unwrap();
        let hyps = ctc_prefix_beam_search(&logp, 4).unwrap();
        assert_eq!(hyps[0].tokens, vec![1, 2]);
    }

    /// Exhaustive prefix oracle: enumerate every frame labeling, collapse it,
    /// and accumulate path probability per collapsed string.
    fn exhaustive_prefix_scores(logp: &Tensor) -> BTreeMap<Vec<usize>, f64> {
        let (t_len, v) = (logp.rows(), logp.cols());
        let mut scores: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for code in 0..v.pow(t_len as u32) {
            let mut c = code;
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push(c % v);
                c /= v;
            }
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp.at(t, k)).sum();
            let key = collapse(&path);
            let e = scores.entry(key).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, lp);
        }
        scores
    }

    #[test]
    fn wide_beam_matches_exhaustive_prefix_oracle() {
        let logits = random_logits(23, 4, 3);
        let logp = log_softmax_rows(&logits);
        let hyps = ctc_prefix_beam_search(&logp, 64).unwrap();
        let oracle = exhaustive_prefix_scores(&logp);
        assert_eq!(hyps.len(), oracle.len());
        for h in &hyps {
            let want = oracle[&h.tokens];
            assert!(
                (h.ctc_score - want).abs() < 1e-10,
                "{:?}: got {}, want {}",
                h.tokens,
                h.ctc_score,
                want
            );
        }
    }

    #[test]
    fn beam_widening_never_decreases_top_score_and_order_is_sorted() {
        let logits = random_logits(31, 4, 3);
        let logp = log_softmax_rows(&logits);
        let mut prev_top = f64::NEG_INFINITY;
        for beam in 1..=16 {
            let hyps = ctc_prefix_beam_search(&logp, beam).unwrap();
            assert!(hyps[0].ctc_score >= prev_top - 1e-12);
            prev_top = hyps[0].ctc_score;
            for w in hyps.windows(2) {
                assert!(w[0].ctc_score >= w[1].ctc_score);
            }
            for h in &hyps {
                assert!(h.ctc_score <= 1e-12, "prefix mass exceeds 1");
            }
        }
    }

    #[test]
    fn beam_zero_rejected() {
        let logp = Tensor::new(vec![1, 2], vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        assert!(matches!(
            ctc_prefix_beam_search(&logp, 0),
            Err(Error::Config(_))
        ));
    }

    /// Total probability over all feasible targets is 1 on tiny instances.
    #[test]
    fn total_probability_sums_to_one() {
        for (t_len, v) in [(2usize, 2usize), (3, 3), (4, 3)] {
            let logits = random_logits(100 + t_len as u64, t_len, v);
            // Enumerate all blank-free targets with length <= t_len.
            let mut total = f64::NEG_INFINITY;
            let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
            while let Some(tgt) = stack.pop() {
                let target = CtcTarget::new(tgt.clone()).unwrap();
                if target.min_frames() <= t_len {
                    let mut tape = Tape::new();
                    let node = tape.input(logits.clone());
                    let loss = ctc_loss(&mut tape, node, &target).unwrap();
                    total = log_add(total, -tape.value(loss).data()[0]);
                }
                if tgt.len() < t_len {
                    for k in 1..v {
                        let mut ext = tgt.clone();
                        ext.push(k);
                        stack.push(ext);
                    }
                }
            }
            assert!(
                (total.exp() - 1.0).abs() < 1e-8,
                "T={t_len} V={v}: total prob {}",
                total.exp()
            );
        }
    }
}
