//! Beam search and greedy decoding over any step-wise model.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::ModelError;
use crate::text::{decode_ids, TextError, Vocabulary, EOS};

/// Per-step diagnostics recorded along a hypothesis.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepTrace {
    pub gamma: f64,
    pub p_gen: f64,
    pub attn: Vec<f64>,
    pub delta_m: Vec<f64>,
    pub delta_s: Vec<f64>,
}

pub struct Step<S> {
    /// Natural-log probabilities over the extended vocabulary.
    pub log_probs: Vec<f64>,
    pub state: S,
    pub trace: StepTrace,
}

pub trait StepModel {
    type State: Clone;

    fn ext_vocab(&self) -> usize;
    fn initial_state(&mut self) -> Result<Self::State, ModelError>;
    /// Advances from `state` after feeding `prev`.
    fn step(&mut self, state: &Self::State, prev: usize) -> Result<Step<Self::State>, ModelError>;
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Generated ids, including the final EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub trace: Vec<StepTrace>,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Log-probability per generated token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            self.log_prob
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn by_score<S>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search. Each round keeps the best `beam` one-token extensions of
/// the live hypotheses by cumulative log-probability (ties to the smaller
/// token sequence); extensions ending in `eos` move to the finished pool.
/// Stops once `beam` hypotheses have finished or after `max_len` tokens.
/// If fewer than `beam` finished, the surviving live ones join the pool.
/// The pool is ranked by log-probability per token.
pub fn beam_search<M: StepModel>(
    model: &mut M,
    beam: usize,
    max_len: usize,
    bos: usize,
    eos: usize,
) -> Result<Vec<Hypothesis<M::State>>, ModelError> {
    if beam == 0 {
        return Err(ModelError::Config("beam width must be at least 1".into()));
    }
    let vocab = model.ext_vocab();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state()?,
        trace: Vec::new(),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();
    for _ in 0..max_len {
        let mut steps = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * vocab);
        for (hi, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(bos);
            let step = model.step(&h.state, prev)?;
            if step.log_probs.len() != vocab {
                return Err(ModelError::Config(format!(
                    "model returned {} log-probabilities for a vocabulary of {vocab}",
                    step.log_probs.len()
                )));
            }
            for (tok, &lp) in step.log_probs.iter().enumerate() {
                cands.push((h.log_prob + lp, hi, tok));
            }
            steps.push(step);
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (lp, hi, tok) in cands {
            let parent = &live[hi];
            let step = &steps[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut trace = parent.trace.clone();
            trace.push(step.trace.clone());
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                state: step.state.clone(),
                trace,
                finished: tok == eos,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    if finished.len() < beam {
        finished.extend(live);
    }
    finished.sort_by(by_score);
    Ok(finished)
}

/// Argmax decoding, ties to the lower id.
pub fn greedy<M: StepModel>(
    model: &mut M,
    max_len: usize,
    bos: usize,
    eos: usize,
) -> Result<Hypothesis<M::State>, ModelError> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state()?,
        trace: Vec::new(),
        finished: false,
    };
    while h.tokens.len() < max_len {
        let prev = h.tokens.last().copied().unwrap_or(bos);
        let step = model.step(&h.state, prev)?;
        let (tok, lp) = step
            .log_probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &lp)| if lp > best.1 { (i, lp) } else { best });
        h.tokens.push(tok);
        h.log_prob += lp;
        h.state = step.state;
        h.trace.push(step.trace);
        if tok == eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Space-joined tokens, extended ids resolved through `oov`, trailing EOS
/// dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary, oov: &[String]) -> Result<String, TextError> {
    let ids = match ids.last() {
        Some(&EOS) => &ids[..ids.len() - 1],
        _ => ids,
    };
    Ok(decode_ids(ids, vocab, oov)?.join(" "))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Deterministic model whose next-token distribution is a pseudo-random
    /// function of the prefix.
    pub struct PrefixModel {
        pub vocab: usize,
        pub seed: u64,
        pub sharpness: f64,
    }

    impl StepModel for PrefixModel {
        type State = Vec<usize>;

        fn ext_vocab(&self) -> usize {
            self.vocab
        }

        fn initial_state(&mut self) -> Result<Vec<usize>, ModelError> {
            Ok(Vec::new())
        }

        fn step(&mut self, state: &Vec<usize>, prev: usize) -> Result<Step<Vec<usize>>, ModelError> {
            let mut prefix = state.clone();
            prefix.push(prev);
            let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-1.0..1.0) * self.sharpness).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            Ok(Step {
                log_probs: logits.iter().map(|l| l - m - z.ln()).collect(),
                state: prefix,
                trace: StepTrace::default(),
            })
        }
    }

    /// Every sequence ending in EOS within `max_len`, plus every EOS-free
    /// sequence of exactly `max_len`, ranked like the beam pool.
    pub fn exhaustive<M: StepModel>(m: &mut M, max_len: usize, bos: usize, eos: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::new(), 0.0, m.initial_state().unwrap())];
        while let Some((toks, lp, st)) = stack.pop() {
            let prev = toks.last().copied().unwrap_or(bos);
            let step = m.step(&st, prev).unwrap();
            for (t, &l) in step.log_probs.iter().enumerate() {
                let mut nt: Vec<usize> = toks.clone();
                nt.push(t);
                let nl = lp + l;
                if t == eos || nt.len() == max_len {
                    out.push((nt, nl));
                } else {
                    stack.push((nt, nl, step.state.clone()));
                }
            }
        }
        out.sort_by(|a, b| {
            let (sa, sb) = (a.1 / a.0.len() as f64, b.1 / b.0.len() as f64);
            sb.total_cmp(&sa).then_with(|| a.0.cmp(&b.0))
        });
        out
    }

    #[test]
    fn wide_beam_equals_exhaustive_search() {
        for seed in 0..20 {
            let mut m = PrefixModel { vocab: 4, seed, sharpness: 2.0 };
            let best = beam_search(&mut m, 64, 3, 0, EOS).unwrap();
            let oracle = exhaustive(&mut m, 3, 0, EOS);
            assert_eq!(best[0].tokens, oracle[0].0, "seed {seed}");
            assert!((best[0].score() - oracle[0].1 / oracle[0].0.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..50 {
            let mut m = PrefixModel { vocab: 6, seed, sharpness: 3.0 };
            let g = greedy(&mut m, 7, 0, EOS).unwrap();
            let b = beam_search(&mut m, 1, 7, 0, EOS).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(g.tokens, b[0].tokens);
            assert_eq!(g.log_prob, b[0].log_prob);
        }
    }

    #[test]
    fn log_prob_is_sum_of_steps_and_non_increasing() {
        let mut m = PrefixModel { vocab: 5, seed: 3, sharpness: 1.0 };
        for h in beam_search(&mut m, 4, 6, 0, EOS).unwrap() {
            let mut state = Vec::new();
            let mut prev = 0;
            let mut lp = 0.0;
            for &t in &h.tokens {
                let s = m.step(&state, prev).unwrap();
                let next = lp + s.log_probs[t];
                assert!(next <= lp);
                lp = next;
                state = s.state;
                prev = t;
            }
            assert_eq!(lp, h.log_prob);
            if h.finished {
                assert_eq!(h.tokens.last(), Some(&EOS));
                assert_eq!(h.tokens.iter().filter(|&&t| t == EOS).count(), 1);
            }
        }
    }

    struct EosFirst;

    impl StepModel for EosFirst {
        type State = ();
        fn ext_vocab(&self) -> usize {
            5
        }
        fn initial_state(&mut self) -> Result<(), ModelError> {
            Ok(())
        }
        fn step(&mut self, _: &(), _: usize) -> Result<Step<()>, ModelError> {
            let mut log_probs = vec![f64::NEG_INFINITY; 5];
            log_probs[EOS] = 0.0;
            Ok(Step { log_probs, state: (), trace: StepTrace::default() })
        }
    }

    #[test]
    fn certain_eos_gives_single_token() {
        let hyps = beam_search(&mut EosFirst, 5, 10, 0, EOS).unwrap();
        assert_eq!(hyps[0].tokens, vec![EOS]);
        assert!(hyps[0].content().is_empty());
        assert!(beam_search(&mut EosFirst, 0, 10, 0, EOS).is_err());
    }

    #[test]
    fn wider_beam_not_worse_on_exhaustive_case() {
        for seed in 0..10 {
            let mut m = PrefixModel { vocab: 4, seed, sharpness: 2.0 };
            let wide = beam_search(&mut m, 64, 3, 0, EOS).unwrap()[0].score();
            let narrow = beam_search(&mut m, 2, 3, 0, EOS).unwrap()[0].score();
            assert!(wide >= narrow);
        }
    }

    #[test]
    fn detokenize_resolves_extended_ids() {
        let vocab = Vocabulary::build([vec!["a".to_string(), "b".to_string()]], 20).unwrap();
        let (a, b) = (vocab.id("a"), vocab.id("b"));
        let v = vocab.len();
        assert_eq!(detokenize(&[a, b, EOS], &vocab, &[]).unwrap(), "a b");
        assert_eq!(detokenize(&[v], &vocab, &["zed".into()]).unwrap(), "zed");
        let ids = [b, v + 1, a, v];
        let oov = vec!["p".to_string(), "q".to_string()];
        let want: Vec<String> = ids
            .iter()
            .map(|&i| if i < v { vocab.token(i).unwrap().to_string() } else { oov[i - v].clone() })
            .collect();
        assert_eq!(detokenize(&ids, &vocab, &oov).unwrap(), want.join(" "));
        assert!(detokenize(&[v + 2], &vocab, &oov).is_err());
    }
}
