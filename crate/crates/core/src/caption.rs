//! Caption vocabulary and the recurrent caption head.
//!
//! Each decoding step forms an attention query from the LSTM hidden state and
//! the event embedding, reads a context vector from the encoded frames with
//! deformable attention around the event's reference point, and feeds
//! `[word embedding, context, event]` to an LSTM cell whose hidden state is
//! projected to vocabulary logits. All boundaries of a video decode together
//! as rows of the same matrices.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamSet, Var};
use crate::error::{GebcError, Result};
use crate::nn::{DeformableAttention, Linear, LstmCell};
use crate::tensor::Mat;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<end>", "<unk>"];

/// Lowercases, turns punctuation into spaces and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ids after the four specials, ordered by descending count then
    /// lexicographically.
    pub fn build<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(GebcError::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for t in tokenize(c.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, n)| *n >= min_count.max(1))
            .collect();
        if ranked.is_empty() {
            return Err(GebcError::invalid("corpus has no tokens meeting min_count"));
        }
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(GebcError::invalid("vocabulary needs at least one token"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || SPECIALS.contains(&t.as_str()) {
                return Err(GebcError::invalid(format!("invalid vocabulary token `{t}`")));
            }
            if index.insert(t.clone(), i + SPECIALS.len()).is_some() {
                return Err(GebcError::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len() + SPECIALS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < SPECIALS.len() {
            Some(SPECIALS[id])
        } else {
            self.tokens.get(id - SPECIALS.len()).map(String::as_str)
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line `k` holds id `k + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

/// A target or generated word sequence. `terminated` says whether `<end>`
/// follows the tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub terminated: bool,
}

impl TokenSequence {
    /// Truncates to `max_len − 1` words so the `<end>` step fits within `max_len`.
    pub fn for_training(mut tokens: Vec<usize>, max_len: usize) -> Self {
        tokens.truncate(max_len.saturating_sub(1));
        TokenSequence {
            tokens,
            terminated: true,
        }
    }

    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.terminated)
    }
}

/// LSTM state for all rows being decoded.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
    pub step: usize,
}

/// A sampled caption with per-step log-probabilities of the chosen tokens
/// (including `<end>` when it was sampled).
#[derive(Clone, Debug, PartialEq)]
pub struct SampledCaption {
    pub sequence: TokenSequence,
    pub log_probs: Vec<f64>,
}

impl SampledCaption {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct CaptionHead {
    embedding: String,
    pub query: Linear,
    pub attn: DeformableAttention,
    pub lstm: LstmCell,
    pub logits: Linear,
    pub dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl CaptionHead {
    pub fn new(dim: usize, heads: usize, points: usize, vocab_size: usize, max_len: usize) -> Self {
        CaptionHead {
            embedding: "caption.embedding".into(),
            query: Linear::new("caption.query", 2 * dim, dim),
            attn: DeformableAttention::new("caption.attn", dim, heads, points),
            lstm: LstmCell::new("caption.lstm", 3 * dim, dim),
            logits: Linear::new("caption.logits", dim, vocab_size),
            dim,
            vocab_size,
            max_len,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        let a = (3.0 / self.dim as f64).sqrt();
        let data = (0..self.vocab_size * self.dim).map(|_| rng.gen_range(-a..a)).collect();
        ps.insert(&self.embedding, Mat::from_vec(self.vocab_size, self.dim, data).expect("sized"));
        self.query.init(ps, rng);
        self.attn.init(ps, rng);
        self.lstm.init(ps, rng);
        self.logits.init(ps, rng);
    }

    pub fn embedding_name(&self) -> &str {
        &self.embedding
    }

    pub fn initial_state(&self, g: &mut Graph, rows: usize) -> DecoderState {
        DecoderState {
            hidden: g.input(Mat::zeros(rows, self.dim)),
            cell: g.input(Mat::zeros(rows, self.dim)),
            step: 0,
        }
    }

    /// Attention context for the current state.
    pub fn context(&self, g: &mut Graph, state: &DecoderState, events: Var, encoded: Var, refs: &[f64]) -> Var {
        let q_in = g.concat_cols(&[state.hidden, events]);
        let q = self.query.forward(g, q_in);
        self.attn.forward(g, q, refs, encoded)
    }

    /// One decoding step for every row; returns the next state and `rows × V` logits.
    pub fn step(
        &self,
        g: &mut Graph,
        state: &DecoderState,
        prev_tokens: &[usize],
        events: Var,
        encoded: Var,
        refs: &[f64],
    ) -> Result<(DecoderState, Var)> {
        if state.step >= self.max_len {
            return Err(GebcError::invalid(format!(
                "decoder step {} exceeds maximum caption length {}",
                state.step, self.max_len
            )));
        }
        if let Some(&bad) = prev_tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(GebcError::invalid(format!("token id {bad} outside vocabulary")));
        }
        let ctx = self.context(g, state, events, encoded, refs);
        let table = g.param(&self.embedding);
        let words = g.gather_rows(table, prev_tokens);
        let x = g.concat_cols(&[words, ctx, events]);
        let (h, c) = self.lstm.forward(g, x, state.hidden, state.cell);
        let logits = self.logits.forward(g, h);
        Ok((
            DecoderState {
                hidden: h,
                cell: c,
                step: state.step + 1,
            },
            logits,
        ))
    }

    /// Runs teacher forcing over one sequence per row and returns the summed
    /// negative log-likelihood, the number of scored positions, and the
    /// per-step logits.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        events: Var,
        encoded: Var,
        refs: &[f64],
        targets: &[TokenSequence],
    ) -> Result<(Var, usize, Vec<Var>)> {
        let ones = vec![1.0; targets.len()];
        self.teacher_forced_weighted(g, events, encoded, refs, targets, &ones)
    }

    /// Teacher forcing with the NLL of row `r` scaled by `row_weights[r]`.
    pub fn teacher_forced_weighted(
        &self,
        g: &mut Graph,
        events: Var,
        encoded: Var,
        refs: &[f64],
        targets: &[TokenSequence],
        row_weights: &[f64],
    ) -> Result<(Var, usize, Vec<Var>)> {
        let rows = targets.len();
        if row_weights.len() != rows || g.value(events).rows() != rows {
            return Err(GebcError::shape(format!(
                "{rows} targets, {} weights, {} event rows",
                row_weights.len(),
                g.value(events).rows()
            )));
        }
        let steps = targets.iter().map(TokenSequence::steps).max().unwrap_or(0);
        if steps > self.max_len {
            return Err(GebcError::invalid(format!(
                "target needs {steps} steps, maximum is {}",
                self.max_len
            )));
        }
        let mut state = self.initial_state(g, rows);
        let mut prev = vec![BOS; rows];
        let mut losses = Vec::with_capacity(steps);
        let mut all_logits = Vec::with_capacity(steps);
        let mut count = 0;
        for t in 0..steps {
            let (next, logits) = self.step(g, &state, &prev, events, encoded, refs)?;
            let wanted: Vec<Option<usize>> = targets
                .iter()
                .map(|s| {
                    if t < s.tokens.len() {
                        Some(s.tokens[t])
                    } else if t == s.tokens.len() && s.terminated {
                        Some(END)
                    } else {
                        None
                    }
                })
                .collect();
            count += wanted.iter().flatten().count();
            losses.push(g.weighted_nll_sum(logits, &wanted, row_weights));
            all_logits.push(logits);
            prev = wanted.iter().map(|w| w.unwrap_or(PAD)).collect();
            state = next;
        }
        let total = if losses.is_empty() {
            g.input(Mat::scalar(0.0))
        } else {
            let stacked = g.concat_rows(&losses);
            g.sum(stacked)
        };
        Ok((total, count, all_logits))
    }

    /// Argmax decoding (ties go to the lowest id) until `<end>` or `max_len` words.
    pub fn greedy_decode(&self, g: &mut Graph, events: Var, encoded: Var, refs: &[f64]) -> Result<Vec<TokenSequence>> {
        self.decode_with(g, events, encoded, refs, |probs| argmax(probs))
    }

    /// Multinomial sampling at the given temperature; `temperature == 0`
    /// is argmax. Reported log-probabilities are under the untempered model
    /// distribution.
    pub fn sample_decode(
        &self,
        g: &mut Graph,
        events: Var,
        encoded: Var,
        refs: &[f64],
        rng: &mut impl Rng,
        temperature: f64,
    ) -> Result<Vec<SampledCaption>> {
        let rows = g.value(events).rows();
        let mut log_probs: Vec<Vec<f64>> = vec![Vec::new(); rows];
        let seqs = self.decode_with(g, events, encoded, refs, |logits| {
            let choice = if temperature <= 0.0 {
                argmax(logits)
            } else {
                let p = softmax(&logits.iter().map(|v| v / temperature).collect::<Vec<_>>());
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = p.len() - 1;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            choice
        })?;
        // Recompute log-probabilities from the untempered distribution along
        // the chosen path.
        let refs_owned = refs.to_vec();
        let mut state = self.initial_state(g, rows);
        let steps = seqs.iter().map(TokenSequence::steps).max().unwrap_or(0);
        let mut prev = vec![BOS; rows];
        for t in 0..steps {
            let (next, logits) = self.step(g, &state, &prev, events, encoded, &refs_owned)?;
            let lg = g.value(logits);
            for (r, s) in seqs.iter().enumerate() {
                let chosen = if t < s.tokens.len() {
                    Some(s.tokens[t])
                } else if t == s.tokens.len() && s.terminated {
                    Some(END)
                } else {
                    None
                };
                if let Some(c) = chosen {
                    log_probs[r].push(log_softmax_at(lg.row(r), c));
                }
                prev[r] = chosen.unwrap_or(PAD);
            }
            state = next;
        }
        Ok(seqs
            .into_iter()
            .zip(log_probs)
            .map(|(sequence, log_probs)| SampledCaption { sequence, log_probs })
            .collect())
    }

    fn decode_with(
        &self,
        g: &mut Graph,
        events: Var,
        encoded: Var,
        refs: &[f64],
        mut choose: impl FnMut(&[f64]) -> usize,
    ) -> Result<Vec<TokenSequence>> {
        let rows = g.value(events).rows();
        let mut out: Vec<TokenSequence> = (0..rows)
            .map(|_| TokenSequence {
                tokens: Vec::new(),
                terminated: false,
            })
            .collect();
        let mut done = vec![false; rows];
        let mut state = self.initial_state(g, rows);
        let mut prev = vec![BOS; rows];
        while state.step < self.max_len && done.iter().any(|d| !d) {
            let (next, logits) = self.step(g, &state, &prev, events, encoded, refs)?;
            let lg = g.value(logits).clone();
            if !lg.is_finite() {
                return Err(GebcError::NonFinite {
                    context: "caption logits".into(),
                });
            }
            for r in 0..rows {
                if done[r] {
                    prev[r] = PAD;
                    continue;
                }
                let tok = choose(lg.row(r));
                if tok == END {
                    out[r].terminated = true;
                    done[r] = true;
                    prev[r] = PAD;
                } else {
                    out[r].tokens.push(tok);
                    prev[r] = tok;
                }
            }
            state = next;
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax_at(values: &[f64], index: usize) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = values.iter().map(|v| (v - max).exp()).sum();
    values[index] - max - z.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenization() {
        assert_eq!(tokenize("A dog, runs!"), vec!["a", "dog", "runs"]);
        assert_eq!(tokenize("  The   man's hat "), vec!["the", "man", "s", "hat"]);
    }

    #[test]
    fn vocab_from_two_captions() {
        let v = Vocabulary::build(&["A dog runs.", "a dog sits"], 1).unwrap();
        assert_eq!(v.len(), 8);
        // a and dog appear twice; ties broken lexicographically
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("dog"), 5);
        assert_eq!(v.id("runs"), 6);
        assert_eq!(v.id("sits"), 7);
        assert_eq!(v.id("cat"), UNK);
        assert_eq!(v.decode(&v.encode("A dog sits")), "a dog sits");
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
        assert!(Vocabulary::build(&["..."], 1).is_err());
    }

    #[test]
    fn min_count_filters() {
        let v = Vocabulary::build(&["a b", "a c"], 2).unwrap();
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(&["the man in red jumps", "the woman sits"], 1).unwrap();
        let text = v.to_file_string();
        let back = Vocabulary::from_file_string(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(text.lines().next(), Some("the"));
        assert_eq!(v.id("the"), 4);
    }

    fn tiny_head(vocab: usize, max_len: usize) -> (CaptionHead, ParamSet) {
        let head = CaptionHead::new(4, 2, 2, vocab, max_len);
        let mut ps = ParamSet::new();
        head.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(9));
        (head, ps)
    }

    fn inputs(g: &mut Graph) -> (Var, Var) {
        let events = g.input(Mat::from_rows(&[vec![0.1, -0.2, 0.3, 0.5], vec![-0.4, 0.2, 0.0, 0.1]]).unwrap());
        let enc = g.input(Mat::from_rows(&[
            vec![0.2, 0.1, -0.1, 0.0],
            vec![0.3, -0.5, 0.2, 0.4],
            vec![-0.2, 0.6, 0.1, -0.3],
        ])
        .unwrap());
        (events, enc)
    }

    #[test]
    fn step_softmax_normalized_and_deterministic() {
        let (head, ps) = tiny_head(7, 5);
        let mut g = Graph::with_params(&ps);
        let (ev, enc) = inputs(&mut g);
        let s0 = head.initial_state(&mut g, 2);
        let (_, l1) = head.step(&mut g, &s0, &[BOS, BOS], ev, enc, &[0.3, 0.7]).unwrap();
        let (_, l2) = head.step(&mut g, &s0, &[BOS, BOS], ev, enc, &[0.3, 0.7]).unwrap();
        assert_eq!(g.value(l1), g.value(l2));
        for r in 0..2 {
            let s: f64 = softmax(g.value(l1).row(r)).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn step_past_max_len_errors() {
        let (head, ps) = tiny_head(7, 2);
        let mut g = Graph::with_params(&ps);
        let (ev, enc) = inputs(&mut g);
        let mut s = head.initial_state(&mut g, 2);
        s.step = 2;
        assert!(head.step(&mut g, &s, &[BOS, BOS], ev, enc, &[0.3, 0.7]).is_err());
    }

    #[test]
    fn rigged_end_gives_empty_caption() {
        let (head, mut ps) = tiny_head(7, 5);
        ps.insert(head.logits.weight_name(), Mat::zeros(4, 7));
        let mut bias = Mat::zeros(1, 7);
        bias.set(0, END, 5.0);
        ps.insert(head.logits.bias_name(), bias);
        let mut g = Graph::with_params(&ps);
        let (ev, enc) = inputs(&mut g);
        let out = head.greedy_decode(&mut g, ev, enc, &[0.3, 0.7]).unwrap();
        for s in out {
            assert!(s.tokens.is_empty() && s.terminated);
        }
    }

    #[test]
    fn greedy_is_length_bounded_and_repeatable() {
        let (head, mut ps) = tiny_head(7, 3);
        // never predict <end>
        let mut bias = Mat::zeros(1, 7);
        bias.set(0, END, -50.0);
        ps.insert(head.logits.bias_name(), bias);
        let run = || {
            let mut g = Graph::with_params(&ps);
            let (ev, enc) = inputs(&mut g);
            head.greedy_decode(&mut g, ev, enc, &[0.3, 0.7]).unwrap()
        };
        let a = run();
        assert!(a.iter().all(|s| s.tokens.len() == 3 && !s.terminated));
        assert_eq!(a, run());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0, 1.0]), 1);
    }

    #[test]
    fn sampling_properties() {
        let (head, ps) = tiny_head(9, 6);
        let run = |seed: u64, temp: f64| {
            let mut g = Graph::with_params(&ps);
            let (ev, enc) = inputs(&mut g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            head.sample_decode(&mut g, ev, enc, &[0.3, 0.7], &mut rng, temp).unwrap()
        };
        let a = run(5, 1.0);
        assert_eq!(a, run(5, 1.0));
        for s in &a {
            assert!(s.sequence.tokens.len() <= 6);
            assert_eq!(s.log_probs.len(), s.sequence.steps());
            assert!(s.log_probs.iter().all(|l| l.is_finite() && *l <= 0.0));
        }
        let greedy = {
            let mut g = Graph::with_params(&ps);
            let (ev, enc) = inputs(&mut g);
            head.greedy_decode(&mut g, ev, enc, &[0.3, 0.7]).unwrap()
        };
        let cold: Vec<TokenSequence> = run(11, 1e-4).into_iter().map(|s| s.sequence).collect();
        assert_eq!(cold, greedy);
    }

    #[test]
    fn teacher_forced_matches_sampled_log_probs() {
        let (head, ps) = tiny_head(9, 6);
        let mut g = Graph::with_params(&ps);
        let (ev, enc) = inputs(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples = head.sample_decode(&mut g, ev, enc, &[0.3, 0.7], &mut rng, 1.0).unwrap();
        let seqs: Vec<TokenSequence> = samples.iter().map(|s| s.sequence.clone()).collect();
        let (nll, count, _) = head.teacher_forced(&mut g, ev, enc, &[0.3, 0.7], &seqs).unwrap();
        let total: f64 = samples.iter().map(SampledCaption::total_log_prob).sum();
        assert_eq!(count, seqs.iter().map(TokenSequence::steps).sum::<usize>());
        assert!((g.value(nll).item() + total).abs() < 1e-10);
    }

    #[test]
    fn zero_offset_context_is_local() {
        let (head, ps) = tiny_head(7, 5);
        let ctx_for = |enc_rows: Vec<Vec<f64>>| {
            let mut g = Graph::with_params(&ps);
            let ev = g.input(Mat::from_rows(&[vec![0.1, -0.2, 0.3, 0.5]]).unwrap());
            let enc = g.input(Mat::from_rows(&enc_rows).unwrap());
            let s = head.initial_state(&mut g, 1);
            let c = head.context(&mut g, &s, ev, enc, &[0.3]);
            g.value(c).clone()
        };
        // L = 6: 0.3 · 5 = 1.5 reads rows 1 and 2 only.
        let base: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.1, 0.2, -0.1, 0.3]).collect();
        let mut far = base.clone();
        far[4] = vec![9.0, -9.0, 9.0, 9.0];
        far[0] = vec![-7.0, 7.0, 7.0, 7.0];
        assert_eq!(ctx_for(base.clone()), ctx_for(far));
        let mut near = base.clone();
        near[2] = vec![9.0, -9.0, 9.0, 9.0];
        assert_ne!(ctx_for(base), ctx_for(near));
    }
}
