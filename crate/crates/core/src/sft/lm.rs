use std::collections::{BTreeSet, HashMap};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};
use crate::{Error, Result};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<bos>", "<sep>", "<eos>"];

/// Previous tokens averaged into the context vector.
pub const CONTEXT_WINDOW: usize = 16;

/// Lowercases and splits on whitespace, with punctuation as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() && ch != '-' && ch != '\'' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Word vocabulary; ids 0..3 are the `<bos>`, `<sep>` and `<eos>` markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::schema("vocab", "must start with <bos>, <sep>, <eos>"));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::schema("vocab", "duplicate token"));
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Sorted vocabulary over every token in `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::from_words(words)
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::try_from(tokens).expect("specials first, duplicates skipped")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text).into_iter().map(|t| self.id(&t).ok_or(Error::OutOfVocab(t))).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.tokens.get(i).map(String::as_str)).collect::<Vec<_>>().join(" ")
    }
}

/// Mean-context categorical language model.
///
/// The next-token distribution is `softmax(W·c + b)` where `c` is the mean
/// embedding of the previous [`CONTEXT_WINDOW`] tokens of
/// `<bos> prompt <sep> target`. Parameters are flat: embeddings `V×d`, head
/// `d×V`, bias `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLM {
    vocab: Vocab,
    dim: usize,
    params: Vec<f64>,
}

impl TinyLM {
    pub fn new(vocab: Vocab, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("lm.dim", "must be positive"));
        }
        let v = vocab.len();
        let mut rng = rng::stream(seed, streams::INIT + 1);
        let normal = Normal::new(0.0, 0.1).expect("valid");
        let mut params = vec![0.0; Self::param_len(v, dim)];
        for p in &mut params[..2 * v * dim] {
            *p = normal.sample(&mut rng);
        }
        Ok(Self { vocab, dim, params })
    }

    pub fn from_params(vocab: Vocab, dim: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_len(vocab.len(), dim) {
            return Err(Error::schema("lm.params", "length does not match vocab and dim"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::schema("lm.params", "non-finite parameter"));
        }
        Ok(Self { vocab, dim, params })
    }

    fn param_len(v: usize, dim: usize) -> usize {
        2 * v * dim + v
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn head_offset(&self) -> usize {
        self.vocab.len() * self.dim
    }

    fn bias_offset(&self) -> usize {
        2 * self.vocab.len() * self.dim
    }

    fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.vocab.len()) {
            Some(i) => Err(Error::OutOfVocab(format!("token id {i}"))),
            None => Ok(()),
        }
    }

    fn context(&self, history: &[usize]) -> Vec<f64> {
        let window = &history[history.len().saturating_sub(CONTEXT_WINDOW)..];
        let mut c = vec![0.0; self.dim];
        for &tok in window {
            let e = &self.params[tok * self.dim..(tok + 1) * self.dim];
            c.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
        let n = window.len().max(1) as f64;
        c.iter_mut().for_each(|a| *a /= n);
        c
    }

    fn logits(&self, ctx: &[f64]) -> Vec<f64> {
        let v = self.vocab.len();
        let (w_at, b_at) = (self.head_offset(), self.bias_offset());
        let mut out = self.params[b_at..b_at + v].to_vec();
        for (k, &ck) in ctx.iter().enumerate() {
            let row = &self.params[w_at + k * v..w_at + (k + 1) * v];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += ck * w);
        }
        out
    }

    /// Next-token distribution after `history`.
    pub fn next_token_probs(&self, history: &[usize]) -> Vec<f64> {
        softmax(&self.logits(&self.context(history)))
    }

    fn history(prompt: &[usize]) -> Vec<usize> {
        let mut h = Vec::with_capacity(prompt.len() + 2);
        h.push(BOS);
        h.extend_from_slice(prompt);
        h.push(SEP);
        h
    }

    /// Sum of target-token log-probabilities given the prompt.
    pub fn log_likelihood(&self, prompt: &[usize], target: &[usize]) -> Result<f64> {
        self.check(prompt)?;
        self.check(target)?;
        let mut history = Self::history(prompt);
        let mut total = 0.0;
        for &tok in target {
            total += self.next_token_probs(&history)[tok].ln();
            history.push(tok);
        }
        Ok(total)
    }

    /// Mean next-token cross-entropy over the target positions.
    pub fn ce_loss(&self, prompt: &[usize], target: &[usize]) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        Ok(-self.log_likelihood(prompt, target)? / target.len() as f64)
    }

    /// Cross-entropy as in [`TinyLM::ce_loss`]; accumulates `scale · ∇loss`.
    pub fn ce_loss_grad(&self, prompt: &[usize], target: &[usize], scale: f64, grad: &mut [f64]) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target".into()));
        }
        self.check(prompt)?;
        self.check(target)?;
        debug_assert_eq!(grad.len(), self.params.len());
        let v = self.vocab.len();
        let d = self.dim;
        let (w_at, b_at) = (self.head_offset(), self.bias_offset());
        let per_pos = scale / target.len() as f64;
        let mut history = Self::history(prompt);
        let mut loss = 0.0;
        for &tok in target {
            let ctx = self.context(&history);
            let mut dlogits = softmax(&self.logits(&ctx));
            loss -= dlogits[tok].ln();
            dlogits[tok] -= 1.0;
            dlogits.iter_mut().for_each(|g| *g *= per_pos);
            let mut dctx = vec![0.0; d];
            for k in 0..d {
                let row = w_at + k * v;
                let mut acc = 0.0;
                for j in 0..v {
                    grad[row + j] += ctx[k] * dlogits[j];
                    acc += self.params[row + j] * dlogits[j];
                }
                dctx[k] = acc;
            }
            grad[b_at..b_at + v].iter_mut().zip(&dlogits).for_each(|(g, dl)| *g += dl);
            let window = &history[history.len().saturating_sub(CONTEXT_WINDOW)..];
            let n = window.len() as f64;
            for &t in window {
                grad[t * d..(t + 1) * d].iter_mut().zip(&dctx).for_each(|(g, dc)| *g += dc / n);
            }
            history.push(tok);
        }
        Ok(loss / target.len() as f64)
    }

    /// Greedy decoding until `<eos>` or `max_tokens`.
    pub fn generate(&self, prompt: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
        self.check(prompt)?;
        let mut history = Self::history(prompt);
        let mut out = Vec::new();
        for _ in 0..max_tokens {
            let probs = self.next_token_probs(&history);
            let tok = argmax(&probs);
            if tok == EOS {
                break;
            }
            out.push(tok);
            history.push(tok);
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab4() -> Vocab {
        Vocab::from_words(["hi".to_string()])
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Hello, World! i'm char-0001."), ["hello", ",", "world", "!", "i'm", "char-0001", "."]);
    }

    #[test]
    fn uniform_head_gives_log_vocab() {
        let lm = TinyLM::from_params(vocab4(), 3, vec![0.0; 2 * 4 * 3 + 4]).unwrap();
        let loss = lm.ce_loss(&[3], &[3, EOS]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn one_hot_head_gives_zero_loss() {
        let mut lm = TinyLM::from_params(vocab4(), 1, vec![0.0; 2 * 4 + 4]).unwrap();
        let b = lm.bias_offset();
        lm.params_mut()[b + 3] = 50.0;
        assert!(lm.ce_loss(&[], &[3, 3, 3]).unwrap() < 1e-6);
    }

    #[test]
    fn distributions_sum_to_one() {
        let vocab = Vocab::build(["the quick brown fox jumps over the lazy dog ."]);
        let lm = TinyLM::new(vocab, 8, 1).unwrap();
        let ids = lm.vocab().encode("the lazy fox").unwrap();
        for n in 0..ids.len() {
            let p = lm.next_token_probs(&ids[..n]);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_vocab_is_an_error() {
        let lm = TinyLM::new(vocab4(), 2, 0).unwrap();
        assert!(matches!(lm.vocab().encode("hello"), Err(Error::OutOfVocab(_))));
        assert!(matches!(lm.ce_loss(&[], &[9]), Err(Error::OutOfVocab(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vocab = Vocab::build(["a b c d e ."]);
        let mut lm = TinyLM::new(vocab, 3, 2).unwrap();
        for (i, p) in lm.params_mut().iter_mut().enumerate() {
            *p += 0.01 * (i % 5) as f64;
        }
        let prompt = lm.vocab().encode("a b").unwrap();
        let mut target = lm.vocab().encode("c d .").unwrap();
        target.push(EOS);
        let mut grad = vec![0.0; lm.params().len()];
        lm.ce_loss_grad(&prompt, &target, 1.0, &mut grad).unwrap();
        let h = 1e-6;
        for i in 0..grad.len() {
            let mut plus = lm.clone();
            plus.params_mut()[i] += h;
            let mut minus = lm.clone();
            minus.params_mut()[i] -= h;
            let fd = (plus.ce_loss(&prompt, &target).unwrap() - minus.ce_loss(&prompt, &target).unwrap()) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn vocab_serializes_as_token_list() {
        let v = Vocab::build(["x y"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["<bos>","<sep>","<eos>","x","y"]"#);
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"["x"]"#).is_err());
    }
}
