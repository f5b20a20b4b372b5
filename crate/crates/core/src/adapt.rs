//! Domain-prior adaptation for CTC outputs: smoothed token-frequency
//! priors, target/source prior ratios, and the residual softmax that
//! reweights every non-blank token while keeping the blank probability
//! equal to the plain softmax value.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tokenizer::{Vocab, BLANK, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Raw token counts over the non-blank vocabulary: entry `i` belongs
/// to token id `i + 1`. Blank has no entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCounts {
    counts: Vec<u64>,
    total: u64,
}

impl TokenCounts {
    pub fn from_counts(counts: Vec<u64>) -> Result<TokenCounts> {
        if counts.is_empty() {
            return Err(CoreError::Data("token counts need a non-empty vocabulary".into()));
        }
        let total = counts.iter().sum();
        Ok(TokenCounts { counts, total })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Non-blank vocabulary size.
    pub fn vocab_nonblank(&self) -> usize {
        self.counts.len()
    }

    pub fn n_zero(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0).count()
    }
}

/// Count token occurrences over tokenized utterances. Blank never
/// appears in text; eos is optionally counted once per utterance.
pub fn count_tokens(corpus: &[Vec<usize>], vocab: &Vocab, count_eos: bool) -> Result<TokenCounts> {
    if corpus.is_empty() {
        return Err(CoreError::Data("token-count corpus is empty".into()));
    }
    let mut counts = vec![0u64; vocab.size() - 1];
    for utt in corpus {
        for &id in utt {
            if id == BLANK {
                return Err(CoreError::Data("corpus token stream contains blank".into()));
            }
            if id >= vocab.size() {
                return Err(CoreError::Vocab(format!(
                    "token id {id} out of vocab {}",
                    vocab.size()
                )));
            }
            counts[id - 1] += 1;
        }
        if count_eos {
            counts[EOS - 1] += 1;
        }
    }
    TokenCounts::from_counts(counts)
}

/// Smoothed unigram prior over the non-blank vocabulary.
#[derive(Debug, Clone)]
pub struct SmoothedPrior {
    pub domain: Domain,
    p: Vec<f64>,
}

impl SmoothedPrior {
    pub fn probs(&self) -> &[f64] {
        &self.p
    }
}

/// Seen tokens give up I/((V - n0) * C) of their relative frequency;
/// unseen tokens share it as I/(n0 * C), with I = 1 iff n0 > 0. The
/// one integer corner where a seen token would reach zero (C = 1 with
/// unseen tokens) falls back to the uniform prior.
pub fn smooth(counts: &TokenCounts, domain: Domain) -> Result<SmoothedPrior> {
    let c = counts.total();
    if c == 0 {
        return Err(CoreError::Data("cannot smooth a zero-total count vector".into()));
    }
    let c = c as f64;
    let v = counts.vocab_nonblank();
    let n0 = counts.n_zero();
    let p: Vec<f64> = if n0 == 0 {
        counts.counts().iter().map(|&ci| ci as f64 / c).collect()
    } else {
        let seen_cut = 1.0 / ((v - n0) as f64 * c);
        let unseen = 1.0 / (n0 as f64 * c);
        counts
            .counts()
            .iter()
            .map(|&ci| {
                if ci == 0 {
                    unseen
                } else {
                    ci as f64 / c - seen_cut
                }
            })
            .collect()
    };
    let p = if p.iter().any(|&x| x <= 0.0) {
        vec![1.0 / v as f64; v]
    } else {
        p
    };
    Ok(SmoothedPrior { domain, p })
}

/// Per-token weights w_i = p_i^target / p_i^source over non-blank ids.
#[derive(Debug, Clone)]
pub struct PriorRatio {
    w: Vec<f64>,
    log_w: Vec<f64>,
}

impl PriorRatio {
    pub fn from_weights(w: Vec<f64>) -> Result<PriorRatio> {
        if w.is_empty() {
            return Err(CoreError::Data("prior ratio needs a non-empty vocabulary".into()));
        }
        if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x <= 0.0) {
            return Err(CoreError::Data(format!(
                "prior-ratio weights must be finite and positive, got {bad}"
            )));
        }
        let log_w = w.iter().map(|x| x.ln()).collect();
        Ok(PriorRatio { w, log_w })
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

pub fn prior_ratio(target: &SmoothedPrior, source: &SmoothedPrior) -> Result<PriorRatio> {
    if target.p.len() != source.p.len() {
        return Err(CoreError::Vocab(format!(
            "prior vocab sizes differ: target {} vs source {}",
            target.p.len(),
            source.p.len()
        )));
    }
    PriorRatio::from_weights(
        target
            .p
            .iter()
            .zip(&source.p)
            .map(|(t, s)| t / s)
            .collect(),
    )
}

fn check_frame(frame: &[f64], ratio: &PriorRatio) -> Result<()> {
    if frame.len() != ratio.len() + 1 {
        return Err(CoreError::ShapeMismatch(format!(
            "logit frame of {} entries vs ratio over {} non-blank tokens",
            frame.len(),
            ratio.len()
        )));
    }
    Ok(())
}

/// Per-frame blank weight: the softmax-weighted mean of the non-blank
/// ratio weights, k = sum_i w_i exp(l_i) / sum_i exp(l_i).
pub fn blank_weight(frame: &[f64], ratio: &PriorRatio) -> Result<f64> {
    check_frame(frame, ratio)?;
    let m = frame[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    let mut sw = 0.0;
    for (i, &l) in frame[1..].iter().enumerate() {
        let e = (l - m).exp();
        s += e;
        sw += ratio.w[i] * e;
    }
    Ok(sw / s)
}

/// Residual softmax in log space: log w_i shifts each non-blank logit
/// and log k shifts the blank logit, then a plain log-softmax.
pub fn r_log_softmax(frame: &[f64], ratio: &PriorRatio) -> Result<Vec<f64>> {
    let k = blank_weight(frame, ratio)?;
    let mut a = Vec::with_capacity(frame.len());
    a.push(frame[BLANK] + k.ln());
    for (i, &l) in frame[1..].iter().enumerate() {
        a.push(l + ratio.log_w[i]);
    }
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + a.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(a.into_iter().map(|x| x - lse).collect())
}

/// phi_j = exp(l_j) u_j / sum_i exp(l_i) u_i with u_blank = k and
/// u_j = w_j otherwise. Blank keeps its plain softmax probability.
pub fn r_softmax(frame: &[f64], ratio: &PriorRatio) -> Result<Vec<f64>> {
    Ok(r_log_softmax(frame, ratio)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// One `token<TAB>count` line per non-blank token, in id order.
pub fn save_freq_table(path: impl AsRef<Path>, counts: &TokenCounts, vocab: &Vocab) -> Result<()> {
    if counts.vocab_nonblank() != vocab.size() - 1 {
        return Err(CoreError::Vocab(format!(
            "counts cover {} tokens, vocab has {} non-blank",
            counts.vocab_nonblank(),
            vocab.size() - 1
        )));
    }
    let mut out = String::new();
    for (i, c) in counts.counts().iter().enumerate() {
        out.push_str(&format!("{}\t{}\n", vocab.token(i + 1)?, c));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Tokens absent from the file count zero; unknown or duplicate
/// tokens and a listed blank are rejected.
pub fn load_freq_table(path: impl AsRef<Path>, vocab: &Vocab) -> Result<TokenCounts> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut seen: HashMap<usize, u64> = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (token, count) = line.split_once('\t').ok_or_else(|| {
            CoreError::Format(format!("frequency table line {}: expected token<TAB>count", ln + 1))
        })?;
        let id = vocab.id(token).ok_or_else(|| {
            CoreError::Vocab(format!("frequency table line {}: unknown token {token:?}", ln + 1))
        })?;
        if id == BLANK {
            return Err(CoreError::Data(format!(
                "frequency table line {}: blank has no count entry",
                ln + 1
            )));
        }
        let count: u64 = count.parse().map_err(|_| {
            CoreError::Format(format!("frequency table line {}: bad count {count:?}", ln + 1))
        })?;
        if seen.insert(id, count).is_some() {
            return Err(CoreError::Format(format!(
                "frequency table line {}: duplicate token {token:?}",
                ln + 1
            )));
        }
    }
    let counts = (1..vocab.size())
        .map(|id| seen.get(&id).copied().unwrap_or(0))
        .collect();
    TokenCounts::from_counts(counts)
}

/// One `token<TAB>probability` line per non-blank token, in id order.
pub fn save_prior_table(
    path: impl AsRef<Path>,
    prior: &SmoothedPrior,
    vocab: &Vocab,
) -> Result<()> {
    if prior.p.len() != vocab.size() - 1 {
        return Err(CoreError::Vocab(format!(
            "prior covers {} tokens, vocab has {} non-blank",
            prior.p.len(),
            vocab.size() - 1
        )));
    }
    let mut out = String::new();
    for (i, p) in prior.p.iter().enumerate() {
        out.push_str(&format!("{}\t{}\n", vocab.token(i + 1)?, p));
    }
    std::fs::write(path, out)?;
    Ok(())
}
