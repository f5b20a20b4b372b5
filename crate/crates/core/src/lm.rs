//! Causal Transformer language model: the same network that sits
//! inside the attention decoder as its internal LM, usable standalone
//! for training, fine-tuning, scoring, and perplexity.

use crate::error::{CoreError, Result};
use crate::nn::{
    cross_entropy_sum, Adam, Checkpoint, Embedding, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, load_into, positional_encoding,
};
use crate::rng::{derive_seed, seeded, Prng};
use crate::tensor::{AttnMask, Tape, Tensor};
use crate::tokenizer::{Vocab, EOS, SOS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerLmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TransformerLmConfig {
    pub fn desk_default(vocab_size: usize) -> TransformerLmConfig {
        TransformerLmConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            max_len: 128,
        }
    }

    pub fn to_config_entries(&self, vocab: &Vocab) -> Vec<(String, String)> {
        let mut c = vec![
            ("n_layers".to_string(), self.n_layers.to_string()),
            ("d_model".to_string(), self.d_model.to_string()),
            ("n_heads".to_string(), self.n_heads.to_string()),
            ("d_ff".to_string(), self.d_ff.to_string()),
            ("vocab_size".to_string(), self.vocab_size.to_string()),
            ("max_len".to_string(), self.max_len.to_string()),
        ];
        for (i, t) in vocab.tokens().iter().enumerate() {
            c.push((format!("vocab.{i}"), t.clone()));
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(TransformerLmConfig, Vocab)> {
        let cfg = TransformerLmConfig {
            n_layers: ckpt.config_usize("n_layers")?,
            d_model: ckpt.config_usize("d_model")?,
            n_heads: ckpt.config_usize("n_heads")?,
            d_ff: ckpt.config_usize("d_ff")?,
            vocab_size: ckpt.config_usize("vocab_size")?,
            max_len: ckpt.config_usize("max_len")?,
        };
        let mut tokens = Vec::with_capacity(cfg.vocab_size);
        for i in 0..cfg.vocab_size {
            let t = ckpt.config_value(&format!("vocab.{i}")).ok_or_else(|| {
                CoreError::Format(format!("checkpoint vocab entry {i} missing"))
            })?;
            tokens.push(t.to_string());
        }
        Ok((cfg, Vocab::from_tokens(tokens)?))
    }
}

struct LmBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl LmBlock {
    fn new(cfg: &TransformerLmConfig, rng: &mut Prng) -> Result<LmBlock> {
        Ok(LmBlock {
            ln1: LayerNorm::new(cfg.d_model),
            attn: MultiHeadAttention::new(cfg.d_model, cfg.n_heads, rng)?,
            ln2: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(cfg.d_model, cfg.d_ff, rng),
        })
    }

    /// Pre-norm residual block with causal self-attention only.
    fn forward(&self, tape: &Tape, x: &Tensor, mask: &AttnMask) -> Result<Tensor> {
        let h = self.ln1.forward(tape, x)?;
        let x = tape.add(x, &self.attn.forward(tape, &h, &h, Some(mask))?)?;
        let h = self.ln2.forward(tape, &x)?;
        tape.add(&x, &self.ff.forward(tape, &h)?)
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.ff.collect_params(&format!("{prefix}.ff"), out);
    }
}

/// Decoder-embeddable causal LM: embedding, N attention blocks without
/// cross-attention, final layer norm, and a projection to the vocab.
pub struct TransformerLM {
    pub config: TransformerLmConfig,
    pub vocab: Vocab,
    embed: Embedding,
    blocks: Vec<LmBlock>,
    final_ln: LayerNorm,
    head: Linear,
}

impl TransformerLM {
    pub fn new(config: TransformerLmConfig, vocab: Vocab, rng: &mut Prng) -> Result<TransformerLM> {
        if vocab.size() != config.vocab_size {
            return Err(CoreError::Config(format!(
                "config vocab_size {} vs vocabulary of {} tokens",
                config.vocab_size,
                vocab.size()
            )));
        }
        let embed = Embedding::new(config.vocab_size, config.d_model, rng);
        let blocks = (0..config.n_layers)
            .map(|_| LmBlock::new(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(config.d_model);
        let head = Linear::new(config.d_model, config.vocab_size, rng);
        Ok(TransformerLM {
            config,
            vocab,
            embed,
            blocks,
            final_ln,
            head,
        })
    }

    /// Logits over the vocab at every prefix position; causal, so row t
    /// depends only on ids[..=t].
    pub fn forward(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor> {
        if ids.first() != Some(&SOS) {
            return Err(CoreError::Data(
                "lm input must start with the sos token".into(),
            ));
        }
        if ids.len() > self.config.max_len {
            return Err(CoreError::Data(format!(
                "lm input length {} exceeds max {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let d = self.config.d_model;
        let x = self.embed.forward(tape, ids)?;
        let x = tape.scale(&x, (d as f64).sqrt())?;
        let mut x = tape.add(&x, &positional_encoding(ids.len(), d))?;
        let mask = AttnMask::causal(ids.len());
        for block in &self.blocks {
            x = block.forward(tape, &x, &mask)?;
        }
        self.head.forward(tape, &self.final_ln.forward(tape, &x)?)
    }

    /// Log-probabilities of every next token after the given prefix.
    pub fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let logits = self.forward(&tape, prefix)?;
        let last = tape.slice_rows(&logits, prefix.len() - 1, 1)?;
        Ok(tape.log_softmax(&last)?.to_vec())
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.embed.collect_params("embed", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("block.{i}"), &mut out);
        }
        self.final_ln.collect_params("final_ln", &mut out);
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn set_frozen(&self, frozen: bool) {
        for (_, t) in self.params() {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_kind: "lm".into(),
            config: self.config.to_config_entries(&self.vocab),
            tensors: self
                .params()
                .into_iter()
                .map(|(name, t)| (name, t.shape().to_vec(), t.to_vec()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TransformerLM> {
        if ckpt.model_kind != "lm" {
            return Err(CoreError::Format(format!(
                "expected an lm checkpoint, found model_kind {}",
                ckpt.model_kind
            )));
        }
        let (config, vocab) = TransformerLmConfig::from_checkpoint(ckpt)?;
        let model = TransformerLM::new(config, vocab, &mut seeded(0))?;
        load_into(&model.params(), ckpt)?;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct LmTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub label_smoothing: f64,
}

impl Default for LmTrainOptions {
    fn default() -> Self {
        LmTrainOptions {
            epochs: 10,
            lr: 1e-3,
            seed: 0,
            label_smoothing: 0.0,
        }
    }
}

fn check_corpus(corpus: &[Vec<usize>], cfg: &TransformerLmConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(CoreError::Data("lm corpus is empty".into()));
    }
    for (i, utt) in corpus.iter().enumerate() {
        if utt.len() + 1 > cfg.max_len {
            return Err(CoreError::Data(format!(
                "utterance {i} has {} tokens, max sequence length is {}",
                utt.len(),
                cfg.max_len
            )));
        }
    }
    Ok(())
}

/// One optimization pass over the corpus in the given order; returns
/// summed loss and predicted-token count.
fn lm_epoch(
    model: &TransformerLM,
    corpus: &[Vec<usize>],
    order: &[usize],
    opt: &mut Adam,
    label_smoothing: f64,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut tokens = 0;
    for &i in order {
        let utt = &corpus[i];
        let mut input = Vec::with_capacity(utt.len() + 1);
        input.push(SOS);
        input.extend_from_slice(utt);
        let mut targets = utt.clone();
        targets.push(EOS);

        let tape = Tape::new();
        let logits = model.forward(&tape, &input)?;
        let loss = cross_entropy_sum(&tape, &logits, &targets, label_smoothing)?;
        total += loss.item();
        tokens += targets.len();
        tape.backward(&loss)?;
        opt.step()?;
    }
    Ok((total, tokens))
}

fn shuffled(n: usize, rng: &mut Prng) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Train a fresh LM; returns the model and mean nats/token per epoch.
pub fn lm_train(
    corpus: &[Vec<usize>],
    config: TransformerLmConfig,
    vocab: Vocab,
    opts: &LmTrainOptions,
) -> Result<(TransformerLM, Vec<f64>)> {
    check_corpus(corpus, &config)?;
    let model = TransformerLM::new(config, vocab, &mut seeded(derive_seed(opts.seed, "lm-init")))?;
    let log = lm_optimize(&model, corpus, opts, "lm-order")?;
    Ok((model, log))
}

/// Continue training an existing LM on new text with a fresh optimizer
/// state; the architecture and vocabulary are unchanged.
pub fn lm_finetune(
    model: TransformerLM,
    corpus: &[Vec<usize>],
    vocab: &Vocab,
    opts: &LmTrainOptions,
) -> Result<(TransformerLM, Vec<f64>)> {
    if vocab.tokens() != model.vocab.tokens() {
        let hint = vocab
            .tokens()
            .iter()
            .zip(model.vocab.tokens())
            .position(|(a, b)| a != b)
            .map(|i| format!("first difference at id {i}"))
            .unwrap_or_else(|| "sizes differ".to_string());
        return Err(CoreError::Vocab(format!(
            "fine-tuning vocabulary does not match the model ({hint})"
        )));
    }
    check_corpus(corpus, &model.config)?;
    let log = lm_optimize(&model, corpus, opts, "lm-finetune-order")?;
    Ok((model, log))
}

fn lm_optimize(
    model: &TransformerLM,
    corpus: &[Vec<usize>],
    opts: &LmTrainOptions,
    order_tag: &str,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(model.param_tensors(), opts.lr);
    let mut order_rng = seeded(derive_seed(opts.seed, order_tag));
    let mut log = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        let order = shuffled(corpus.len(), &mut order_rng);
        let (total, tokens) = lm_epoch(model, corpus, &order, &mut opt, opts.label_smoothing)?;
        log.push(total / tokens as f64);
    }
    Ok(log)
}

/// exp(mean NLL per predicted token), eos included.
pub fn perplexity(model: &TransformerLM, corpus: &[Vec<usize>]) -> Result<f64> {
    check_corpus(corpus, &model.config)?;
    let mut total = 0.0;
    let mut tokens = 0;
    for utt in corpus {
        let mut input = Vec::with_capacity(utt.len() + 1);
        input.push(SOS);
        input.extend_from_slice(utt);
        let mut targets = utt.clone();
        targets.push(EOS);
        let tape = Tape::inference();
        let lp = tape.log_softmax(&model.forward(&tape, &input)?)?;
        for (t, &y) in targets.iter().enumerate() {
            total -= lp.at(t, y);
        }
        tokens += targets.len();
    }
    Ok((total / tokens as f64).exp())
}

/// Log-probability of `next` following `prefix` (which includes sos).
pub fn lm_score_prefix(model: &TransformerLM, prefix: &[usize], next: usize) -> Result<f64> {
    if next >= model.config.vocab_size {
        return Err(CoreError::Vocab(format!(
            "token {next} out of vocab {}",
            model.config.vocab_size
        )));
    }
    Ok(model.next_log_probs(prefix)?[next])
}
