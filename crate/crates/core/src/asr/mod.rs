//! Hybrid CTC/attention ASR model with a replaceable internal LM.
//! The decoder first runs a causal LM over the token prefix (logits_L),
//! bridges its predicted distribution into cross-attention layers over
//! the encoder states (logits_A), and combines them on a highway:
//! logits = logits_A + beta * logits_L.

mod ctc;
mod swap;

pub use ctc::ctc_loss;
pub(crate) use ctc::lse2;
pub use swap::{replace_internal_lm, replace_internal_lm_ckpt};

use crate::error::{CoreError, Result};
use crate::lm::{TransformerLM, TransformerLmConfig};
use crate::nn::{
    cross_entropy_sum, load_into, positional_encoding, Adam, Checkpoint, FeedForward, LayerNorm,
    Linear, MultiHeadAttention,
};
use crate::rng::{derive_seed, seeded, Prng};
use crate::tensor::{AttnMask, Tape, Tensor};
use crate::tokenizer::{Vocab, EOS, SOS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub feat_dim: usize,
    pub stack: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeInput {
    Prob,
    Logit,
}

impl BridgeInput {
    pub fn as_str(&self) -> &'static str {
        match self {
            BridgeInput::Prob => "prob",
            BridgeInput::Logit => "logit",
        }
    }

    pub fn parse(s: &str) -> Result<BridgeInput> {
        match s {
            "prob" => Ok(BridgeInput::Prob),
            "logit" => Ok(BridgeInput::Logit),
            _ => Err(CoreError::Config(format!(
                "bridge_input must be prob or logit, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RilmDecoderConfig {
    pub n_ilm_layers: usize,
    pub m_cross_layers: usize,
    pub beta: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub bridge_input: BridgeInput,
}

impl RilmDecoderConfig {
    /// The internal LM is structurally a standalone causal LM.
    pub fn ilm_config(&self) -> TransformerLmConfig {
        TransformerLmConfig {
            n_layers: self.n_ilm_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_ilm_layers < 1 || self.m_cross_layers < 1 {
            return Err(CoreError::Config(format!(
                "decoder needs n_ilm_layers >= 1 and m_cross_layers >= 1, got {} and {}",
                self.n_ilm_layers, self.m_cross_layers
            )));
        }
        if self.beta < 0.0 {
            return Err(CoreError::Config(format!(
                "highway weight beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrConfig {
    pub encoder: EncoderConfig,
    pub decoder: RilmDecoderConfig,
}

impl AsrConfig {
    pub fn desk_default(feat_dim: usize, vocab_size: usize) -> AsrConfig {
        AsrConfig {
            encoder: EncoderConfig {
                feat_dim,
                stack: 2,
                n_layers: 2,
                d_model: 64,
                n_heads: 4,
                d_ff: 128,
            },
            decoder: RilmDecoderConfig {
                n_ilm_layers: 2,
                m_cross_layers: 2,
                beta: 0.3,
                d_model: 64,
                n_heads: 4,
                d_ff: 128,
                vocab_size,
                max_len: 128,
                bridge_input: BridgeInput::Prob,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.encoder.stack == 0 {
            return Err(CoreError::Config("frame-stacking factor must be >= 1".into()));
        }
        if self.encoder.d_model != self.decoder.d_model {
            return Err(CoreError::Config(format!(
                "encoder d_model {} must equal decoder d_model {} for cross-attention",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        Ok(())
    }

    pub fn to_config_entries(&self, vocab: &Vocab) -> Vec<(String, String)> {
        let e = &self.encoder;
        let d = &self.decoder;
        let mut c = vec![
            ("encoder.feat_dim".to_string(), e.feat_dim.to_string()),
            ("encoder.stack".to_string(), e.stack.to_string()),
            ("encoder.n_layers".to_string(), e.n_layers.to_string()),
            ("encoder.d_model".to_string(), e.d_model.to_string()),
            ("encoder.n_heads".to_string(), e.n_heads.to_string()),
            ("encoder.d_ff".to_string(), e.d_ff.to_string()),
            ("decoder.n_ilm_layers".to_string(), d.n_ilm_layers.to_string()),
            ("decoder.m_cross_layers".to_string(), d.m_cross_layers.to_string()),
            ("decoder.beta".to_string(), d.beta.to_string()),
            ("decoder.d_model".to_string(), d.d_model.to_string()),
            ("decoder.n_heads".to_string(), d.n_heads.to_string()),
            ("decoder.d_ff".to_string(), d.d_ff.to_string()),
            ("decoder.bridge_input".to_string(), d.bridge_input.as_str().to_string()),
            ("vocab_size".to_string(), d.vocab_size.to_string()),
            ("max_len".to_string(), d.max_len.to_string()),
        ];
        for (i, t) in vocab.tokens().iter().enumerate() {
            c.push((format!("vocab.{i}"), t.clone()));
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(AsrConfig, Vocab)> {
        let vocab_size = ckpt.config_usize("vocab_size")?;
        let cfg = AsrConfig {
            encoder: EncoderConfig {
                feat_dim: ckpt.config_usize("encoder.feat_dim")?,
                stack: ckpt.config_usize("encoder.stack")?,
                n_layers: ckpt.config_usize("encoder.n_layers")?,
                d_model: ckpt.config_usize("encoder.d_model")?,
                n_heads: ckpt.config_usize("encoder.n_heads")?,
                d_ff: ckpt.config_usize("encoder.d_ff")?,
            },
            decoder: RilmDecoderConfig {
                n_ilm_layers: ckpt.config_usize("decoder.n_ilm_layers")?,
                m_cross_layers: ckpt.config_usize("decoder.m_cross_layers")?,
                beta: ckpt.config_f64("decoder.beta")?,
                d_model: ckpt.config_usize("decoder.d_model")?,
                n_heads: ckpt.config_usize("decoder.n_heads")?,
                d_ff: ckpt.config_usize("decoder.d_ff")?,
                vocab_size,
                max_len: ckpt.config_usize("max_len")?,
                bridge_input: BridgeInput::parse(
                    ckpt.config_value("decoder.bridge_input").ok_or_else(|| {
                        CoreError::Format("checkpoint config missing key decoder.bridge_input".into())
                    })?,
                )?,
            },
        };
        let mut tokens = Vec::with_capacity(vocab_size);
        for i in 0..vocab_size {
            tokens.push(
                ckpt.config_value(&format!("vocab.{i}"))
                    .ok_or_else(|| CoreError::Format(format!("checkpoint vocab entry {i} missing")))?
                    .to_string(),
            );
        }
        Ok((cfg, Vocab::from_tokens(tokens)?))
    }
}

/// Concatenate each group of `stack` frames; the tail group is
/// zero-padded. Pure data movement, so features carry no gradient.
fn stack_frames(feats: &Tensor, stack: usize) -> Tensor {
    let (t, dim) = (feats.shape()[0], feats.shape()[1]);
    let out_t = t.div_ceil(stack);
    let fd = feats.data();
    let mut data = vec![0.0; out_t * dim * stack];
    for ot in 0..out_t {
        for s in 0..stack {
            let src = ot * stack + s;
            if src < t {
                data[ot * dim * stack + s * dim..ot * dim * stack + (s + 1) * dim]
                    .copy_from_slice(&fd[src * dim..(src + 1) * dim]);
            }
        }
    }
    Tensor::from_vec(vec![out_t, dim * stack], data).expect("stacked frames")
}

struct EncBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncBlock {
    fn new(cfg: &EncoderConfig, rng: &mut Prng) -> Result<EncBlock> {
        Ok(EncBlock {
            ln1: LayerNorm::new(cfg.d_model),
            attn: MultiHeadAttention::new(cfg.d_model, cfg.n_heads, rng)?,
            ln2: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(cfg.d_model, cfg.d_ff, rng),
        })
    }

    /// Pre-norm residual block; frames attend bidirectionally.
    fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(tape, x)?;
        let x = tape.add(x, &self.attn.forward(tape, &h, &h, None)?)?;
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

/// Transformer encoder over stacked feature frames.
pub struct Encoder {
    pub config: EncoderConfig,
    proj: Linear,
    blocks: Vec<EncBlock>,
    final_ln: LayerNorm,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Prng) -> Result<Encoder> {
        let proj = Linear::new(config.feat_dim * config.stack, config.d_model, rng);
        let blocks = (0..config.n_layers)
            .map(|_| EncBlock::new(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(config.d_model);
        Ok(Encoder {
            config,
            proj,
            blocks,
            final_ln,
        })
    }

    /// `[T, feat_dim]` features to `[ceil(T/stack), d_model]` states.
    /// A zero-layer encoder is the bare projection of stacked frames.
    pub fn forward(&self, tape: &Tape, feats: &Tensor) -> Result<Tensor> {
        match feats.shape() {
            [t, d] if *d == self.config.feat_dim && *t > 0 => {}
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "encoder features {s:?}, expected [T >= 1, {}]",
                    self.config.feat_dim
                )))
            }
        }
        let stacked = stack_frames(feats, self.config.stack);
        let mut x = self.proj.forward(tape, &stacked)?;
        if self.blocks.is_empty() {
            return Ok(x);
        }
        x = tape.add(&x, &positional_encoding(x.shape()[0], self.config.d_model))?;
        for b in &self.blocks {
            x = b.forward(tape, &x)?;
        }
        self.final_ln.forward(tape, &x)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj.collect_params(&format!("{prefix}.proj"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block.{i}"), out);
        }
        self.final_ln.collect_params(&format!("{prefix}.final_ln"), out);
    }
}

struct CrossBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl CrossBlock {
    fn new(cfg: &RilmDecoderConfig, rng: &mut Prng) -> Result<CrossBlock> {
        Ok(CrossBlock {
            ln1: LayerNorm::new(cfg.d_model),
            self_attn: MultiHeadAttention::new(cfg.d_model, cfg.n_heads, rng)?,
            ln2: LayerNorm::new(cfg.d_model),
            cross_attn: MultiHeadAttention::new(cfg.d_model, cfg.n_heads, rng)?,
            ln3: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(cfg.d_model, cfg.d_ff, rng),
        })
    }

    fn forward(&self, tape: &Tape, x: &Tensor, enc: &Tensor, mask: &AttnMask) -> Result<Tensor> {
        let h = self.ln1.forward(tape, x)?;
        let x = tape.add(x, &self.self_attn.forward(tape, &h, &h, Some(mask))?)?;
        let h = self.ln2.forward(tape, &x)?;
        let x = tape.add(&x, &self.cross_attn.forward(tape, &h, enc, None)?)?;
        let h = self.ln3.forward(tape, &x)?;
        tape.add(&x, &self.ff.forward(tape, &h)?)
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.self_attn.collect_params(&format!("{prefix}.self_attn"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.cross_attn.collect_params(&format!("{prefix}.cross_attn"), out);
        self.ln3.collect_params(&format!("{prefix}.ln3"), out);
        self.ff.collect_params(&format!("{prefix}.ff"), out);
    }
}

/// Decoder logits split into the two highway terms.
pub struct DecoderLogits {
    pub combined: Tensor,
    pub attention: Tensor,
    pub internal_lm: Tensor,
}

/// Attention decoder whose first stage is a self-contained causal LM.
pub struct RilmDecoder {
    pub config: RilmDecoderConfig,
    pub ilm: TransformerLM,
    bridge: Linear,
    cross_blocks: Vec<CrossBlock>,
    out_ln: LayerNorm,
    head: Linear,
}

impl RilmDecoder {
    pub fn new(config: RilmDecoderConfig, vocab: Vocab, rng: &mut Prng) -> Result<RilmDecoder> {
        config.validate()?;
        let ilm = TransformerLM::new(config.ilm_config(), vocab, rng)?;
        let bridge = Linear::new(config.vocab_size, config.d_model, rng);
        let cross_blocks = (0..config.m_cross_layers)
            .map(|_| CrossBlock::new(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        let out_ln = LayerNorm::new(config.d_model);
        let head = Linear::new(config.d_model, config.vocab_size, rng);
        Ok(RilmDecoder {
            config,
            ilm,
            bridge,
            cross_blocks,
            out_ln,
            head,
        })
    }

    /// Internal LM over the prefix, bridge FC on its predicted
    /// distribution, M cross-attention layers over encoder states, and
    /// the highway combination logits_A + beta * logits_L.
    pub fn forward(&self, tape: &Tape, prefix: &[usize], enc: &Tensor) -> Result<DecoderLogits> {
        match enc.shape() {
            [t, d] if *d == self.config.d_model && *t > 0 => {}
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "encoder states {s:?}, expected [T >= 1, {}]",
                    self.config.d_model
                )))
            }
        }
        let logits_l = self.ilm.forward(tape, prefix)?;
        let bridge_in = match self.config.bridge_input {
            BridgeInput::Prob => tape.softmax(&logits_l)?,
            BridgeInput::Logit => logits_l.clone(),
        };
        let mut x = self.bridge.forward(tape, &bridge_in)?;
        let mask = AttnMask::causal(prefix.len());
        for b in &self.cross_blocks {
            x = b.forward(tape, &x, enc, &mask)?;
        }
        let logits_a = self.head.forward(tape, &self.out_ln.forward(tape, &x)?)?;
        // beta = 0 must reproduce logits_A bit-for-bit, so skip the add
        let combined = if self.config.beta == 0.0 {
            logits_a.clone()
        } else {
            tape.add(&logits_a, &tape.scale(&logits_l, self.config.beta)?)?
        };
        Ok(DecoderLogits {
            combined,
            attention: logits_a,
            internal_lm: logits_l,
        })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in self.ilm.params() {
            out.push((format!("{prefix}.ilm.{name}"), t));
        }
        self.bridge.collect_params(&format!("{prefix}.bridge"), out);
        for (i, b) in self.cross_blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.cross.{i}"), out);
        }
        self.out_ln.collect_params(&format!("{prefix}.out_ln"), out);
        self.head.collect_params(&format!("{prefix}.head"), out);
    }
}

/// Encoder + CTC head + RILM decoder.
pub struct AsrModel {
    pub config: AsrConfig,
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub ctc_head: Linear,
    pub decoder: RilmDecoder,
}

impl AsrModel {
    pub fn new(config: AsrConfig, vocab: Vocab, rng: &mut Prng) -> Result<AsrModel> {
        config.validate()?;
        if vocab.size() != config.decoder.vocab_size {
            return Err(CoreError::Config(format!(
                "config vocab_size {} vs vocabulary of {} tokens",
                config.decoder.vocab_size,
                vocab.size()
            )));
        }
        let encoder = Encoder::new(config.encoder.clone(), rng)?;
        let ctc_head = Linear::new(config.encoder.d_model, config.decoder.vocab_size, rng);
        let decoder = RilmDecoder::new(config.decoder.clone(), vocab.clone(), rng)?;
        Ok(AsrModel {
            config,
            vocab,
            encoder,
            ctc_head,
            decoder,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect_params("encoder", &mut out);
        self.ctc_head.collect_params("ctc_head", &mut out);
        self.decoder.collect_params("decoder", &mut out);
        out
    }

    /// CTC logits over the encoder states for an utterance.
    pub fn ctc_logits(&self, tape: &Tape, feats: &Tensor) -> Result<Tensor> {
        let enc = self.encoder.forward(tape, feats)?;
        self.ctc_head.forward(tape, &enc)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_kind: "asr".into(),
            config: self.config.to_config_entries(&self.vocab),
            tensors: self
                .params()
                .into_iter()
                .map(|(name, t)| (name, t.shape().to_vec(), t.to_vec()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<AsrModel> {
        if ckpt.model_kind != "asr" {
            return Err(CoreError::Format(format!(
                "expected an asr checkpoint, found model_kind {}",
                ckpt.model_kind
            )));
        }
        let (config, vocab) = AsrConfig::from_checkpoint(ckpt)?;
        let model = AsrModel::new(config, vocab, &mut seeded(0))?;
        load_into(&model.params(), ckpt)?;
        Ok(model)
    }

    /// Overwrite the decoder's internal LM with a pretrained LM
    /// checkpoint; configs and vocabularies must match exactly.
    pub fn init_ilm_from(&self, lm_ckpt: &Checkpoint) -> Result<()> {
        swap::check_ilm_compat(
            &self.config.decoder.ilm_config(),
            self.vocab.tokens(),
            lm_ckpt,
        )?;
        load_into(&self.ilm_params_bare(), lm_ckpt)
    }

    fn ilm_params_bare(&self) -> Vec<(String, Tensor)> {
        self.decoder.ilm.params()
    }
}

#[derive(Debug, Clone)]
pub struct AsrExample {
    pub id: String,
    pub feats: Tensor,
    pub tokens: Vec<usize>,
}

/// Joint loss: ctc_weight * L_CTC + (1 - ctc_weight) * L_CE. The
/// degenerate weights skip the unused branch entirely.
pub fn hybrid_loss(
    model: &AsrModel,
    tape: &Tape,
    feats: &Tensor,
    tokens: &[usize],
    ctc_weight: f64,
    label_smoothing: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&ctc_weight) {
        return Err(CoreError::Config(format!(
            "ctc weight {ctc_weight} outside [0, 1]"
        )));
    }
    let enc = model.encoder.forward(tape, feats)?;
    let l_ctc = if ctc_weight > 0.0 {
        let logits = model.ctc_head.forward(tape, &enc)?;
        Some(ctc_loss(tape, &logits, tokens)?)
    } else {
        None
    };
    let l_ce = if ctc_weight < 1.0 {
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(SOS);
        input.extend_from_slice(tokens);
        let mut targets = tokens.to_vec();
        targets.push(EOS);
        let out = model.decoder.forward(tape, &input, &enc)?;
        Some(cross_entropy_sum(tape, &out.combined, &targets, label_smoothing)?)
    } else {
        None
    };
    match (l_ctc, l_ce) {
        (Some(ctc), None) => Ok(ctc),
        (None, Some(ce)) => Ok(ce),
        (Some(ctc), Some(ce)) => tape.add(
            &tape.scale(&ctc, ctc_weight)?,
            &tape.scale(&ce, 1.0 - ctc_weight)?,
        ),
        (None, None) => unreachable!("ctc_weight is in [0, 1]"),
    }
}

#[derive(Debug, Clone)]
pub struct AsrTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub ctc_weight: f64,
    pub freeze_ilm: bool,
    pub label_smoothing: f64,
}

impl Default for AsrTrainOptions {
    fn default() -> Self {
        AsrTrainOptions {
            epochs: 5,
            lr: 1e-3,
            seed: 0,
            ctc_weight: 0.3,
            freeze_ilm: true,
            label_smoothing: 0.0,
        }
    }
}

/// Train in place; returns mean loss per utterance for each epoch.
/// With the freeze flag set, internal-LM tensors receive no updates.
pub fn asr_train(
    model: &AsrModel,
    corpus: &[AsrExample],
    opts: &AsrTrainOptions,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(CoreError::Data("asr training corpus is empty".into()));
    }
    model.decoder.ilm.set_frozen(opts.freeze_ilm);
    let trainable: Vec<Tensor> = model
        .params()
        .into_iter()
        .filter(|(name, t)| {
            t.requires_grad()
                && !(opts.ctc_weight == 1.0 && name.starts_with("decoder."))
                && !(opts.ctc_weight == 0.0 && name.starts_with("ctc_head."))
        })
        .map(|(_, t)| t)
        .collect();
    let mut opt = Adam::new(trainable, opts.lr);
    let mut order_rng = seeded(derive_seed(opts.seed, "asr-order"));
    let mut log = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        let order = shuffled(corpus.len(), &mut order_rng);
        let mut total = 0.0;
        for &i in &order {
            let ex = &corpus[i];
            let tape = Tape::new();
            let loss = hybrid_loss(
                model,
                &tape,
                &ex.feats,
                &ex.tokens,
                opts.ctc_weight,
                opts.label_smoothing,
            )
            .map_err(|e| CoreError::Data(format!("utterance {}: {e}", ex.id)))?;
            total += loss.item();
            tape.backward(&loss)?;
            opt.step()?;
        }
        log.push(total / corpus.len() as f64);
    }
    Ok(log)
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

#[cfg(test)]
mod tests;
