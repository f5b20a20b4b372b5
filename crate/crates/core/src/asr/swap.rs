//! Internal-LM replacement: a pure checkpoint-to-checkpoint edit that
//! overwrites every `decoder.ilm.` tensor and touches nothing else.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::lm::TransformerLmConfig;
use crate::nn::Checkpoint;

const ILM_PREFIX: &str = "decoder.ilm.";

/// The LM checkpoint must match the decoder's internal-LM geometry and
/// vocabulary exactly; the error names the first offending field.
pub(crate) fn check_ilm_compat(
    ilm_cfg: &TransformerLmConfig,
    vocab_tokens: &[String],
    lm_ckpt: &Checkpoint,
) -> Result<()> {
    if lm_ckpt.model_kind != "lm" {
        return Err(CoreError::Format(format!(
            "expected an lm checkpoint, found model_kind {}",
            lm_ckpt.model_kind
        )));
    }
    let (lm_cfg, lm_vocab) = TransformerLmConfig::from_checkpoint(lm_ckpt)?;
    let fields = [
        ("n_layers", ilm_cfg.n_layers, lm_cfg.n_layers),
        ("d_model", ilm_cfg.d_model, lm_cfg.d_model),
        ("n_heads", ilm_cfg.n_heads, lm_cfg.n_heads),
        ("d_ff", ilm_cfg.d_ff, lm_cfg.d_ff),
        ("vocab_size", ilm_cfg.vocab_size, lm_cfg.vocab_size),
        ("max_len", ilm_cfg.max_len, lm_cfg.max_len),
    ];
    for (name, want, got) in fields {
        if want != got {
            return Err(CoreError::Config(format!(
                "internal-LM {name} mismatch: decoder expects {want}, lm checkpoint has {got}"
            )));
        }
    }
    for (i, want) in vocab_tokens.iter().enumerate() {
        let got = lm_vocab.token(i)?;
        if want != got {
            return Err(CoreError::Vocab(format!(
                "vocab mismatch at id {i}: decoder has {want:?}, lm checkpoint has {got:?}"
            )));
        }
    }
    Ok(())
}

/// Overwrite the ASR checkpoint's internal-LM tensors with the LM
/// checkpoint's tensors. No other tensor or config entry changes.
pub fn replace_internal_lm_ckpt(asr: &Checkpoint, lm: &Checkpoint) -> Result<Checkpoint> {
    use crate::asr::AsrConfig;

    if asr.model_kind != "asr" {
        return Err(CoreError::Format(format!(
            "expected an asr checkpoint, found model_kind {}",
            asr.model_kind
        )));
    }
    let (asr_cfg, vocab) = AsrConfig::from_checkpoint(asr)?;
    check_ilm_compat(&asr_cfg.decoder.ilm_config(), vocab.tokens(), lm)?;

    let mut out = asr.clone();
    let ilm_total = out
        .tensors
        .iter()
        .filter(|(n, _, _)| n.starts_with(ILM_PREFIX))
        .count();
    if ilm_total != lm.tensors.len() {
        return Err(CoreError::Format(format!(
            "asr checkpoint holds {ilm_total} internal-LM tensors, lm checkpoint holds {}",
            lm.tensors.len()
        )));
    }
    for (name, shape, data) in &lm.tensors {
        let target = format!("{ILM_PREFIX}{name}");
        let slot = out
            .tensors
            .iter_mut()
            .find(|(n, _, _)| *n == target)
            .ok_or_else(|| {
                CoreError::Format(format!("asr checkpoint has no tensor {target}"))
            })?;
        if &slot.1 != shape {
            return Err(CoreError::ShapeMismatch(format!(
                "tensor {target}: asr shape {:?} vs lm shape {shape:?}",
                slot.1
            )));
        }
        slot.2 = data.clone();
    }
    Ok(out)
}

/// File-to-file swap. All validation happens before the output path is
/// touched, so a rejected swap leaves no file behind.
pub fn replace_internal_lm(
    asr_path: impl AsRef<Path>,
    lm_path: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
) -> Result<()> {
    let asr = Checkpoint::load(asr_path)?;
    let lm = Checkpoint::load(lm_path)?;
    let swapped = replace_internal_lm_ckpt(&asr, &lm)?;
    swapped.save(out_path)
}
