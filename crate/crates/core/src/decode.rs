//! Inference: CTC greedy and prefix beam search, attention beam search
//! with optional LM fusion, and hybrid CTC/attention joint scoring.
//! When R-softmax is enabled it transforms the CTC posterior matrix
//! once, before any CTC scoring; the attention branch is adapted by
//! swapping the internal LM instead, never by reweighting its softmax.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapt::{r_log_softmax, PriorRatio};
use crate::asr::{lse2, AsrModel};
use crate::error::{CoreError, Result};
use crate::lm::TransformerLM;
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{detokenize, Vocab, BLANK, EOS, SOS};

const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    None,
    Shallow,
    DensityRatio,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Shallow => "shallow",
            FusionMode::DensityRatio => "density_ratio",
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "none" => Ok(FusionMode::None),
            "shallow" => Ok(FusionMode::Shallow),
            "density_ratio" => Ok(FusionMode::DensityRatio),
            _ => Err(CoreError::Config(format!(
                "fusion must be none, shallow or density_ratio, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    pub fusion: FusionMode,
    pub lambda_sf: f64,
    pub mu_target: f64,
    pub mu_source: f64,
    pub r_softmax: bool,
    pub max_out_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> DecodeConfig {
        DecodeConfig {
            beam: 20,
            ctc_weight: 0.3,
            fusion: FusionMode::None,
            lambda_sf: 0.1,
            mu_target: 0.2,
            mu_source: 0.1,
            r_softmax: false,
            max_out_len: 64,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(CoreError::Config("beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(CoreError::Config(format!(
                "ctc_weight {} outside [0, 1]",
                self.ctc_weight
            )));
        }
        if self.max_out_len < 1 {
            return Err(CoreError::Config("max_out_len must be at least 1".into()));
        }
        for (name, w) in [
            ("lambda_sf", self.lambda_sf),
            ("mu_target", self.mu_target),
            ("mu_source", self.mu_source),
            ("length_penalty", self.length_penalty),
        ] {
            if !w.is_finite() {
                return Err(CoreError::Config(format!("{name} must be finite, got {w}")));
            }
        }
        Ok(())
    }
}

/// External LMs for fusion; an entry may stay absent for modes that do
/// not consult it.
#[derive(Clone, Copy, Default)]
pub struct FusionLms<'a> {
    pub target: Option<&'a TransformerLM>,
    pub source: Option<&'a TransformerLM>,
}

impl FusionLms<'_> {
    pub fn none() -> FusionLms<'static> {
        FusionLms {
            target: None,
            source: None,
        }
    }
}

/// Partial or finished beam entry; finished hypotheses end with eos.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_att: f64,
    pub log_tgt_lm: f64,
    pub log_src_lm: f64,
    /// CTC prefix mass while open, exact-label mass once finished.
    pub log_ctc: f64,
    pub score: f64,
    ctc_state: Option<CtcState>,
}

impl Hypothesis {
    /// Detokenized text; eos is a special and drops out.
    pub fn transcript(&self, vocab: &Vocab) -> Result<String> {
        detokenize(vocab, &self.tokens)
    }
}

/// The one ranking formula: (1 - ctc_weight) * (attention + fusion)
/// + ctc_weight * ctc, plus length_penalty per content token, where
/// fusion is 0, lambda_sf * tgt, or mu_t * tgt - mu_s * src.
fn combined_score(cfg: &DecodeConfig, att: f64, tgt: f64, src: f64, ctc: f64, content_len: usize) -> f64 {
    let fusion = match cfg.fusion {
        FusionMode::None => 0.0,
        FusionMode::Shallow => cfg.lambda_sf * tgt,
        FusionMode::DensityRatio => cfg.mu_target * tgt - cfg.mu_source * src,
    };
    (1.0 - cfg.ctc_weight) * (att + fusion)
        + cfg.ctc_weight * ctc
        + cfg.length_penalty * content_len as f64
}

/// Same reduction order as the R-softmax log path, so decoding with
/// unit ratios reproduces the plain path bit for bit.
fn log_softmax_row(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(NEG_INF, f64::max);
    let lse = m + a.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    a.iter().map(|x| x - lse).collect()
}

fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in row.iter().enumerate() {
        if best.map_or(true, |b| x > row[b]) {
            best = Some(i);
        }
    }
    best
}

/// Log posterior rows for CTC scoring: plain log-softmax per frame, or
/// the residual variant when a prior ratio is given.
pub fn ctc_log_posteriors(ctc_logits: &Tensor, ratio: Option<&PriorRatio>) -> Result<Vec<Vec<f64>>> {
    let (t_len, v) = match ctc_logits.shape() {
        [t, v] if *t > 0 && *v >= 2 => (*t, *v),
        s => {
            return Err(CoreError::ShapeMismatch(format!(
                "ctc logits {s:?}, expected [T >= 1, V >= 2]"
            )))
        }
    };
    let data = ctc_logits.to_vec();
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let frame = &data[t * v..(t + 1) * v];
        rows.push(match ratio {
            Some(r) => r_log_softmax(frame, r)?,
            None => log_softmax_row(frame),
        });
    }
    Ok(rows)
}

/// Per-frame argmax, collapse adjacent repeats, drop blanks.
pub fn ctc_greedy_decode(probs: &[Vec<f64>]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for row in probs {
        let Some(am) = argmax(row) else { continue };
        if am != BLANK && prev != Some(am) {
            out.push(am);
        }
        prev = Some(am);
    }
    out
}

fn check_prob_rows(probs: &[Vec<f64>]) -> Result<usize> {
    if probs.is_empty() {
        return Err(CoreError::Data("no posterior frames".into()));
    }
    let v = probs[0].len();
    if v < 2 {
        return Err(CoreError::Data(format!(
            "posterior rows need at least 2 entries, got {v}"
        )));
    }
    for (t, row) in probs.iter().enumerate() {
        if row.len() != v {
            return Err(CoreError::ShapeMismatch(format!(
                "posterior row {t} has {} entries, row 0 has {v}",
                row.len()
            )));
        }
        for &p in row {
            if !p.is_finite() || p < 0.0 {
                return Err(CoreError::Data(format!(
                    "posterior row {t} holds a non-probability {p}"
                )));
            }
        }
    }
    Ok(v)
}

fn merge_mass(map: &mut BTreeMap<Vec<usize>, (f64, f64)>, key: Vec<usize>, blank: f64, tok: f64) {
    let e = map.entry(key).or_insert((NEG_INF, NEG_INF));
    e.0 = lse2(e.0, blank);
    e.1 = lse2(e.1, tok);
}

fn prefix_total(masses: &(f64, f64)) -> f64 {
    lse2(masses.0, masses.1)
}

/// Prefix beam search over CTC posterior rows: per-prefix blank-ending
/// and symbol-ending masses, pruned by total mass, ties by token ids.
pub fn ctc_prefix_beam_search(probs: &[Vec<f64>], cfg: &DecodeConfig) -> Result<Vec<(Vec<usize>, f64)>> {
    cfg.validate()?;
    let v = check_prob_rows(probs)?;
    let mut beams: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beams.insert(Vec::new(), (0.0, NEG_INF));
    for row in probs {
        let lp: Vec<f64> = row.iter().map(|p| p.ln()).collect();
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, masses) in &beams {
            let (pb, pnb) = *masses;
            let total = prefix_total(masses);
            // stay on this prefix: a blank, or a repeat of its last symbol
            let again = match prefix.last() {
                Some(&last) => lp[last] + pnb,
                None => NEG_INF,
            };
            merge_mass(&mut next, prefix.clone(), lp[BLANK] + total, again);
            // grow by one symbol; a repeat needs the blank-ending mass
            for c in 1..v {
                let base = if prefix.last() == Some(&c) { pb } else { total };
                let mut ext = Vec::with_capacity(prefix.len() + 1);
                ext.extend_from_slice(prefix);
                ext.push(c);
                merge_mass(&mut next, ext, NEG_INF, lp[c] + base);
            }
        }
        let mut items: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        items.sort_by(|a, b| {
            prefix_total(&b.1)
                .total_cmp(&prefix_total(&a.1))
                .then_with(|| a.0.cmp(&b.0))
        });
        items.truncate(cfg.beam);
        beams = items.into_iter().collect();
    }
    let mut out: Vec<(Vec<usize>, f64)> = beams
        .into_iter()
        .map(|(prefix, masses)| {
            let total = prefix_total(&masses);
            (prefix, total)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Forward masses of one prefix over all frames: symbol-ending in rn,
/// blank-ending in rb.
#[derive(Debug, Clone)]
struct CtcState {
    rn: Vec<f64>,
    rb: Vec<f64>,
}

/// Incremental prefix-probability scorer over log posterior rows.
struct CtcPrefixScorer {
    lp: Vec<Vec<f64>>,
}

impl CtcPrefixScorer {
    fn new(lp: Vec<Vec<f64>>) -> Result<CtcPrefixScorer> {
        if lp.is_empty() {
            return Err(CoreError::Data("no posterior frames".into()));
        }
        let v = lp[0].len();
        if v < 2 || lp.iter().any(|r| r.len() != v) {
            return Err(CoreError::ShapeMismatch(
                "ragged or too-narrow posterior rows".into(),
            ));
        }
        Ok(CtcPrefixScorer { lp })
    }

    /// Empty prefix: only all-blank paths.
    fn initial(&self) -> CtcState {
        let mut rb = Vec::with_capacity(self.lp.len());
        let mut acc = 0.0;
        for row in &self.lp {
            acc += row[BLANK];
            rb.push(acc);
        }
        CtcState {
            rn: vec![NEG_INF; self.lp.len()],
            rb,
        }
    }

    /// Extends a prefix by symbol c; returns the new state and the
    /// prefix log-probability (mass of all labels starting with it).
    fn extend(&self, st: &CtcState, last: Option<usize>, c: usize) -> (CtcState, f64) {
        let t_len = self.lp.len();
        // mass of the old prefix at t that may start c at t + 1
        let phi = |t: usize| {
            if last == Some(c) {
                st.rb[t]
            } else {
                lse2(st.rb[t], st.rn[t])
            }
        };
        let mut rn = vec![NEG_INF; t_len];
        let mut rb = vec![NEG_INF; t_len];
        rn[0] = if last.is_none() { self.lp[0][c] } else { NEG_INF };
        let mut psi = rn[0];
        for t in 1..t_len {
            rn[t] = self.lp[t][c] + lse2(rn[t - 1], phi(t - 1));
            rb[t] = self.lp[t][BLANK] + lse2(rb[t - 1], rn[t - 1]);
            psi = lse2(psi, self.lp[t][c] + phi(t - 1));
        }
        (CtcState { rn, rb }, psi)
    }

    /// Exact-label mass: the prefix and nothing after it.
    fn complete(&self, st: &CtcState) -> f64 {
        let t = self.lp.len() - 1;
        lse2(st.rn[t], st.rb[t])
    }
}

fn check_fusion_lm(vocab: &Vocab, lm: &TransformerLM, role: &str) -> Result<()> {
    if lm.vocab.size() != vocab.size() {
        return Err(CoreError::Vocab(format!(
            "{role} lm vocab has {} tokens, decoder has {}",
            lm.vocab.size(),
            vocab.size()
        )));
    }
    for i in 0..vocab.size() {
        if lm.vocab.token(i)? != vocab.token(i)? {
            return Err(CoreError::Vocab(format!(
                "{role} lm vocab mismatch at id {i}: decoder has {:?}, lm has {:?}",
                vocab.token(i)?,
                lm.vocab.token(i)?
            )));
        }
    }
    Ok(())
}

fn sort_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
}

/// Token-synchronous beam search shared by the attention-only and
/// hybrid entry points. Candidates are every non-structural token plus
/// eos as the terminator; blank and sos never extend a hypothesis.
fn beam_engine(
    model: &AsrModel,
    enc: &Tensor,
    cfg: &DecodeConfig,
    lms: &FusionLms,
    scorer: Option<&CtcPrefixScorer>,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let (need_tgt, need_src) = match cfg.fusion {
        FusionMode::None => (false, false),
        FusionMode::Shallow => (true, false),
        FusionMode::DensityRatio => (true, true),
    };
    let tgt_lm = if need_tgt {
        let lm = lms.target.ok_or_else(|| {
            CoreError::Config(format!("{} fusion needs a target lm", cfg.fusion.as_str()))
        })?;
        check_fusion_lm(&model.vocab, lm, "target")?;
        Some(lm)
    } else {
        None
    };
    let src_lm = if need_src {
        let lm = lms.source.ok_or_else(|| {
            CoreError::Config(format!("{} fusion needs a source lm", cfg.fusion.as_str()))
        })?;
        check_fusion_lm(&model.vocab, lm, "source")?;
        Some(lm)
    } else {
        None
    };
    let v = model.config.decoder.vocab_size;
    // the longest prefix forwarded is [sos] + max_content tokens
    let mut max_content = cfg.max_out_len.min(model.config.decoder.max_len - 1);
    if let Some(lm) = tgt_lm {
        max_content = max_content.min(lm.config.max_len - 1);
    }
    if let Some(lm) = src_lm {
        max_content = max_content.min(lm.config.max_len - 1);
    }
    if max_content == 0 {
        return Err(CoreError::Config(
            "no room for output tokens under the model length limits".into(),
        ));
    }
    let tape = Tape::inference();
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_att: 0.0,
        log_tgt_lm: 0.0,
        log_src_lm: 0.0,
        log_ctc: 0.0,
        score: 0.0,
        ctc_state: scorer.map(|s| s.initial()),
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    // step max_content is a closing pass where only eos may extend
    for step in 0..=max_content {
        if active.is_empty() {
            break;
        }
        let closing = step == max_content;
        let mut cands: Vec<Hypothesis> = Vec::new();
        for h in &active {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(SOS);
            prefix.extend_from_slice(&h.tokens);
            let dec = model.decoder.forward(&tape, &prefix, enc)?;
            let data = dec.combined.to_vec();
            let att_row = log_softmax_row(&data[data.len() - v..]);
            let tgt_row = match tgt_lm {
                Some(lm) => Some(lm.next_log_probs(&prefix)?),
                None => None,
            };
            let src_row = match src_lm {
                Some(lm) => Some(lm.next_log_probs(&prefix)?),
                None => None,
            };
            for c in 1..v {
                if c == SOS || (closing && c != EOS) {
                    continue;
                }
                let log_att = h.log_att + att_row[c];
                let log_tgt = h.log_tgt_lm + tgt_row.as_ref().map_or(0.0, |r| r[c]);
                let log_src = h.log_src_lm + src_row.as_ref().map_or(0.0, |r| r[c]);
                let (ctc_state, log_ctc, content_len) = if c == EOS {
                    let mass = match (scorer, &h.ctc_state) {
                        (Some(s), Some(st)) => s.complete(st),
                        _ => 0.0,
                    };
                    (None, mass, h.tokens.len())
                } else {
                    match (scorer, &h.ctc_state) {
                        (Some(s), Some(st)) => {
                            let (ns, psi) = s.extend(st, h.tokens.last().copied(), c);
                            (Some(ns), psi, h.tokens.len() + 1)
                        }
                        _ => (None, 0.0, h.tokens.len() + 1),
                    }
                };
                let mut tokens = Vec::with_capacity(h.tokens.len() + 1);
                tokens.extend_from_slice(&h.tokens);
                tokens.push(c);
                let score = combined_score(cfg, log_att, log_tgt, log_src, log_ctc, content_len);
                cands.push(Hypothesis {
                    tokens,
                    log_att,
                    log_tgt_lm: log_tgt,
                    log_src_lm: log_src,
                    log_ctc,
                    score,
                    ctc_state,
                });
            }
        }
        sort_hypotheses(&mut cands);
        cands.truncate(cfg.beam);
        active = Vec::new();
        for c in cands {
            if c.tokens.last() == Some(&EOS) {
                done.push(c);
            } else {
                active.push(c);
            }
        }
    }
    sort_hypotheses(&mut done);
    done.truncate(cfg.beam);
    Ok(done)
}

/// Attention-only n-best over precomputed encoder states; the ctc
/// weight does not apply on this path.
pub fn attention_beam_search(
    model: &AsrModel,
    enc: &Tensor,
    cfg: &DecodeConfig,
    lms: &FusionLms,
) -> Result<Vec<Hypothesis>> {
    let mut pure = cfg.clone();
    pure.ctc_weight = 0.0;
    beam_engine(model, enc, &pure, lms, None)
}

/// Joint search from raw features: attention plus fusion inside the
/// (1 - ctc_weight) term, CTC prefix mass under the encoder posteriors
/// in the other; the posteriors pass through R-softmax when enabled.
pub fn hybrid_joint_decode(
    model: &AsrModel,
    feats: &Tensor,
    cfg: &DecodeConfig,
    lms: &FusionLms,
    ratio: Option<&PriorRatio>,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if cfg.r_softmax && ratio.is_none() {
        return Err(CoreError::Config(
            "r_softmax decoding needs a prior ratio".into(),
        ));
    }
    if !cfg.r_softmax && ratio.is_some() {
        return Err(CoreError::Config(
            "prior ratio supplied but r_softmax is off".into(),
        ));
    }
    let tape = Tape::inference();
    let enc = model.encoder.forward(&tape, feats)?;
    let scorer = if cfg.ctc_weight > 0.0 {
        let logits = model.ctc_head.forward(&tape, &enc)?;
        let rows = ctc_log_posteriors(&logits, if cfg.r_softmax { ratio } else { None })?;
        Some(CtcPrefixScorer::new(rows)?)
    } else {
        None
    };
    beam_engine(model, &enc, cfg, lms, scorer.as_ref())
}

/// One `utt_id<TAB>rank<TAB>score<TAB>transcript` line per hypothesis,
/// ranks starting at 1 within each utterance.
pub fn write_nbest(path: impl AsRef<Path>, entries: &[(String, Vec<(f64, String)>)]) -> Result<()> {
    let mut out = String::new();
    for (id, hyps) in entries {
        if id.contains(['\t', '\n']) {
            return Err(CoreError::Data(format!("utterance id {id:?} holds a separator")));
        }
        for (rank, (score, text)) in hyps.iter().enumerate() {
            if text.contains(['\t', '\n']) {
                return Err(CoreError::Data(format!(
                    "transcript for {id} holds a separator"
                )));
            }
            out.push_str(&format!("{id}\t{}\t{score}\t{text}\n", rank + 1));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
