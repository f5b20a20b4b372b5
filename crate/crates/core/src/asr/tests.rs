use super::*;
use crate::error::CoreError;
use crate::tensor::grad_check;
use crate::tokenizer::BLANK;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

fn rvec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rfeats(rng: &mut ChaCha12Rng, t: usize, d: usize) -> Tensor {
    Tensor::from_vec(vec![t, d], rvec(rng, t * d)).unwrap()
}

fn toy_vocab(letters: usize) -> Vocab {
    let mut tokens: Vec<String> = crate::tokenizer::SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..letters {
        tokens.push(((b'a' + i as u8) as char).to_string());
    }
    Vocab::from_tokens(tokens).unwrap()
}

fn tiny_config(vocab_size: usize, beta: f64) -> AsrConfig {
    AsrConfig {
        encoder: EncoderConfig {
            feat_dim: 8,
            stack: 1,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
        },
        decoder: RilmDecoderConfig {
            n_ilm_layers: 1,
            m_cross_layers: 1,
            beta,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size,
            max_len: 32,
            bridge_input: BridgeInput::Prob,
        },
    }
}

fn tiny_model(seed: u64, beta: f64) -> AsrModel {
    let vocab = toy_vocab(4);
    AsrModel::new(tiny_config(vocab.size(), beta), vocab, &mut seeded(seed)).unwrap()
}

#[test]
fn zero_layer_encoder_with_identity_projection_is_identity() {
    let cfg = EncoderConfig {
        feat_dim: 4,
        stack: 1,
        n_layers: 0,
        d_model: 4,
        n_heads: 1,
        d_ff: 8,
    };
    let enc = Encoder::new(cfg, &mut seeded(3)).unwrap();
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    enc.proj.w.set_data(&eye);
    enc.proj.b.set_data(&[0.0; 4]);

    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let x = rfeats(&mut rng, 5, 4);
    let y = enc.forward(&Tape::inference(), &x).unwrap();
    assert_eq!(y.shape(), x.shape());
    for (a, b) in y.to_vec().iter().zip(x.to_vec()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn frame_stacking_shortens_the_sequence() {
    let cfg = EncoderConfig {
        feat_dim: 3,
        stack: 2,
        n_layers: 0,
        d_model: 5,
        n_heads: 1,
        d_ff: 8,
    };
    let enc = Encoder::new(cfg, &mut seeded(4)).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    let y = enc.forward(&Tape::inference(), &rfeats(&mut rng, 7, 3)).unwrap();
    assert_eq!(y.shape(), &[4, 5]);
}

#[test]
fn frame_stacking_keeps_influence_local() {
    let cfg = EncoderConfig {
        feat_dim: 3,
        stack: 2,
        n_layers: 0,
        d_model: 5,
        n_heads: 1,
        d_ff: 8,
    };
    let enc = Encoder::new(cfg, &mut seeded(5)).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let base = rvec(&mut rng, 6 * 3);
    let mut poked = base.clone();
    poked[3 * 3 + 1] += 0.5; // frame 3 lands in stacked row 1

    let tape = Tape::inference();
    let ya = enc
        .forward(&tape, &Tensor::from_vec(vec![6, 3], base).unwrap())
        .unwrap()
        .to_vec();
    let yb = enc
        .forward(&tape, &Tensor::from_vec(vec![6, 3], poked).unwrap())
        .unwrap()
        .to_vec();
    for row in 0..3 {
        let same = ya[row * 5..(row + 1) * 5]
            .iter()
            .zip(&yb[row * 5..(row + 1) * 5])
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert_eq!(same, row != 1, "row {row}");
    }
}

#[test]
fn highway_combination_is_exact() {
    let model = tiny_model(7, 0.3);
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let enc = rfeats(&mut rng, 4, 16);
    let out = model
        .decoder
        .forward(&Tape::inference(), &[SOS, 4, 5, 6], &enc)
        .unwrap();
    let a = out.attention.to_vec();
    let l = out.internal_lm.to_vec();
    for (i, c) in out.combined.to_vec().iter().enumerate() {
        assert_eq!(c - (a[i] + 0.3 * l[i]), 0.0);
    }
}

#[test]
fn beta_zero_reproduces_attention_logits() {
    let model = tiny_model(8, 0.0);
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let enc = rfeats(&mut rng, 3, 16);
    let out = model
        .decoder
        .forward(&Tape::inference(), &[SOS, 5, 4], &enc)
        .unwrap();
    let a = out.attention.to_vec();
    for (c, a) in out.combined.to_vec().iter().zip(a) {
        assert_eq!(c.to_bits(), a.to_bits());
    }
}

#[test]
fn internal_lm_logits_ignore_encoder_states() {
    let model = tiny_model(9, 0.3);
    let prefix = [SOS, 4, 6, 5];
    let tape = Tape::inference();
    let mut rng = ChaCha12Rng::seed_from_u64(14);
    let baseline = model
        .decoder
        .forward(&tape, &prefix, &rfeats(&mut rng, 4, 16))
        .unwrap()
        .internal_lm
        .to_vec();
    for trial in 0..50 {
        let t = rng.gen_range(1..=6);
        let got = model
            .decoder
            .forward(&tape, &prefix, &rfeats(&mut rng, t, 16))
            .unwrap()
            .internal_lm
            .to_vec();
        for (g, b) in got.iter().zip(&baseline) {
            assert_eq!(g.to_bits(), b.to_bits(), "trial {trial}");
        }
    }
}

#[test]
fn identity_ilm_swap_in_memory_keeps_outputs() {
    let model = tiny_model(15, 0.3);
    let mut rng = ChaCha12Rng::seed_from_u64(16);
    let enc = rfeats(&mut rng, 5, 16);
    let tape = Tape::inference();
    let before = model.decoder.forward(&tape, &[SOS, 4, 5], &enc).unwrap();
    model
        .init_ilm_from(&model.decoder.ilm.to_checkpoint())
        .unwrap();
    let after = model.decoder.forward(&tape, &[SOS, 4, 5], &enc).unwrap();
    for (x, y) in [
        (&before.combined, &after.combined),
        (&before.attention, &after.attention),
        (&before.internal_lm, &after.internal_lm),
    ] {
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn ctc_single_frame_is_one_emission() {
    let logits = Tensor::from_vec(vec![1, 3], vec![0.2, -1.0, 0.7]).unwrap();
    let loss = ctc_loss(&Tape::inference(), &logits, &[2]).unwrap();
    let row = [0.2f64, -1.0, 0.7];
    let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
    assert!((loss.item() - (lse - 0.7)).abs() < 1e-12);
}

#[test]
fn ctc_two_frames_matches_three_path_sum() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let data = rvec(&mut rng, 2 * 3);
    let logits = Tensor::from_vec(vec![2, 3], data.clone()).unwrap();
    let loss = ctc_loss(&Tape::inference(), &logits, &[1]).unwrap();

    let phi: Vec<Vec<f64>> = data
        .chunks_exact(3)
        .map(|row| {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter().map(|x| x.exp() / z).collect()
        })
        .collect();
    let p = phi[0][1] * phi[1][1] + phi[0][1] * phi[1][0] + phi[0][0] * phi[1][1];
    assert!((loss.item() + p.ln()).abs() < 1e-12);
}

#[test]
fn ctc_matches_exhaustive_path_enumeration() {
    let tape = Tape::inference();
    let mut rng = ChaCha12Rng::seed_from_u64(18);
    for v in 2..=4usize {
        for t_len in 1..=6usize {
            let data = rvec(&mut rng, t_len * v);
            let logits = Tensor::from_vec(vec![t_len, v], data.clone()).unwrap();
            let phi: Vec<Vec<f64>> = data
                .chunks_exact(v)
                .map(|row| {
                    let z: f64 = row.iter().map(|x| x.exp()).sum();
                    row.iter().map(|x| x.exp() / z).collect()
                })
                .collect();

            // path sum per collapsed label over all v^t alignments
            let mut mass: HashMap<Vec<usize>, f64> = HashMap::new();
            let mut path = vec![0usize; t_len];
            loop {
                let mut prob = 1.0;
                for (t, &k) in path.iter().enumerate() {
                    prob *= phi[t][k];
                }
                let mut label = Vec::new();
                for (i, &k) in path.iter().enumerate() {
                    if k != BLANK && (i == 0 || path[i - 1] != k) {
                        label.push(k);
                    }
                }
                *mass.entry(label).or_insert(0.0) += prob;
                let mut pos = t_len;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    path[pos] += 1;
                    if path[pos] < v {
                        break;
                    }
                    path[pos] = 0;
                }
                if path.iter().all(|&k| k == 0) {
                    break;
                }
            }

            // every label up to length 3 over the non-blank alphabet
            let mut labels: Vec<Vec<usize>> = vec![vec![]];
            let mut frontier: Vec<Vec<usize>> = vec![vec![]];
            for _ in 0..3 {
                let mut grown = Vec::new();
                for l in &frontier {
                    for k in 1..v {
                        let mut g = l.clone();
                        g.push(k);
                        grown.push(g);
                    }
                }
                labels.extend(grown.iter().cloned());
                frontier = grown;
            }
            for label in &labels {
                match mass.get(label) {
                    Some(&p) if p > 0.0 => {
                        let loss = ctc_loss(&tape, &logits, label).unwrap();
                        assert!(
                            (loss.item() + p.ln()).abs() < 1e-8,
                            "T={t_len} V={v} label {label:?}"
                        );
                    }
                    _ => {
                        let err = ctc_loss(&tape, &logits, label).unwrap_err();
                        assert!(
                            matches!(err, CoreError::InfeasibleCtc(_)),
                            "T={t_len} V={v} label {label:?}: {err}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(19);
    let x = Tensor::from_vec(vec![6, 4], rvec(&mut rng, 24)).unwrap();
    let err = grad_check(|tape, x| ctc_loss(tape, x, &[1, 2]), &x, 1e-5).unwrap();
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn ctc_rejects_bad_inputs() {
    let tape = Tape::inference();
    let logits = Tensor::from_vec(vec![2, 4], vec![0.0; 8]).unwrap();
    assert!(ctc_loss(&tape, &logits, &[BLANK]).is_err());
    assert!(ctc_loss(&tape, &logits, &[4]).is_err());
    let err = ctc_loss(&tape, &logits, &[1, 1]).unwrap_err();
    assert!(matches!(err, CoreError::InfeasibleCtc(_)), "{err}");
    let flat = Tensor::from_vec(vec![8], vec![0.0; 8]).unwrap();
    assert!(ctc_loss(&tape, &flat, &[1]).is_err());
}

#[test]
fn hybrid_loss_edges_match_single_branches() {
    let model = tiny_model(20, 0.3);
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let feats = rfeats(&mut rng, 6, 8);
    let tokens = [4usize, 5];

    let tape = Tape::inference();
    let ctc_only = hybrid_loss(&model, &tape, &feats, &tokens, 1.0, 0.0).unwrap();
    let ctc_direct = ctc_loss(
        &tape,
        &model.ctc_logits(&tape, &feats).unwrap(),
        &tokens,
    )
    .unwrap();
    assert_eq!(ctc_only.item().to_bits(), ctc_direct.item().to_bits());

    let ce_only = hybrid_loss(&model, &tape, &feats, &tokens, 0.0, 0.0).unwrap();
    let enc = model.encoder.forward(&tape, &feats).unwrap();
    let out = model.decoder.forward(&tape, &[SOS, 4, 5], &enc).unwrap();
    let ce_direct = cross_entropy_sum(&tape, &out.combined, &[4, 5, EOS], 0.0).unwrap();
    assert_eq!(ce_only.item().to_bits(), ce_direct.item().to_bits());

    let mixed = hybrid_loss(&model, &tape, &feats, &tokens, 0.3, 0.0).unwrap();
    let expect = 0.3 * ctc_direct.item() + 0.7 * ce_direct.item();
    assert!((mixed.item() - expect).abs() < 1e-12);
}

fn toy_corpus(rng: &mut ChaCha12Rng, n: usize, vocab_size: usize) -> Vec<AsrExample> {
    (0..n)
        .map(|i| {
            let len = rng.gen_range(2..=3);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(4..vocab_size)).collect();
            // two frames per token: a noisy one-hot prototype
            let mut feats = Vec::new();
            for &tok in &tokens {
                for _ in 0..2 {
                    for d in 0..8 {
                        let proto = if d == tok % 8 { 2.0 } else { 0.0 };
                        feats.push(proto + 0.05 * rng.gen_range(-1.0..1.0));
                    }
                }
            }
            AsrExample {
                id: format!("utt{i}"),
                feats: Tensor::from_vec(vec![2 * len, 8], feats).unwrap(),
                tokens,
            }
        })
        .collect()
}

#[test]
fn training_with_frozen_ilm_keeps_its_bits() {
    let model = tiny_model(22, 0.3);
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let corpus = toy_corpus(&mut rng, 6, 8);
    let before: Vec<Vec<f64>> = model
        .decoder
        .ilm
        .params()
        .iter()
        .map(|(_, t)| t.to_vec())
        .collect();

    let opts = AsrTrainOptions {
        epochs: 3,
        ..AsrTrainOptions::default()
    };
    asr_train(&model, &corpus, &opts).unwrap();
    let after: Vec<Vec<f64>> = model
        .decoder
        .ilm
        .params()
        .iter()
        .map(|(_, t)| t.to_vec())
        .collect();
    for (a, b) in before.iter().zip(&after) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    // same run without the freeze must move the internal LM
    let opts = AsrTrainOptions {
        epochs: 1,
        freeze_ilm: false,
        ..AsrTrainOptions::default()
    };
    asr_train(&model, &corpus, &opts).unwrap();
    let moved = model
        .decoder
        .ilm
        .params()
        .iter()
        .map(|(_, t)| t.to_vec())
        .zip(&after)
        .any(|(a, b)| a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()));
    assert!(moved);
}

#[test]
fn training_with_zero_lr_changes_nothing() {
    let model = tiny_model(24, 0.3);
    let mut rng = ChaCha12Rng::seed_from_u64(25);
    let corpus = toy_corpus(&mut rng, 4, 8);
    let before: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.to_vec()).collect();
    let opts = AsrTrainOptions {
        epochs: 2,
        lr: 0.0,
        ..AsrTrainOptions::default()
    };
    asr_train(&model, &corpus, &opts).unwrap();
    for ((_, t), b) in model.params().iter().zip(&before) {
        for (x, y) in t.to_vec().iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn training_loss_decreases_on_a_toy_corpus() {
    let model = tiny_model(26, 0.3);
    let mut rng = ChaCha12Rng::seed_from_u64(27);
    let corpus = toy_corpus(&mut rng, 200, 8);
    let log = asr_train(&model, &corpus, &AsrTrainOptions::default()).unwrap();
    assert_eq!(log.len(), 5);
    assert!(
        log[4] < log[0],
        "loss did not decrease: {log:?}"
    );
}

#[test]
fn swapping_in_the_same_lm_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let asr_path = dir.path().join("asr.ckpt");
    let lm_path = dir.path().join("lm.ckpt");
    let out_path = dir.path().join("out.ckpt");

    let model = tiny_model(28, 0.3);
    model.to_checkpoint().save(&asr_path).unwrap();
    model.decoder.ilm.to_checkpoint().save(&lm_path).unwrap();
    replace_internal_lm(&asr_path, &lm_path, &out_path).unwrap();
    assert_eq!(
        std::fs::read(&asr_path).unwrap(),
        std::fs::read(&out_path).unwrap()
    );
}

#[test]
fn swap_rejects_mismatches_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let asr_path = dir.path().join("asr.ckpt");
    let lm_path = dir.path().join("lm.ckpt");
    let out_path = dir.path().join("out.ckpt");

    let model = tiny_model(29, 0.3);
    model.to_checkpoint().save(&asr_path).unwrap();

    // one extra letter: vocab_size 9 instead of 8
    let big = toy_vocab(5);
    let mut cfg = tiny_config(9, 0.3).decoder.ilm_config();
    cfg.vocab_size = big.size();
    let lm = TransformerLM::new(cfg, big, &mut seeded(30)).unwrap();
    lm.to_checkpoint().save(&lm_path).unwrap();

    let err = replace_internal_lm(&asr_path, &lm_path, &out_path).unwrap_err();
    assert!(err.to_string().contains("vocab_size"), "{err}");
    assert!(!out_path.exists());

    // same size, renamed token: the error names the offending id
    let mut tokens: Vec<String> = toy_vocab(4).tokens().to_vec();
    tokens[4] = "z".into();
    let renamed = Vocab::from_tokens(tokens).unwrap();
    let lm = TransformerLM::new(
        tiny_config(8, 0.3).decoder.ilm_config(),
        renamed,
        &mut seeded(31),
    )
    .unwrap();
    let err = replace_internal_lm_ckpt(&model.to_checkpoint(), &lm.to_checkpoint()).unwrap_err();
    assert!(err.to_string().contains("id 4"), "{err}");

    // config mismatch names the field
    let mut cfg = tiny_config(8, 0.3).decoder.ilm_config();
    cfg.d_ff = 64;
    let lm = TransformerLM::new(cfg, toy_vocab(4), &mut seeded(32)).unwrap();
    let err = replace_internal_lm_ckpt(&model.to_checkpoint(), &lm.to_checkpoint()).unwrap_err();
    assert!(err.to_string().contains("d_ff"), "{err}");
}

#[test]
fn swap_touches_only_internal_lm_tensors_and_is_idempotent() {
    let model = tiny_model(33, 0.3);
    let asr = model.to_checkpoint();
    let other = TransformerLM::new(
        tiny_config(8, 0.3).decoder.ilm_config(),
        toy_vocab(4),
        &mut seeded(34),
    )
    .unwrap();
    let lm = other.to_checkpoint();

    let swapped = replace_internal_lm_ckpt(&asr, &lm).unwrap();
    assert_eq!(swapped.config, asr.config);
    for ((name, shape, data), (n0, s0, d0)) in swapped.tensors.iter().zip(&asr.tensors) {
        assert_eq!(name, n0);
        assert_eq!(shape, s0);
        if let Some(bare) = name.strip_prefix("decoder.ilm.") {
            let (_, want) = lm.tensor(bare).unwrap();
            assert_eq!(data, want, "{name}");
        } else {
            assert_eq!(data, d0, "{name}");
        }
    }

    let twice = replace_internal_lm_ckpt(&swapped, &lm).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("once.ckpt");
    let p2 = dir.path().join("twice.ckpt");
    swapped.save(&p1).unwrap();
    twice.save(&p2).unwrap();
    assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
}
