//! CTC negative log-likelihood as a differentiable tape op. The
//! forward-backward recursions run in log space over the
//! blank-interleaved label; the backward rule is the analytic
//! softmax-minus-occupancy gradient.

use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::BLANK;

const NEG_INF: f64 = f64::NEG_INFINITY;

pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == NEG_INF {
        return NEG_INF;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == NEG_INF {
        return NEG_INF;
    }
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// Frames required for a label: one per token plus a separating blank
/// between each adjacent repeat.
pub fn ctc_min_frames(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

/// Negative log-likelihood of `label` under per-frame logits `[T, V]`.
pub fn ctc_loss(tape: &Tape, logits: &Tensor, label: &[usize]) -> Result<Tensor> {
    let (t_len, v) = match logits.shape() {
        [t, v] if *t > 0 && *v > 1 => (*t, *v),
        s => {
            return Err(CoreError::ShapeMismatch(format!(
                "ctc logits shape {s:?}, expected [T >= 1, V >= 2]"
            )))
        }
    };
    for &y in label {
        if y == BLANK {
            return Err(CoreError::Data("ctc label contains the blank token".into()));
        }
        if y >= v {
            return Err(CoreError::Vocab(format!("ctc label id {y} out of vocab {v}")));
        }
    }
    let need = ctc_min_frames(label);
    if t_len < need {
        return Err(CoreError::InfeasibleCtc(format!(
            "label of length {} needs at least {need} frames, got {t_len}",
            label.len()
        )));
    }

    // log-softmax per frame
    let raw = logits.to_vec();
    let mut lp = vec![0.0; t_len * v];
    let mut probs = vec![0.0; t_len * v];
    for t in 0..t_len {
        let row = &raw[t * v..(t + 1) * v];
        let max = row.iter().cloned().fold(NEG_INF, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        for k in 0..v {
            lp[t * v + k] = row[k] - lse;
            probs[t * v + k] = (row[k] - lse).exp();
        }
    }

    // blank-interleaved extended label
    let s_len = 2 * label.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            BLANK
        } else {
            label[s / 2]
        }
    };

    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = lp[BLANK];
    if s_len > 1 {
        alpha[1] = lp[ext(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let prev = if s >= 1 {
                alpha[(t - 1) * s_len + s - 1]
            } else {
                NEG_INF
            };
            let skip = if s >= 2 && ext(s) != BLANK && ext(s) != ext(s - 2) {
                alpha[(t - 1) * s_len + s - 2]
            } else {
                NEG_INF
            };
            let from = lse3(stay, prev, skip);
            alpha[t * s_len + s] = if from == NEG_INF {
                NEG_INF
            } else {
                from + lp[t * v + ext(s)]
            };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last + s_len - 1]
    };
    if log_p == NEG_INF {
        return Err(CoreError::InfeasibleCtc(
            "no feasible ctc alignment (zero path mass)".into(),
        ));
    }

    // beta excludes the emission at its own frame so that
    // alpha + beta sums to log_p at every t
    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s] + lp[(t + 1) * v + ext(s)];
            let next = if s + 1 < s_len {
                beta[(t + 1) * s_len + s + 1] + lp[(t + 1) * v + ext(s + 1)]
            } else {
                NEG_INF
            };
            let skip = if s + 2 < s_len && ext(s + 2) != BLANK && ext(s + 2) != ext(s) {
                beta[(t + 1) * s_len + s + 2] + lp[(t + 1) * v + ext(s + 2)]
            } else {
                NEG_INF
            };
            beta[t * s_len + s] = lse3(stay, next, skip);
        }
    }

    // occupancy per frame and symbol, then d loss / d logit
    let mut grad = probs;
    for t in 0..t_len {
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s];
            if g != NEG_INF {
                grad[t * v + ext(s)] -= (g - log_p).exp();
            }
        }
    }

    let out = Tensor::scalar(-log_p);
    tape.record(
        vec![logits.clone()],
        &out,
        Box::new(move |g, _needs| {
            let scale = g[0];
            vec![Some(grad.iter().map(|d| d * scale).collect())]
        }),
    );
    Ok(out)
}
