//! Neural building blocks: linear/embedding/attention/feed-forward
//! layers, layer norm, sinusoidal positions, the Adam optimizer, and a
//! versioned checkpoint container with averaging.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng::Prng;
use crate::tensor::{AttnMask, Tape, Tensor};

fn xavier(d_in: usize, d_out: usize, rng: &mut Prng) -> Vec<f64> {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    (0..d_in * d_out).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Fully connected layer, `x [T, in] -> x W + b [T, out]`.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Prng) -> Linear {
        Linear {
            w: Tensor::param(vec![d_in, d_out], xavier(d_in, d_out, rng)).expect("linear init"),
            b: Tensor::param(vec![d_out], vec![0.0; d_out]).expect("linear bias"),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.add_bias(&tape.matmul(x, &self.w)?, &self.b)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Token embedding table `[vocab, d_model]`.
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(vocab: usize, d_model: usize, rng: &mut Prng) -> Embedding {
        let a = (3.0 / d_model as f64).sqrt();
        let data = (0..vocab * d_model).map(|_| rng.gen_range(-a..a)).collect();
        Embedding {
            table: Tensor::param(vec![vocab, d_model], data).expect("embedding init"),
        }
    }

    pub fn forward(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor> {
        tape.gather_rows(&self.table, ids)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}

/// Layer normalization over the model dimension.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(d: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::param(vec![d], vec![1.0; d]).expect("ln gamma"),
            beta: Tensor::param(vec![d], vec![0.0; d]).expect("ln beta"),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Two-layer position-wise feed-forward block with relu.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(d_model: usize, d_ff: usize, rng: &mut Prng) -> FeedForward {
        FeedForward {
            lin1: Linear::new(d_model, d_ff, rng),
            lin2: Linear::new(d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(tape, &tape.relu(&self.lin1.forward(tape, x)?)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.lin1.collect_params(&format!("{prefix}.lin1"), out);
        self.lin2.collect_params(&format!("{prefix}.lin2"), out);
    }
}

/// Scaled dot-product attention with `n_heads` parallel heads.
pub struct MultiHeadAttention {
    pub d_model: usize,
    pub n_heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut Prng) -> Result<MultiHeadAttention> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        Ok(MultiHeadAttention {
            d_model,
            n_heads,
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
        })
    }

    /// Queries from `q_in`, keys and values from `kv_in`; pass the same
    /// tensor for self-attention. Mask shape must be `[Tq, Tk]`.
    pub fn forward(
        &self,
        tape: &Tape,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&AttnMask>,
    ) -> Result<Tensor> {
        let tq = match q_in.shape() {
            [t, d] if *d == self.d_model => *t,
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "attention query shape {s:?}, expected [*, {}]",
                    self.d_model
                )))
            }
        };
        let tk = match kv_in.shape() {
            [t, d] if *d == self.d_model => *t,
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "attention key/value shape {s:?}, expected [*, {}]",
                    self.d_model
                )))
            }
        };
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(CoreError::ShapeMismatch(format!(
                    "attention mask {:?} does not match [{tq}, {tk}]",
                    m.shape()
                )));
            }
        }
        let q = self.wq.forward(tape, q_in)?;
        let k = self.wk.forward(tape, kv_in)?;
        let v = self.wv.forward(tape, kv_in)?;
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(&q, h * dh, dh)?;
            let kh = tape.slice_cols(&k, h * dh, dh)?;
            let vh = tape.slice_cols(&v, h * dh, dh)?;
            let mut scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
            if let Some(m) = mask {
                scores = tape.masked_fill(&scores, m, f64::NEG_INFINITY)?;
            }
            let attn = tape.softmax(&scores)?;
            heads.push(tape.matmul(&attn, &vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        self.wo.forward(tape, &tape.concat_cols(&refs)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
    }
}

/// Sinusoidal positional encoding table `[t, d]`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![t, d], data).expect("positional encoding")
}

/// Summed cross-entropy of `targets` under `logits [T, V]`, with
/// optional uniform label smoothing (0 disables it).
pub fn cross_entropy_sum(
    tape: &Tape,
    logits: &Tensor,
    targets: &[usize],
    label_smoothing: f64,
) -> Result<Tensor> {
    let lp = tape.log_softmax(logits)?;
    if label_smoothing == 0.0 {
        return tape.nll_sum(&lp, targets);
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(CoreError::Config(format!(
            "label smoothing {label_smoothing} outside [0, 1)"
        )));
    }
    let v = logits.shape()[logits.shape().len() - 1] as f64;
    let hard = tape.scale(&tape.nll_sum(&lp, targets)?, 1.0 - label_smoothing)?;
    let uniform = tape.scale(&tape.sum(&lp)?, -label_smoothing / v)?;
    tape.add(&hard, &uniform)
}

/// Adam over a fixed parameter list. `step` consumes and clears the
/// accumulated gradients.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Adam {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }

    pub fn with_warmup(mut self, steps: u64) -> Adam {
        self.warmup_steps = steps;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with bias correction; errors if any parameter has no
    /// gradient.
    pub fn step(&mut self) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(CoreError::Config(format!(
                    "adam: parameter {i} has no gradient"
                )));
            }
        }
        self.step += 1;
        let lr = if self.warmup_steps > 0 && self.step < self.warmup_steps {
            self.lr * self.step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut j = 0;
            p.apply_update(|x| {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
                j += 1;
            });
            p.zero_grad();
        }
        Ok(())
    }
}

/// Deserialized checkpoint: a model-kind tag, ordered config record,
/// and named tensors in manifest order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_kind: String,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

const CKPT_MAGIC: &[u8; 8] = b"RILMCKPT";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn config_usize(&self, key: &str) -> Result<usize> {
        self.config_value(key)
            .ok_or_else(|| CoreError::Format(format!("checkpoint config missing key {key}")))?
            .parse()
            .map_err(|_| CoreError::Format(format!("checkpoint config key {key} is not an integer")))
    }

    pub fn config_f64(&self, key: &str) -> Result<f64> {
        self.config_value(key)
            .ok_or_else(|| CoreError::Format(format!("checkpoint config missing key {key}")))?
            .parse()
            .map_err(|_| CoreError::Format(format!("checkpoint config key {key} is not a number")))
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    fn header_text(&self) -> Result<String> {
        let mut seen = BTreeSet::new();
        for (name, _, _) in &self.tensors {
            if !seen.insert(name.clone()) {
                return Err(CoreError::Format(format!(
                    "duplicate tensor name {name} in checkpoint"
                )));
            }
        }
        let clean = |s: &str, what: &str| -> Result<()> {
            if s.contains('\n') || s.contains('=') && what != "value" {
                return Err(CoreError::Format(format!(
                    "checkpoint {what} {s:?} contains a reserved character"
                )));
            }
            if what == "value" && s.contains('\n') {
                return Err(CoreError::Format(format!(
                    "checkpoint value {s:?} contains a newline"
                )));
            }
            Ok(())
        };
        let mut h = String::new();
        clean(&self.model_kind, "model kind")?;
        h.push_str(&format!("model_kind={}\n", self.model_kind));
        for (k, v) in &self.config {
            clean(k, "config key")?;
            clean(v, "value")?;
            h.push_str(&format!("config.{k}={v}\n"));
        }
        let mut offset = 0usize;
        for (i, (name, shape, data)) in self.tensors.iter().enumerate() {
            clean(name, "tensor name")?;
            let numel: usize = shape.iter().product();
            if numel != data.len() {
                return Err(CoreError::ShapeMismatch(format!(
                    "tensor {name}: shape {shape:?} vs {} values",
                    data.len()
                )));
            }
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            h.push_str(&format!("tensor.{i}.name={name}\n"));
            h.push_str(&format!("tensor.{i}.shape={}\n", dims.join(" ")));
            h.push_str(&format!("tensor.{i}.offset={offset}\n"));
            offset += numel * 8;
        }
        Ok(h)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = self.header_text()?;
        let payload_len: usize = self.tensors.iter().map(|(_, _, d)| d.len() * 8).sum();
        let mut bytes = Vec::with_capacity(20 + header.len() + payload_len);
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for (_, _, data) in &self.tensors {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
            return Err(CoreError::Format(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(CoreError::Format(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if 20 + header_len > bytes.len() {
            return Err(CoreError::Format(format!(
                "{}: header length {header_len} exceeds file size",
                path.display()
            )));
        }
        let header = std::str::from_utf8(&bytes[20..20 + header_len])
            .map_err(|_| CoreError::Format(format!("{}: header is not UTF-8", path.display())))?;

        let mut model_kind = None;
        let mut config = Vec::new();
        let mut entries: Vec<(Option<String>, Option<Vec<usize>>, Option<usize>)> = Vec::new();
        for (lineno, line) in header.lines().enumerate() {
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Format(format!("{}: header line {} has no '='", path.display(), lineno + 1))
            })?;
            if key == "model_kind" {
                model_kind = Some(value.to_string());
            } else if let Some(ck) = key.strip_prefix("config.") {
                config.push((ck.to_string(), value.to_string()));
            } else if let Some(rest) = key.strip_prefix("tensor.") {
                let (idx, field) = rest.split_once('.').ok_or_else(|| {
                    CoreError::Format(format!("{}: bad manifest key {key}", path.display()))
                })?;
                let idx: usize = idx.parse().map_err(|_| {
                    CoreError::Format(format!("{}: bad manifest index in {key}", path.display()))
                })?;
                if idx >= entries.len() {
                    entries.resize(idx + 1, (None, None, None));
                }
                match field {
                    "name" => entries[idx].0 = Some(value.to_string()),
                    "shape" => {
                        let dims = value
                            .split_whitespace()
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| {
                                CoreError::Format(format!(
                                    "{}: bad shape {value:?} for tensor {idx}",
                                    path.display()
                                ))
                            })?;
                        entries[idx].1 = Some(dims);
                    }
                    "offset" => {
                        entries[idx].2 = Some(value.parse().map_err(|_| {
                            CoreError::Format(format!(
                                "{}: bad offset for tensor {idx}",
                                path.display()
                            ))
                        })?)
                    }
                    _ => {
                        return Err(CoreError::Format(format!(
                            "{}: unknown manifest field {field:?}",
                            path.display()
                        )))
                    }
                }
            } else {
                return Err(CoreError::Format(format!(
                    "{}: unknown header key {key:?}",
                    path.display()
                )));
            }
        }
        let model_kind = model_kind.ok_or_else(|| {
            CoreError::Format(format!("{}: header missing model_kind", path.display()))
        })?;

        let payload = &bytes[20 + header_len..];
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected_offset = 0usize;
        for (i, entry) in entries.into_iter().enumerate() {
            let (name, shape, offset) = match entry {
                (Some(n), Some(s), Some(o)) => (n, s, o),
                _ => {
                    return Err(CoreError::Format(format!(
                        "{}: incomplete manifest entry for tensor {i}",
                        path.display()
                    )))
                }
            };
            if offset != expected_offset {
                return Err(CoreError::Format(format!(
                    "{}: tensor {name} offset {offset}, expected {expected_offset}",
                    path.display()
                )));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > payload.len() {
                return Err(CoreError::Format(format!(
                    "{}: truncated payload, tensor {name} needs {end} bytes of {}",
                    path.display(),
                    payload.len()
                )));
            }
            let data: Vec<f64> = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, shape, data));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(CoreError::Format(format!(
                "{}: payload has {} trailing bytes",
                path.display(),
                payload.len() - expected_offset
            )));
        }
        Ok(Checkpoint {
            model_kind,
            config,
            tensors,
        })
    }
}

/// Elementwise mean of checkpoints sharing one manifest; config and
/// kind come from the first.
pub fn average_checkpoints(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
    if paths.is_empty() {
        return Err(CoreError::Config("no checkpoints to average".into()));
    }
    let mut acc = Checkpoint::load(&paths[0])?;
    for path in &paths[1..] {
        let next = Checkpoint::load(path)?;
        if next.tensors.len() != acc.tensors.len() {
            return Err(CoreError::Format(format!(
                "checkpoint {} has {} tensors, expected {}",
                path.as_ref().display(),
                next.tensors.len(),
                acc.tensors.len()
            )));
        }
        for ((an, ashape, adata), (bn, bshape, bdata)) in
            acc.tensors.iter_mut().zip(&next.tensors)
        {
            if an != bn || ashape != bshape {
                return Err(CoreError::Format(format!(
                    "checkpoint manifest mismatch at tensor {an} ({ashape:?}) vs {bn} ({bshape:?})"
                )));
            }
            for (a, b) in adata.iter_mut().zip(bdata) {
                *a += b;
            }
        }
    }
    let k = paths.len() as f64;
    for (_, _, data) in &mut acc.tensors {
        for v in data.iter_mut() {
            *v /= k;
        }
    }
    Ok(acc)
}

/// Copy checkpoint tensors into live parameters by name; both sides
/// must cover exactly the same names with equal shapes.
pub fn load_into(named: &[(String, Tensor)], ckpt: &Checkpoint) -> Result<()> {
    if named.len() != ckpt.tensors.len() {
        return Err(CoreError::Format(format!(
            "model has {} parameters, checkpoint has {}",
            named.len(),
            ckpt.tensors.len()
        )));
    }
    for (name, tensor) in named {
        let (shape, data) = ckpt.tensor(name).ok_or_else(|| {
            CoreError::Format(format!("checkpoint is missing tensor {name}"))
        })?;
        if shape != tensor.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "tensor {name}: checkpoint shape {shape:?} vs model {:?}",
                tensor.shape()
            )));
        }
        tensor.set_data(data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn rvec(rng: &mut Prng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_head_identity_attention_returns_value() {
        let mut rng = seeded(1);
        let d = 4;
        let mha = MultiHeadAttention::new(d, 1, &mut rng).unwrap();
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        for lin in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            lin.w.set_data(&eye);
            lin.b.set_data(&vec![0.0; d]);
        }
        let tape = Tape::inference();
        let q = Tensor::from_vec(vec![1, d], rvec(&mut rng, d)).unwrap();
        let kv = Tensor::from_vec(vec![1, d], rvec(&mut rng, d)).unwrap();
        let out = mha.forward(&tape, &q, &kv, None).unwrap();
        assert_eq!(out.to_vec(), kv.to_vec());
    }

    #[test]
    fn two_head_attention_matches_per_head_loop_oracle() {
        let mut rng = seeded(2);
        let (t, d, h) = (5, 8, 2);
        let dh = d / h;
        let mha = MultiHeadAttention::new(d, h, &mut rng).unwrap();
        let x = rvec(&mut rng, t * d);

        let lin = |m: &Linear, x: &[f64], rows: usize| -> Vec<f64> {
            let w = m.w.to_vec();
            let b = m.b.to_vec();
            let mut y = vec![0.0; rows * d];
            for i in 0..rows {
                for j in 0..d {
                    let mut acc = b[j];
                    for p in 0..d {
                        acc += x[i * d + p] * w[p * d + j];
                    }
                    y[i * d + j] = acc;
                }
            }
            y
        };
        let q = lin(&mha.wq, &x, t);
        let k = lin(&mha.wk, &x, t);
        let v = lin(&mha.wv, &x, t);
        let mut cat = vec![0.0; t * d];
        for head in 0..h {
            for i in 0..t {
                let mut weights = vec![0.0; t];
                for j in 0..t {
                    let mut s = 0.0;
                    for p in 0..dh {
                        s += q[i * d + head * dh + p] * k[j * d + head * dh + p];
                    }
                    weights[j] = s / (dh as f64).sqrt();
                }
                let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for w in weights.iter_mut() {
                    *w = (*w - max).exp();
                    z += *w;
                }
                for p in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += weights[j] / z * v[j * d + head * dh + p];
                    }
                    cat[i * d + head * dh + p] = acc;
                }
            }
        }
        let oracle = lin(&mha.wo, &cat, t);

        let tape = Tape::inference();
        let xt = Tensor::from_vec(vec![t, d], x).unwrap();
        let out = mha.forward(&tape, &xt, &xt, None).unwrap();
        let diff = out
            .to_vec()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "max diff {diff}");
    }

    #[test]
    fn causal_attention_never_leaks_future_positions() {
        let mut rng = seeded(3);
        for _ in 0..50 {
            let t = rng.gen_range(2..6);
            let d = 8;
            let mha = MultiHeadAttention::new(d, 2, &mut rng).unwrap();
            let base = rvec(&mut rng, t * d);
            let cut = rng.gen_range(0..t - 1);
            let mut perturbed = base.clone();
            for v in perturbed[(cut + 1) * d..].iter_mut() {
                *v += rng.gen_range(0.5..1.5);
            }
            let mask = AttnMask::causal(t);
            let tape = Tape::inference();
            let xa = Tensor::from_vec(vec![t, d], base).unwrap();
            let xb = Tensor::from_vec(vec![t, d], perturbed).unwrap();
            let ya = mha.forward(&tape, &xa, &xa, Some(&mask)).unwrap();
            let yb = mha.forward(&tape, &xb, &xb, Some(&mask)).unwrap();
            for row in 0..=cut {
                for col in 0..d {
                    assert_eq!(ya.at(row, col).to_bits(), yb.at(row, col).to_bits());
                }
            }
        }
    }

    #[test]
    fn positional_encoding_matches_definition() {
        let pe = positional_encoding(4, 6);
        assert_eq!(pe.at(0, 0), 0.0);
        assert_eq!(pe.at(0, 1), 1.0);
        assert!((pe.at(2, 0) - (2.0f64).sin()).abs() < 1e-12);
        let w = 1.0 / 10000f64.powf(2.0 / 6.0);
        assert!((pe.at(3, 2) - (3.0 * w).sin()).abs() < 1e-12);
        assert!((pe.at(3, 3) - (3.0 * w).cos()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_with_smoothing_matches_hand_formula() {
        let tape = Tape::inference();
        let logits = Tensor::from_vec(vec![1, 3], vec![0.2, -0.4, 1.1]).unwrap();
        let lp = tape.log_softmax(&logits).unwrap().to_vec();
        let plain = cross_entropy_sum(&tape, &logits, &[0], 0.0).unwrap();
        assert!((plain.item() + lp[0]).abs() < 1e-12);
        let s = 0.3;
        let smoothed = cross_entropy_sum(&tape, &logits, &[0], s).unwrap();
        let hand = -(1.0 - s) * lp[0] - s / 3.0 * (lp[0] + lp[1] + lp[2]);
        assert!((smoothed.item() - hand).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        let p = Tensor::param(vec![1], vec![0.5]).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        opt.step().unwrap();
        // mhat = vhat = 1 after bias correction, so the step is
        // -lr / (1 + eps)
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.to_vec()[0] - expected).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::param(vec![2], vec![0.25, -1.5]).unwrap();
        p.accumulate_grad(&[0.0, 0.0]);
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        opt.step().unwrap();
        assert_eq!(p.to_vec(), vec![0.25, -1.5]);
    }

    #[test]
    fn adam_constant_gradient_makes_monotone_progress() {
        let run = |steps: usize| {
            let p = Tensor::param(vec![1], vec![0.0]).unwrap();
            let mut opt = Adam::new(vec![p.clone()], 0.1);
            for _ in 0..steps {
                p.accumulate_grad(&[1.0]);
                opt.step().unwrap();
            }
            p.to_vec()[0]
        };
        assert!(run(2) < run(1));
    }

    #[test]
    fn adam_zero_lr_is_bit_identical() {
        let mut rng = seeded(9);
        let data = rvec(&mut rng, 6);
        let p = Tensor::param(vec![2, 3], data.clone()).unwrap();
        let mut opt = Adam::new(vec![p.clone()], 0.0);
        for _ in 0..3 {
            p.accumulate_grad(&rvec(&mut rng, 6));
            opt.step().unwrap();
        }
        let after = p.to_vec();
        for (a, b) in data.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_missing_gradient_is_an_error() {
        let p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut opt = Adam::new(vec![p], 0.1);
        assert!(opt.step().is_err());
    }

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = seeded(seed);
        Checkpoint {
            model_kind: "lm".into(),
            config: vec![
                ("d_model".into(), "8".into()),
                ("vocab.0".into(), "<blank>".into()),
            ],
            tensors: vec![
                ("embed.table".into(), vec![3, 2], rvec(&mut rng, 6)),
                ("head.w".into(), vec![2, 3], rvec(&mut rng, 6)),
            ],
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample_checkpoint(10);
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.model_kind, ck.model_kind);
        assert_eq!(loaded.config, ck.config);
        for ((an, ashape, adata), (bn, bshape, bdata)) in ck.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(an, bn);
            assert_eq!(ashape, bshape);
            for (a, b) in adata.iter().zip(bdata) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample_checkpoint(11).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = &bytes[..bytes.len() - 9];
        std::fs::write(&path, truncated).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("magic"));

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(Checkpoint::load(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn averaging_copies_and_opposites() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint(12);
        let p1 = dir.path().join("x1.ckpt");
        let p2 = dir.path().join("x2.ckpt");
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        let avg = average_checkpoints(&[&p1, &p2]).unwrap();
        for ((_, _, a), (_, _, b)) in avg.tensors.iter().zip(&ck.tensors) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        let mut neg = sample_checkpoint(12);
        for (_, _, d) in &mut neg.tensors {
            for v in d.iter_mut() {
                *v = -*v;
            }
        }
        let pn = dir.path().join("neg.ckpt");
        neg.save(&pn).unwrap();
        let zero = average_checkpoints(&[&p1, &pn]).unwrap();
        for (_, _, d) in &zero.tensors {
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn averaging_three_matches_mean_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let cks: Vec<Checkpoint> = (0..3).map(|s| sample_checkpoint(20 + s)).collect();
        let paths: Vec<_> = (0..3)
            .map(|i| dir.path().join(format!("m{i}.ckpt")))
            .collect();
        for (ck, p) in cks.iter().zip(&paths) {
            ck.save(p).unwrap();
        }
        let avg = average_checkpoints(&paths).unwrap();
        for ti in 0..avg.tensors.len() {
            for j in 0..avg.tensors[ti].2.len() {
                let mean = (cks[0].tensors[ti].2[j]
                    + cks[1].tensors[ti].2[j]
                    + cks[2].tensors[ti].2[j])
                    / 3.0;
                assert!((avg.tensors[ti].2[j] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn averaging_rejects_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        sample_checkpoint(30).save(&p1).unwrap();
        let mut other = sample_checkpoint(31);
        other.tensors[1].0 = "head.weight".into();
        other.save(&p2).unwrap();
        let err = average_checkpoints(&[&p1, &p2]).unwrap_err().to_string();
        assert!(err.contains("head.w"), "{err}");
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let ck = sample_checkpoint(40);
        let embed = Tensor::param(vec![3, 2], vec![0.0; 6]).unwrap();
        let head = Tensor::param(vec![2, 3], vec![0.0; 6]).unwrap();
        let named = vec![
            ("embed.table".to_string(), embed.clone()),
            ("head.w".to_string(), head.clone()),
        ];
        load_into(&named, &ck).unwrap();
        assert_eq!(embed.to_vec(), ck.tensors[0].2);

        let bad = vec![("embed.table".to_string(), embed)];
        assert!(load_into(&bad, &ck).is_err());
    }
}
