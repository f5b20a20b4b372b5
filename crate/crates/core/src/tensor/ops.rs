//! Forward ops with their backward rules. Shapes are validated up
//! front; reductions and normalizations act over the last axis.

use super::{Tape, Tensor};
use crate::error::{CoreError, Result};

/// Boolean attention mask; `true` marks positions excluded from
/// attention (filled with -inf before the softmax).
#[derive(Clone, Debug)]
pub struct AttnMask {
    shape: Vec<usize>,
    mask: Vec<bool>,
}

impl AttnMask {
    pub fn new(shape: Vec<usize>, mask: Vec<bool>) -> Result<AttnMask> {
        let numel: usize = shape.iter().product();
        if mask.len() != numel {
            return Err(CoreError::ShapeMismatch(format!(
                "mask shape {:?} expects {} entries, got {}",
                shape,
                numel,
                mask.len()
            )));
        }
        Ok(AttnMask { shape, mask })
    }

    /// Square causal mask: position i may attend to positions <= i.
    pub fn causal(t: usize) -> AttnMask {
        let mut mask = vec![false; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                mask[i * t + j] = true;
            }
        }
        AttnMask {
            shape: vec![t, t],
            mask,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.is_empty() {
        return Err(CoreError::ShapeMismatch(
            "operation over last axis requires ndim >= 1".into(),
        ));
    }
    let cols = shape[shape.len() - 1];
    if cols == 0 {
        return Err(CoreError::ShapeMismatch("last axis has size 0".into()));
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    Ok((rows, cols))
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(CoreError::ShapeMismatch(format!(
            "{what} expects a 2-d tensor, got shape {s:?}"
        ))),
    }
}

pub(crate) fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn softmax_row(row: &[f64], out: &mut [f64]) -> Result<()> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(CoreError::ShapeMismatch(
            "softmax over a fully -inf row".into(),
        ));
    }
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

impl Tape {
    fn unary(
        &self,
        input: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
        back: impl Fn(&[f64]) -> Vec<f64> + 'static,
    ) -> Result<Tensor> {
        let out = Tensor::from_vec(shape, data)?;
        self.record(
            vec![input.clone()],
            &out,
            Box::new(move |g, _needs| vec![Some(back(g))]),
        );
        Ok(out)
    }

    /// Elementwise addition of same-shape tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        self.record(
            vec![a.clone(), b.clone()],
            &out,
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        );
        Ok(out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(
            vec![a.clone(), b.clone()],
            &out,
            Box::new(move |g, needs| {
                let da = needs[0]
                    .then(|| g.iter().zip(bc.data().iter()).map(|(g, b)| g * b).collect());
                let db = needs[1]
                    .then(|| g.iter().zip(ac.data().iter()).map(|(g, a)| g * a).collect());
                vec![da, db]
            }),
        );
        Ok(out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|x| x * c).collect();
        self.unary(a, a.shape().to_vec(), data, move |g| {
            g.iter().map(|g| g * c).collect()
        })
    }

    /// Add a length-`cols` bias vector to every row of a 2-d tensor.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2(x, "add_bias")?;
        if bias.shape() != [c] {
            return Err(CoreError::ShapeMismatch(format!(
                "add_bias: bias {:?} does not match row width {}",
                bias.shape(),
                c
            )));
        }
        let bd = bias.data();
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % c])
            .collect();
        drop(bd);
        let out = Tensor::from_vec(vec![r, c], data)?;
        self.record(
            vec![x.clone(), bias.clone()],
            &out,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| g.to_vec());
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    db
                });
                vec![dx, db]
            }),
        );
        Ok(out)
    }

    /// 2-d matrix product.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(a, "matmul lhs")?;
        let (k2, n) = dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul: inner dims differ, {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = matmul_naive(&a.data(), &b.data(), m, k, n);
        let out = Tensor::from_vec(vec![m, n], data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(
            vec![a.clone(), b.clone()],
            &out,
            Box::new(move |g, needs| {
                let da = needs[0].then(|| {
                    // dA[i,p] = sum_j G[i,j] * B[p,j]
                    let bd = bc.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            darow[p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    da
                });
                let db = needs[1].then(|| {
                    // dB[p,j] = sum_i A[i,p] * G[i,j]
                    let ad = ac.data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let arow = &ad[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            }),
        );
        Ok(out)
    }

    /// 2-d transpose.
    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2(a, "transpose")?;
        let ad = a.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ad[i * c + j];
            }
        }
        drop(ad);
        self.unary(a, vec![c, r], data, move |g| {
            let mut dg = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    dg[i * c + j] = g[j * r + i];
                }
            }
            dg
        })
    }

    /// Concatenate 2-d tensors with equal row counts along the last axis.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CoreError::ShapeMismatch("concat_cols of no tensors".into()));
        }
        let (r, _) = dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = dims2(p, "concat_cols")?;
            if pr != r {
                return Err(CoreError::ShapeMismatch(format!(
                    "concat_cols: row counts differ ({} vs {})",
                    r, pr
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::from_vec(vec![r, total], data)?;
        let widths_c = widths.clone();
        self.record(
            parts.iter().map(|&p| p.clone()).collect(),
            &out,
            Box::new(move |g, needs| {
                let mut grads = Vec::with_capacity(widths_c.len());
                let mut offset = 0;
                for (idx, &w) in widths_c.iter().enumerate() {
                    if needs[idx] {
                        let mut dg = vec![0.0; r * w];
                        for i in 0..r {
                            dg[i * w..(i + 1) * w].copy_from_slice(
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                        grads.push(Some(dg));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        );
        Ok(out)
    }

    /// Column slice `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = dims2(a, "slice_cols")?;
        if start + len > c {
            return Err(CoreError::ShapeMismatch(format!(
                "slice_cols: [{start}, {}) out of width {c}",
                start + len
            )));
        }
        let ad = a.data();
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&ad[i * c + start..i * c + start + len]);
        }
        drop(ad);
        self.unary(a, vec![r, len], data, move |g| {
            let mut dg = vec![0.0; r * c];
            for i in 0..r {
                dg[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            dg
        })
    }

    /// Row slice `[start, start+len)` of a 2-d tensor.
    pub fn slice_rows(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = dims2(a, "slice_rows")?;
        if start + len > r {
            return Err(CoreError::ShapeMismatch(format!(
                "slice_rows: [{start}, {}) out of {r} rows",
                start + len
            )));
        }
        let data = a.data()[start * c..(start + len) * c].to_vec();
        self.unary(a, vec![len, c], data, move |g| {
            let mut dg = vec![0.0; r * c];
            dg[start * c..(start + len) * c].copy_from_slice(g);
            dg
        })
    }

    /// Embedding lookup: select rows of `table` by id.
    pub fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(CoreError::Vocab(format!(
                "gather_rows: id {bad} out of range for table with {v} rows"
            )));
        }
        let td = table.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        drop(td);
        let ids_c = ids.to_vec();
        self.unary(table, vec![ids.len(), d], data, move |g| {
            let mut dt = vec![0.0; v * d];
            for (pos, &i) in ids_c.iter().enumerate() {
                let src = &g[pos * d..(pos + 1) * d];
                let dst = &mut dt[i * d..(i + 1) * d];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            dt
        })
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x.max(0.0)).collect();
        let alive: Vec<bool> = a.data().iter().map(|&x| x > 0.0).collect();
        self.unary(a, a.shape().to_vec(), data, move |g| {
            g.iter()
                .zip(&alive)
                .map(|(&g, &ok)| if ok { g } else { 0.0 })
                .collect()
        })
    }

    /// Layer normalization over the last axis with learned gain/bias.
    pub fn layer_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let (r, c) = rows_cols(x.shape())?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(CoreError::ShapeMismatch(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {}",
                gamma.shape(),
                beta.shape(),
                c
            )));
        }
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * gd[j] + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let gamma_c = gamma.clone();
        self.record(
            vec![x.clone(), gamma.clone(), beta.clone()],
            &out,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let gd = gamma_c.data();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        let xrow = &xhat[i * c..(i + 1) * c];
                        // d/dxhat, then the two mean corrections from mu/var
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xrow[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = grow[j] * gd[j];
                            dx[i * c + j] = inv_std[i] * (dxh - m1 - xrow[j] * m2);
                        }
                    }
                    dx
                });
                let dgamma = needs[1].then(|| {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    dg
                });
                let dbeta = needs[2].then(|| {
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    db
                });
                vec![dx, dgamma, dbeta]
            }),
        );
        Ok(out)
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = rows_cols(a.shape())?;
        let ad = a.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&ad[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c])?;
        }
        drop(ad);
        let y = data.clone();
        self.unary(a, a.shape().to_vec(), data, move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let yrow = &y[i * c..(i + 1) * c];
                let grow = &g[i * c..(i + 1) * c];
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    dx[i * c + j] = yrow[j] * (grow[j] - dot);
                }
            }
            dx
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = rows_cols(a.shape())?;
        let ad = a.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(CoreError::ShapeMismatch(
                    "log_softmax over a fully -inf row".into(),
                ));
            }
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        drop(ad);
        let probs: Vec<f64> = data.iter().map(|&v| v.exp()).collect();
        self.unary(a, a.shape().to_vec(), data, move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let grow = &g[i * c..(i + 1) * c];
                let gsum: f64 = grow.iter().sum();
                for j in 0..c {
                    dx[i * c + j] = grow[j] - probs[i * c + j] * gsum;
                }
            }
            dx
        })
    }

    /// Log-sum-exp over the last axis; the result drops that axis.
    pub fn logsumexp(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = rows_cols(a.shape())?;
        let ad = a.data();
        let mut data = vec![0.0; r];
        let mut soft = vec![0.0; r * c];
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(CoreError::ShapeMismatch(
                    "logsumexp over a fully -inf row".into(),
                ));
            }
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            data[i] = sum.ln() + max;
            for j in 0..c {
                soft[i * c + j] = (row[j] - max).exp() / sum;
            }
        }
        drop(ad);
        let out_shape = a.shape()[..a.shape().len() - 1].to_vec();
        self.unary(a, out_shape, data, move |g| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[i] * soft[i * c + j];
                }
            }
            dx
        })
    }

    /// Replace masked positions with a constant (usually -inf before a
    /// softmax); gradients flow only through unmasked entries.
    pub fn masked_fill(&self, a: &Tensor, mask: &AttnMask, value: f64) -> Result<Tensor> {
        if a.shape() != mask.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "masked_fill: tensor {:?} vs mask {:?}",
                a.shape(),
                mask.shape()
            )));
        }
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(mask.as_slice())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let keep: Vec<bool> = mask.as_slice().iter().map(|&m| !m).collect();
        self.unary(a, a.shape().to_vec(), data, move |g| {
            g.iter()
                .zip(&keep)
                .map(|(&g, &k)| if k { g } else { 0.0 })
                .collect()
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel();
        let total: f64 = a.data().iter().sum();
        self.unary(a, vec![], vec![total], move |g| vec![g[0]; n])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel();
        if n == 0 {
            return Err(CoreError::ShapeMismatch("mean of empty tensor".into()));
        }
        let total: f64 = a.data().iter().sum::<f64>() / n as f64;
        self.unary(a, vec![], vec![total], move |g| vec![g[0] / n as f64; n])
    }

    /// Summed negative log-likelihood of per-row targets under a
    /// `[rows, vocab]` log-probability matrix.
    pub fn nll_sum(&self, log_probs: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (r, c) = dims2(log_probs, "nll_sum")?;
        if targets.len() != r {
            return Err(CoreError::ShapeMismatch(format!(
                "nll_sum: {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(CoreError::Vocab(format!(
                "nll_sum: target id {bad} out of vocab {c}"
            )));
        }
        let lp = log_probs.data();
        let total: f64 = targets.iter().enumerate().map(|(i, &t)| -lp[i * c + t]).sum();
        drop(lp);
        let targets_c = targets.to_vec();
        self.unary(log_probs, vec![], vec![total], move |g| {
            let mut dx = vec![0.0; r * c];
            for (i, &t) in targets_c.iter().enumerate() {
                dx[i * c + t] = -g[0];
            }
            dx
        })
    }
}
