//! Differentiable tensor operations.
//!
//! Each op computes its forward values eagerly and, when any input lives on a
//! tape, records a backward closure capturing whatever forward values the
//! gradient rule needs (cheap `Rc` clones of the buffers).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::tensor::{acc_grad, merged_tape, BackFn, NodeRef, Tensor};

fn attach(mut out: Tensor, inputs: &[&Tensor], back: BackFn) -> Result<Tensor> {
    if let Some(tape) = merged_tape(inputs)? {
        let id = tape.record(out.len(), Some(back));
        out.node = Some(NodeRef { tape, id });
    }
    Ok(out)
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Leading dimensions flattened to rows, trailing dimension as columns.
fn rows_cols(t: &Tensor) -> (usize, usize) {
    let n = *t.shape().last().expect("non-empty shape");
    (t.len() / n, n)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let vals = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    let (ia, ib, la) = (a.node_id(), b.node_id(), a.len());
    attach(
        Tensor::from_raw(a.shape().to_vec(), vals),
        &[a, b],
        Box::new(move |g, store| {
            for i in [ia, ib].into_iter().flatten() {
                let acc = acc_grad(store, i, la);
                for (q, gv) in acc.iter_mut().zip(g) {
                    *q += gv;
                }
            }
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let vals = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    let (ia, ib, la) = (a.node_id(), b.node_id(), a.len());
    attach(
        Tensor::from_raw(a.shape().to_vec(), vals),
        &[a, b],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for (q, gv) in acc.iter_mut().zip(g) {
                    *q += gv;
                }
            }
            if let Some(i) = ib {
                let acc = acc_grad(store, i, la);
                for (q, gv) in acc.iter_mut().zip(g) {
                    *q -= gv;
                }
            }
        }),
    )
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let vals = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    let (ia, ib, la) = (a.node_id(), b.node_id(), a.len());
    let (da, db) = (a.data_rc(), b.data_rc());
    attach(
        Tensor::from_raw(a.shape().to_vec(), vals),
        &[a, b],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for k in 0..la {
                    acc[k] += g[k] * db[k];
                }
            }
            if let Some(i) = ib {
                let acc = acc_grad(store, i, la);
                for k in 0..la {
                    acc[k] += g[k] * da[k];
                }
            }
        }),
    )
}

/// Multiply by a compile-time constant scalar.
pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let vals = a.values().iter().map(|x| x * c).collect();
    let (ia, la) = (a.node_id(), a.len());
    attach(
        Tensor::from_raw(a.shape().to_vec(), vals),
        &[a],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for k in 0..la {
                    acc[k] += g[k] * c;
                }
            }
        }),
    )
    .expect("single-input op cannot mix tapes")
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let vals = a.values().iter().map(|x| x + c).collect();
    let (ia, la) = (a.node_id(), a.len());
    attach(
        Tensor::from_raw(a.shape().to_vec(), vals),
        &[a],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for k in 0..la {
                    acc[k] += g[k];
                }
            }
        }),
    )
    .expect("single-input op cannot mix tapes")
}

/// Matrix product of 2-D tensors. Backward: dA += dC·Bᵀ, dB += Aᵀ·dC.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Dim(format!("matmul: incompatible shapes {sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let vals = matmul_kernel(a.values(), b.values(), m, k, n);
    let (ia, ib) = (a.node_id(), b.node_id());
    let (da, db) = (a.data_rc(), b.data_rc());
    attach(
        Tensor::from_raw(vec![m, n], vals),
        &[a, b],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, m * k);
                matmul_nt_acc(g, &db, m, n, k, acc);
            }
            if let Some(i) = ib {
                let acc = acc_grad(store, i, k * n);
                matmul_tn_acc(&da, g, m, k, n, acc);
            }
        }),
    )
}

/// 2-D transpose.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::Dim(format!("transpose: expected 2-D, got {s:?}")));
    }
    let (m, n) = (s[0], s[1]);
    let av = a.values();
    let mut vals = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            vals[j * m + i] = av[i * n + j];
        }
    }
    let ia = a.node_id();
    attach(
        Tensor::from_raw(vec![n, m], vals),
        &[a],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, m * n);
                for r in 0..n {
                    for c in 0..m {
                        acc[c * n + r] += g[r * m + c];
                    }
                }
            }
        }),
    )
}

/// Softmax along the trailing axis, max-subtracted for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let nd = x.shape().len();
    if axis != nd - 1 {
        return Err(Error::Dim(format!(
            "softmax: only the trailing axis is supported (got axis {axis} of {nd})"
        )));
    }
    let (rows, n) = rows_cols(x);
    if n == 0 {
        return Err(Error::Dim("softmax over empty axis".into()));
    }
    let xv = x.values();
    let mut vals = vec![0.0; rows * n];
    for r in 0..rows {
        let row = &xv[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut vals[r * n..(r + 1) * n];
        let mut z = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    let out = Tensor::from_raw(x.shape().to_vec(), vals);
    let ia = x.node_id();
    let s = out.data_rc();
    let la = x.len();
    attach(
        out,
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for r in 0..la / n {
                    let (gr, sr) = (&g[r * n..(r + 1) * n], &s[r * n..(r + 1) * n]);
                    let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                    let ar = &mut acc[r * n..(r + 1) * n];
                    for j in 0..n {
                        ar[j] += sr[j] * (gr[j] - dot);
                    }
                }
            }
        }),
    )
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise log(sigmoid(x)) computed as -softplus(-x).
pub fn log_sigmoid(x: &Tensor) -> Tensor {
    let vals = x.values().iter().map(|&v| -softplus(-v)).collect();
    let (ia, la) = (x.node_id(), x.len());
    let dx = x.data_rc();
    attach(
        Tensor::from_raw(x.shape().to_vec(), vals),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for k in 0..la {
                    acc[k] += g[k] * sigmoid(-dx[k]);
                }
            }
        }),
    )
    .expect("single-input op cannot mix tapes")
}

/// Elementwise natural log; inputs must be positive.
pub fn ln(x: &Tensor) -> Result<Tensor> {
    if x.values().iter().any(|&v| v <= 0.0) {
        return Err(Error::Numeric("ln of non-positive value".into()));
    }
    let vals = x.values().iter().map(|v| v.ln()).collect();
    let (ia, la) = (x.node_id(), x.len());
    let dx = x.data_rc();
    attach(
        Tensor::from_raw(x.shape().to_vec(), vals),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for k in 0..la {
                    acc[k] += g[k] / dx[k];
                }
            }
        }),
    )
}

/// Elementwise log(1 - exp(x)) for x < 0 (log of one-minus-probability).
pub fn log1m_exp(x: &Tensor) -> Result<Tensor> {
    if x.values().iter().any(|&v| v >= 0.0) {
        return Err(Error::Numeric("log1m_exp requires strictly negative inputs".into()));
    }
    const LN2: f64 = std::f64::consts::LN_2;
    let vals: Vec<f64> = x
        .values()
        .iter()
        .map(|&v| if v < -LN2 { (-v.exp()).ln_1p() } else { (-v.exp_m1()).ln() })
        .collect();
    let out = Tensor::from_raw(x.shape().to_vec(), vals);
    let (ia, la) = (x.node_id(), x.len());
    let dx = x.data_rc();
    let dy = out.data_rc();
    attach(
        out,
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for k in 0..la {
                    // d/dx ln(1-e^x) = -e^x / (1-e^x) = -e^(x-y)
                    acc[k] += g[k] * -((dx[k] - dy[k]).exp());
                }
            }
        }),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    let vals = x.values().iter().map(|&v| v.max(0.0)).collect();
    let (ia, la) = (x.node_id(), x.len());
    let dx = x.data_rc();
    attach(
        Tensor::from_raw(x.shape().to_vec(), vals),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for k in 0..la {
                    if dx[k] > 0.0 {
                        acc[k] += g[k];
                    }
                }
            }
        }),
    )
    .expect("single-input op cannot mix tapes")
}

pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.values().iter().sum();
    let (ia, la) = (x.node_id(), x.len());
    attach(
        Tensor::from_raw(vec![1], vec![s]),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for q in acc.iter_mut() {
                    *q += g[0];
                }
            }
        }),
    )
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let n = x.len() as f64;
    Ok(scale(&sum_all(x)?, 1.0 / n))
}

/// Contiguous column slice of a 2-D tensor.
pub fn slice_cols(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || hi > s[1] || lo >= hi {
        return Err(Error::Dim(format!("slice_cols [{lo},{hi}) of shape {s:?}")));
    }
    let (rows, n) = (s[0], s[1]);
    let w = hi - lo;
    let xv = x.values();
    let mut vals = Vec::with_capacity(rows * w);
    for r in 0..rows {
        vals.extend_from_slice(&xv[r * n + lo..r * n + hi]);
    }
    let ia = x.node_id();
    attach(
        Tensor::from_raw(vec![rows, w], vals),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, rows * n);
                for r in 0..rows {
                    for j in 0..w {
                        acc[r * n + lo + j] += g[r * w + j];
                    }
                }
            }
        }),
    )
}

/// Contiguous row slice of a 2-D tensor.
pub fn slice_rows(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || hi > s[0] || lo >= hi {
        return Err(Error::Dim(format!("slice_rows [{lo},{hi}) of shape {s:?}")));
    }
    let n = s[1];
    let vals = x.values()[lo * n..hi * n].to_vec();
    let (ia, total) = (x.node_id(), x.len());
    attach(
        Tensor::from_raw(vec![hi - lo, n], vals),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, total);
                for (q, gv) in acc[lo * n..hi * n].iter_mut().zip(g) {
                    *q += gv;
                }
            }
        }),
    )
}

/// Column-wise concatenation of 2-D tensors with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dim("concat_cols of zero tensors".into()));
    }
    let rows = parts[0].shape()[0];
    for p in parts {
        if p.shape().len() != 2 || p.shape()[0] != rows {
            return Err(Error::Dim("concat_cols: row counts differ".into()));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut vals = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            vals.extend_from_slice(&p.values()[r * w..(r + 1) * w]);
        }
    }
    let ids: Vec<(Option<usize>, usize)> =
        parts.iter().zip(&widths).map(|(p, &w)| (p.node_id(), w)).collect();
    attach(
        Tensor::from_raw(vec![rows, total], vals),
        parts,
        Box::new(move |g, store| {
            let mut off = 0;
            for &(id, w) in &ids {
                if let Some(i) = id {
                    let acc = acc_grad(store, i, rows * w);
                    for r in 0..rows {
                        for j in 0..w {
                            acc[r * w + j] += g[r * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }),
    )
}

/// Multiply each column j of a 2-D tensor by the constant c[j].
pub fn scale_cols(x: &Tensor, c: &[f64]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[1] != c.len() {
        return Err(Error::Dim(format!("scale_cols: shape {s:?} vs {} factors", c.len())));
    }
    let (rows, n) = (s[0], s[1]);
    let xv = x.values();
    let mut vals = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            vals[r * n + j] = xv[r * n + j] * c[j];
        }
    }
    let ia = x.node_id();
    let c: Rc<Vec<f64>> = Rc::new(c.to_vec());
    attach(
        Tensor::from_raw(vec![rows, n], vals),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, rows * n);
                for r in 0..rows {
                    for j in 0..n {
                        acc[r * n + j] += g[r * n + j] * c[j];
                    }
                }
            }
        }),
    )
}

/// Multiply row n of `y` [N×b] by the scalar w[n]; both differentiable.
pub fn scale_rows_by_col(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (sy, sw) = (y.shape(), w.shape());
    let rows = sy[0];
    if sy.len() != 2 || w.len() != rows {
        return Err(Error::Dim(format!("scale_rows_by_col: {sy:?} vs {sw:?}")));
    }
    let b = sy[1];
    let (yv, wv) = (y.values(), w.values());
    let mut vals = vec![0.0; rows * b];
    for r in 0..rows {
        for j in 0..b {
            vals[r * b + j] = yv[r * b + j] * wv[r];
        }
    }
    let (iy, iw) = (y.node_id(), w.node_id());
    let (dy, dw) = (y.data_rc(), w.data_rc());
    attach(
        Tensor::from_raw(vec![rows, b], vals),
        &[y, w],
        Box::new(move |g, store| {
            if let Some(i) = iy {
                let acc = acc_grad(store, i, rows * b);
                for r in 0..rows {
                    for j in 0..b {
                        acc[r * b + j] += g[r * b + j] * dw[r];
                    }
                }
            }
            if let Some(i) = iw {
                let acc = acc_grad(store, i, rows);
                for r in 0..rows {
                    let mut s = 0.0;
                    for j in 0..b {
                        s += g[r * b + j] * dy[r * b + j];
                    }
                    acc[r] += s;
                }
            }
        }),
    )
}

/// Column means of a 2-D tensor: [T×n] -> [n].
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Dim(format!("mean_rows: expected 2-D, got {s:?}")));
    }
    let (rows, n) = (s[0], s[1]);
    let xv = x.values();
    let mut vals = vec![0.0; n];
    for r in 0..rows {
        for j in 0..n {
            vals[j] += xv[r * n + j];
        }
    }
    for v in vals.iter_mut() {
        *v /= rows as f64;
    }
    let ia = x.node_id();
    attach(
        Tensor::from_raw(vec![n], vals),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, rows * n);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for j in 0..n {
                        acc[r * n + j] += g[j] * inv;
                    }
                }
            }
        }),
    )
}

/// Add a bias row vector b[n] to every row of x [T×n].
pub fn add_row_broadcast(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sx, n) = (x.shape(), b.len());
    if sx.len() != 2 || sx[1] != n {
        return Err(Error::Dim(format!("add_row_broadcast: {sx:?} vs bias {n}")));
    }
    let rows = sx[0];
    let (xv, bv) = (x.values(), b.values());
    let mut vals = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            vals[r * n + j] = xv[r * n + j] + bv[j];
        }
    }
    let (ix, ib) = (x.node_id(), b.node_id());
    attach(
        Tensor::from_raw(vec![rows, n], vals),
        &[x, b],
        Box::new(move |g, store| {
            if let Some(i) = ix {
                let acc = acc_grad(store, i, rows * n);
                for (q, gv) in acc.iter_mut().zip(g) {
                    *q += gv;
                }
            }
            if let Some(i) = ib {
                let acc = acc_grad(store, i, n);
                for r in 0..rows {
                    for j in 0..n {
                        acc[j] += g[r * n + j];
                    }
                }
            }
        }),
    )
}

/// Row lookup: out[t] = table[tokens[t]]; backward scatter-adds into the table.
pub fn embed(table: &Tensor, tokens: &[usize]) -> Result<Tensor> {
    let s = table.shape();
    if s.len() != 2 {
        return Err(Error::Dim(format!("embed: table must be 2-D, got {s:?}")));
    }
    let (v, d) = (s[0], s[1]);
    if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
        return Err(Error::Data(format!("token id {bad} out of range (vocab {v})")));
    }
    let tv = table.values();
    let rows = tokens.len();
    let mut vals = Vec::with_capacity(rows * d);
    for &t in tokens {
        vals.extend_from_slice(&tv[t * d..(t + 1) * d]);
    }
    let ia = table.node_id();
    let toks: Rc<Vec<usize>> = Rc::new(tokens.to_vec());
    attach(
        Tensor::from_raw(vec![rows, d], vals),
        &[table],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, v * d);
                for (r, &t) in toks.iter().enumerate() {
                    for j in 0..d {
                        acc[t * d + j] += g[r * d + j];
                    }
                }
            }
        }),
    )
}

const RMS_EPS: f64 = 1e-8;

/// Row-wise RMS normalization with a learned gain: y = x / rms(x) * g.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let d = *s.last().unwrap();
    if gain.len() != d {
        return Err(Error::Dim(format!("rmsnorm: dim {d} vs gain {}", gain.len())));
    }
    let (rows, _) = rows_cols(x);
    let (xv, gv) = (x.values(), gain.values());
    let mut vals = vec![0.0; rows * d];
    let mut rms = vec![0.0; rows];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        rms[r] = (ms + RMS_EPS).sqrt();
        for j in 0..d {
            vals[r * d + j] = row[j] / rms[r] * gv[j];
        }
    }
    let (ix, ig) = (x.node_id(), gain.node_id());
    let (dx, dg) = (x.data_rc(), gain.data_rc());
    let rms = Rc::new(rms);
    attach(
        Tensor::from_raw(s.to_vec(), vals),
        &[x, gain],
        Box::new(move |g, store| {
            for r in 0..rms.len() {
                let (row, gr) = (&dx[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                let inv_r = 1.0 / rms[r];
                if let Some(i) = ix {
                    let dot: f64 = (0..d).map(|j| gr[j] * dg[j] * row[j]).sum();
                    let coef = dot * inv_r * inv_r * inv_r / d as f64;
                    let acc = acc_grad(store, i, dx.len());
                    let ar = &mut acc[r * d..(r + 1) * d];
                    for j in 0..d {
                        ar[j] += gr[j] * dg[j] * inv_r - row[j] * coef;
                    }
                }
                if let Some(i) = ig {
                    let acc = acc_grad(store, i, d);
                    for j in 0..d {
                        acc[j] += gr[j] * row[j] * inv_r;
                    }
                }
            }
        }),
    )
}

/// Per-row log-softmax picked at a target index: out[t] = log softmax(x[t])[tgt[t]].
pub fn log_softmax_gather(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Dim(format!(
            "log_softmax_gather: logits {s:?} vs {} targets",
            targets.len()
        )));
    }
    let (rows, v) = (s[0], s[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Data(format!("target id {bad} out of range (vocab {v})")));
    }
    let xv = logits.values();
    let mut vals = vec![0.0; rows];
    let mut soft = vec![0.0; rows * v];
    for r in 0..rows {
        let row = &xv[r * v..(r + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &x) in soft[r * v..(r + 1) * v].iter_mut().zip(row) {
            *o = (x - max).exp();
            z += *o;
        }
        for o in soft[r * v..(r + 1) * v].iter_mut() {
            *o /= z;
        }
        vals[r] = row[targets[r]] - max - z.ln();
    }
    let ia = logits.node_id();
    let soft = Rc::new(soft);
    let tgts: Rc<Vec<usize>> = Rc::new(targets.to_vec());
    attach(
        Tensor::from_raw(vec![rows], vals),
        &[logits],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, rows * v);
                for r in 0..rows {
                    let sr = &soft[r * v..(r + 1) * v];
                    let ar = &mut acc[r * v..(r + 1) * v];
                    for j in 0..v {
                        let ind = if j == tgts[r] { 1.0 } else { 0.0 };
                        ar[j] += g[r] * (ind - sr[j]);
                    }
                }
            }
        }),
    )
}

/// Shape change without touching data; identity backward.
pub fn reshape(x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.len() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Dim(format!(
            "reshape: {:?} -> {shape:?} changes element count",
            x.shape()
        )));
    }
    let (ia, la) = (x.node_id(), x.len());
    attach(
        Tensor::view(shape, x.data_rc()),
        &[x],
        Box::new(move |g, store| {
            if let Some(i) = ia {
                let acc = acc_grad(store, i, la);
                for (q, gv) in acc.iter_mut().zip(g) {
                    *q += gv;
                }
            }
        }),
    )
}

/// Mean of a list of same-shape tensors.
pub fn mean_of(parts: &[Tensor]) -> Result<Tensor> {
    let mut it = parts.iter();
    let first = it.next().ok_or_else(|| Error::Contract("mean_of empty list".into()))?;
    let mut acc = first.clone();
    for t in it {
        acc = add(&acc, t)?;
    }
    Ok(scale(&acc, 1.0 / parts.len() as f64))
}

// ---- raw kernels (shared with the fused adapter paths) ----

/// C[m×n] = A[m×k] · B[k×n], ikj loop order, ascending-k accumulation.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut c);
    c
}

pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    // 4×8 register tile: four A rows share each pass over B, and per tile the
    // partial sums live in registers across the whole k loop, written back to
    // C once. Per output element the sum still runs over ascending k.
    const JB: usize = 8;
    let mut i = 0;
    while i + 4 <= m {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        let mut jj = 0;
        while jj + JB <= n {
            let mut acc = [[0.0f64; JB]; 4];
            for p in 0..k {
                let xs = [a0[p], a1[p], a2[p], a3[p]];
                let brow = &b[p * n + jj..p * n + jj + JB];
                for (accr, &xr) in acc.iter_mut().zip(&xs) {
                    for (aj, &bj) in accr.iter_mut().zip(brow) {
                        *aj += xr * bj;
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + jj..(i + r) * n + jj + JB];
                for (cj, &aj) in crow.iter_mut().zip(accr) {
                    *cj += aj;
                }
            }
            jj += JB;
        }
        for j in jj..n {
            for (r, ar) in [a0, a1, a2, a3].into_iter().enumerate() {
                let mut s = 0.0;
                for p in 0..k {
                    s += ar[p] * b[p * n + j];
                }
                c[(i + r) * n + j] += s;
            }
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// C[m×n] += A[m×k] · B[n×k]ᵀ (dot products along k).
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// C[k×n] += A[m×k]ᵀ · B[m×n].
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}
