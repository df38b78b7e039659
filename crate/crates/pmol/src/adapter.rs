//! The PMoL layer: K grouped LoRA experts behind a router with an empty
//! expert slot, and two numerically equivalent forward paths.
//!
//! The sequential path loops expert by expert over individual tokens and is
//! the reference implementation. The parallel path packs all expert matrices
//! into stacked tensors and evaluates them with batched contractions, no
//! per-expert branching inside the token loop.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::ops::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::numcore::tensor::{acc_grad, merged_tape, NodeRef, Tensor};
use crate::numcore::{Rng, Tape};

/// One low-rank expert: A is [a×r], B is [r×b]; contribution is (x·A)·B.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraExpert {
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub a_mat: Vec<f64>,
    pub b_mat: Vec<f64>,
}

impl LoraExpert {
    pub fn a_tensor(&self) -> Tensor {
        Tensor::from_raw(vec![self.in_dim, self.rank], self.a_mat.clone())
    }

    pub fn b_tensor(&self) -> Tensor {
        Tensor::from_raw(vec![self.rank, self.out_dim], self.b_mat.clone())
    }
}

/// Expert index range [start, end) owned by one preference, plus its soft
/// constraint coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupEntry {
    pub preference_id: usize,
    pub start: usize,
    pub end: usize,
    pub sc: f64,
}

/// Maps preference ids to disjoint expert ranges covering [0, K).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertGroupTable {
    entries: Vec<GroupEntry>,
    num_experts: usize,
}

impl ExpertGroupTable {
    pub fn new(entries: Vec<GroupEntry>, num_experts: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("expert group table is empty".into()));
        }
        let mut covered = vec![false; num_experts];
        for e in &entries {
            if e.start >= e.end || e.end > num_experts {
                return Err(Error::Config(format!(
                    "group range [{}, {}) invalid for K={num_experts}",
                    e.start, e.end
                )));
            }
            if !(e.sc > 0.0 && e.sc <= 1.0) {
                return Err(Error::Config(format!(
                    "soft constraint coefficient {} outside (0, 1]",
                    e.sc
                )));
            }
            for slot in covered[e.start..e.end].iter_mut() {
                if *slot {
                    return Err(Error::Config(format!(
                        "group range [{}, {}) overlaps another group",
                        e.start, e.end
                    )));
                }
                *slot = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Config("group ranges do not cover all experts".into()));
        }
        if entries
            .iter()
            .enumerate()
            .any(|(i, e)| entries.iter().skip(i + 1).any(|f| f.preference_id == e.preference_id))
        {
            return Err(Error::Config("duplicate preference id in group table".into()));
        }
        Ok(ExpertGroupTable { entries, num_experts })
    }

    /// Even split: `num_prefs` groups of `per_group` experts, same sc each.
    pub fn even(num_prefs: usize, per_group: usize, sc: f64) -> Result<Self> {
        let entries = (0..num_prefs)
            .map(|i| GroupEntry {
                preference_id: i,
                start: i * per_group,
                end: (i + 1) * per_group,
                sc,
            })
            .collect();
        Self::new(entries, num_prefs * per_group)
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn entries(&self) -> &[GroupEntry] {
        &self.entries
    }

    pub fn entry_for(&self, preference_id: usize) -> Result<&GroupEntry> {
        self.entries
            .iter()
            .find(|e| e.preference_id == preference_id)
            .ok_or_else(|| Error::Data(format!("unknown preference id {preference_id}")))
    }

    pub fn set_sc(&mut self, preference_id: usize, sc: f64) -> Result<()> {
        if !(sc > 0.0 && sc <= 1.0) {
            return Err(Error::Config(format!("sc {sc} outside (0, 1]")));
        }
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.preference_id == preference_id)
            .ok_or_else(|| Error::Data(format!("unknown preference id {preference_id}")))?;
        e.sc = sc;
        Ok(())
    }
}

/// Linear router emitting K+1 weights; index K is the empty expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Router {
    pub in_dim: usize,
    /// K + 1.
    pub num_weights: usize,
    pub w_r: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Packed copies of the per-expert matrices for the parallel path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stacked {
    /// [a × K·r]: expert k occupies columns k·r .. (k+1)·r.
    pub a_pack: Vec<f64>,
    /// [K·r × b]: expert k occupies rows k·r .. (k+1)·r.
    pub b_pack: Vec<f64>,
    version: u64,
}

/// One adapted linear layer: experts + router + group table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PmolLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    experts: Vec<LoraExpert>,
    router: Router,
    pub groups: ExpertGroupTable,
    stacked: Option<Stacked>,
    version: u64,
}

impl PmolLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn experts(&self) -> &[LoraExpert] {
        &self.experts
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    /// Mutable access bumps the version so a stale stacked cache is detectable.
    pub fn experts_mut(&mut self) -> &mut Vec<LoraExpert> {
        self.version += 1;
        &mut self.experts
    }

    pub fn router_mut(&mut self) -> &mut Router {
        self.version += 1;
        &mut self.router
    }

    pub fn stacked(&self) -> Option<&Stacked> {
        self.stacked.as_ref()
    }

    fn fresh_stacked(&self) -> Result<&Stacked> {
        match &self.stacked {
            Some(s) if s.version == self.version => Ok(s),
            Some(_) => Err(Error::Internal(
                "stacked expert cache is stale; call stack_experts after mutation".into(),
            )),
            None => Err(Error::Internal(
                "stacked expert cache missing; call stack_experts first".into(),
            )),
        }
    }

    fn pack(&self) -> (Vec<f64>, Vec<f64>) {
        let (a, b, r, k) = (self.in_dim, self.out_dim, self.rank, self.experts.len());
        let kr = k * r;
        let mut a_pack = vec![0.0; a * kr];
        let mut b_pack = vec![0.0; kr * b];
        for (ki, e) in self.experts.iter().enumerate() {
            for row in 0..a {
                a_pack[row * kr + ki * r..row * kr + (ki + 1) * r]
                    .copy_from_slice(&e.a_mat[row * r..(row + 1) * r]);
            }
            b_pack[ki * r * b..(ki + 1) * r * b].copy_from_slice(&e.b_mat);
        }
        (a_pack, b_pack)
    }

    /// Tensor views of all trainable pieces, watched on `tape` when given.
    pub fn leaves(&self, tape: Option<&Tape>) -> Result<PmolLeaves> {
        let (a_pack, b_pack) = self.pack();
        let kr = self.experts.len() * self.rank;
        let kp1 = self.router.num_weights;
        let mk = |shape: Vec<usize>, vals: Vec<f64>| -> Result<Tensor> {
            let t = Tensor::new(shape, vals)?;
            Ok(match tape {
                Some(tape) => tape.watch(&t),
                None => t,
            })
        };
        Ok(PmolLeaves {
            a_pack: mk(vec![self.in_dim, kr], a_pack)?,
            b_pack: mk(vec![kr, self.out_dim], b_pack)?,
            w_r: mk(vec![self.router.in_dim, kp1], self.router.w_r.clone())?,
            bias: mk(vec![kp1], self.router.bias.clone())?,
            num_experts: self.experts.len(),
            rank: self.rank,
        })
    }
}

/// Trainable tensors of one layer for a single forward/backward transaction.
#[derive(Clone)]
pub struct PmolLeaves {
    pub a_pack: Tensor,
    pub b_pack: Tensor,
    pub w_r: Tensor,
    pub bias: Tensor,
    pub num_experts: usize,
    pub rank: usize,
}

/// Builds a layer: A ~ Gaussian(0, 1/r), B = 0, router W_r ~ Gaussian(0, 0.02),
/// bias 0. A freshly initialized layer contributes exactly zero.
pub fn init_pmol_layer(
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    groups: ExpertGroupTable,
    rng: &mut Rng,
) -> Result<PmolLayer> {
    let k = groups.num_experts();
    if rank == 0 || rank > in_dim.min(out_dim) / 2 {
        return Err(Error::Config(format!(
            "rank {rank} not in [1, min({in_dim}, {out_dim})/2]"
        )));
    }
    if k >= 128 {
        return Err(Error::Config(format!(
            "expert count {k} >= 128; large expert pools leave most experts with vanishing weight"
        )));
    }
    let a_std = (1.0 / rank as f64).sqrt();
    let experts = (0..k)
        .map(|_| LoraExpert {
            in_dim,
            out_dim,
            rank,
            a_mat: rng.normal_vec(in_dim * rank, 0.0, a_std),
            b_mat: vec![0.0; rank * out_dim],
        })
        .collect();
    let router = Router {
        in_dim,
        num_weights: k + 1,
        w_r: rng.normal_vec(in_dim * (k + 1), 0.0, 0.02),
        bias: vec![0.0; k + 1],
    };
    let mut layer = PmolLayer {
        in_dim,
        out_dim,
        rank,
        experts,
        router,
        groups,
        stacked: None,
        version: 0,
    };
    stack_experts(&mut layer);
    Ok(layer)
}

/// (Re)packs the stacked tensors from the individual expert matrices.
pub fn stack_experts(layer: &mut PmolLayer) {
    let (a_pack, b_pack) = layer.pack();
    layer.stacked = Some(Stacked { a_pack, b_pack, version: layer.version });
}

/// Router weights: softmax(x·W_r + bias) over K+1 slots, per row of x.
pub fn router_forward(layer: &PmolLayer, x: &Tensor) -> Result<Tensor> {
    let leaves = layer.leaves(None)?;
    router_probs(&leaves, x)
}

pub fn router_probs(leaves: &PmolLeaves, x: &Tensor) -> Result<Tensor> {
    let rows = x.len() / *x.shape().last().unwrap();
    let flat = ops::reshape(x, vec![rows, *x.shape().last().unwrap()])?;
    let logits = ops::add_row_broadcast(&ops::matmul(&flat, &leaves.w_r)?, &leaves.bias)?;
    ops::softmax(&logits, 1)
}

/// Low-rank product (x·A)·B, never materializing A·B.
pub fn lora_forward(expert: &LoraExpert, x: &Tensor) -> Result<Tensor> {
    ops::matmul(&ops::matmul(x, &expert.a_tensor())?, &expert.b_tensor())
}

/// Reference path: W0·x plus an explicit loop over experts.
pub fn pmol_forward_sequential(layer: &PmolLayer, w0: &Tensor, x: &Tensor) -> Result<Tensor> {
    let leaves = layer.leaves(None)?;
    let (out, _) = forward_with_leaves(&leaves, w0, x, Path::Sequential)?;
    Ok(out)
}

/// Batched path using the stacked tensors; errors if the cache is stale.
pub fn pmol_forward_parallel(layer: &PmolLayer, w0: &Tensor, x: &Tensor) -> Result<Tensor> {
    layer.fresh_stacked()?;
    let leaves = layer.leaves(None)?;
    let (out, _) = forward_with_leaves(&leaves, w0, x, Path::Parallel)?;
    Ok(out)
}

/// Which expert evaluation strategy to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Path {
    Sequential,
    Parallel,
}

/// Full adapted-layer forward. Returns (output, router weights over tokens).
/// Input may carry leading batch dims; they are flattened to token rows.
pub fn forward_with_leaves(
    leaves: &PmolLeaves,
    w0: &Tensor,
    x: &Tensor,
    path: Path,
) -> Result<(Tensor, Tensor)> {
    let a = *x.shape().last().ok_or_else(|| Error::Dim("empty input shape".into()))?;
    if a != leaves.a_pack.shape()[0] {
        return Err(Error::Dim(format!(
            "adapter input dim {a} vs expected {}",
            leaves.a_pack.shape()[0]
        )));
    }
    let rows = x.len() / a;
    let lead: Vec<usize> = x.shape()[..x.shape().len() - 1].to_vec();
    let flat = ops::reshape(x, vec![rows, a])?;
    let w = router_probs(leaves, &flat)?;
    let base = ops::matmul(&flat, w0)?;
    let delta = match path {
        Path::Parallel => moe_delta_parallel(&flat, &leaves.a_pack, &leaves.b_pack, &w, leaves.num_experts, leaves.rank)?,
        Path::Sequential => moe_delta_sequential(&flat, &leaves.a_pack, &leaves.b_pack, &w, leaves.num_experts, leaves.rank)?,
    };
    let out = ops::add(&base, &delta)?;
    let b = out.shape()[1];
    let mut shape = lead;
    shape.push(b);
    Ok((ops::reshape(&out, shape)?, w))
}

/// Batched expert contraction. Folds the router weights into the low-rank
/// activations so the whole mixture is two full-width products:
/// U = x·A_pack, Us[row, k·r+j] = w[row, k]·U[row, k·r+j], out = Us·B_pack.
pub fn moe_delta_parallel(
    x: &Tensor,
    a_pack: &Tensor,
    b_pack: &Tensor,
    w: &Tensor,
    k_experts: usize,
    rank: usize,
) -> Result<Tensor> {
    let (n, a) = dims2(x, "moe_delta_parallel x")?;
    let kr = k_experts * rank;
    let b = b_pack.shape()[1];
    check_moe_shapes(a_pack, b_pack, w, n, a, kr, k_experts)?;

    let (xv, av, bv, wv) = (x.values(), a_pack.values(), b_pack.values(), w.values());
    let kp1 = k_experts + 1;

    // Row-blocked so the low-rank activations stay cache-resident between the
    // two products; the full U/Us buffers are only kept when a tape needs them
    // for the backward pass.
    let taped = [x, a_pack, b_pack, w].iter().any(|t| t.node_id().is_some());
    const RB: usize = 64;
    let mut out = vec![0.0; n * b];
    let (mut u, mut us) = if taped {
        (vec![0.0; n * kr], vec![0.0; n * kr])
    } else {
        (Vec::new(), Vec::new())
    };
    let mut u_blk = vec![0.0; RB.min(n) * kr];
    let mut i = 0;
    while i < n {
        let rows = RB.min(n - i);
        let ub = &mut u_blk[..rows * kr];
        ub.iter_mut().for_each(|q| *q = 0.0);
        matmul_acc(&xv[i * a..(i + rows) * a], av, rows, a, kr, ub);
        if taped {
            u[i * kr..(i + rows) * kr].copy_from_slice(ub);
        }
        // scale each row's expert blocks by its router weights, in place
        for r in 0..rows {
            let wrow = &wv[(i + r) * kp1..(i + r) * kp1 + k_experts];
            let urow = &mut ub[r * kr..(r + 1) * kr];
            for (k, &wnk) in wrow.iter().enumerate() {
                for q in &mut urow[k * rank..(k + 1) * rank] {
                    *q *= wnk;
                }
            }
        }
        if taped {
            us[i * kr..(i + rows) * kr].copy_from_slice(ub);
        }
        matmul_acc(ub, bv, rows, kr, b, &mut out[i * b..(i + rows) * b]);
        i += rows;
    }

    let (ix, ia, ib, iw) = (x.node_id(), a_pack.node_id(), b_pack.node_id(), w.node_id());
    let (dx, da, db, dw) = (x.data_rc(), a_pack.data_rc(), b_pack.data_rc(), w.data_rc());
    let (u, us) = (Rc::new(u), Rc::new(us));
    attach_fused(
        Tensor::from_raw(vec![n, b], out),
        &[x, a_pack, b_pack, w],
        Box::new(move |g, store| {
            // dUs = g · B_packᵀ, then split by the product rule:
            // dw[row, k] = Σ_j U[row, k·r+j]·dUs[row, k·r+j],
            // dU = w (broadcast over rank) ⊙ dUs.
            let mut dus = vec![0.0; n * kr];
            matmul_nt_acc(&g, &db, n, b, kr, &mut dus);
            if let Some(i) = iw {
                let acc = acc_grad(store, i, n * kp1);
                for row in 0..n {
                    for k in 0..k_experts {
                        let lo = row * kr + k * rank;
                        let mut s = 0.0;
                        for (uq, dq) in u[lo..lo + rank].iter().zip(&dus[lo..lo + rank]) {
                            s += uq * dq;
                        }
                        acc[row * kp1 + k] += s;
                    }
                }
            }
            if let Some(i) = ib {
                let acc = acc_grad(store, i, kr * b);
                matmul_tn_acc(&us, &g, n, kr, b, acc);
            }
            if ix.is_some() || ia.is_some() {
                // reuse dus as dU in place
                for row in 0..n {
                    let wrow = &dw[row * kp1..row * kp1 + k_experts];
                    let drow = &mut dus[row * kr..(row + 1) * kr];
                    for (k, &wnk) in wrow.iter().enumerate() {
                        for d in &mut drow[k * rank..(k + 1) * rank] {
                            *d *= wnk;
                        }
                    }
                }
                if let Some(i) = ia {
                    let acc = acc_grad(store, i, a * kr);
                    matmul_tn_acc(&dx, &dus, n, a, kr, acc);
                }
                if let Some(i) = ix {
                    let acc = acc_grad(store, i, n * a);
                    matmul_nt_acc(&dus, &da, n, kr, a, acc);
                }
            }
        }),
    )
}

/// Reference expert contraction: an explicit loop over experts,
/// composed from the generic differentiable ops. Each expert's low-rank
/// product is computed for the whole batch, scaled by its router column, and
/// accumulated — the obvious reference implementation, with one slice /
/// matmul / scale / add round trip (and its tensor allocations) per expert.
pub fn moe_delta_sequential(
    x: &Tensor,
    a_pack: &Tensor,
    b_pack: &Tensor,
    w: &Tensor,
    k_experts: usize,
    rank: usize,
) -> Result<Tensor> {
    let (n, a) = dims2(x, "moe_delta_sequential x")?;
    let kr = k_experts * rank;
    let b = b_pack.shape()[1];
    check_moe_shapes(a_pack, b_pack, w, n, a, kr, k_experts)?;

    let mut acc: Option<Tensor> = None;
    for k in 0..k_experts {
        let a_k = ops::slice_cols(a_pack, k * rank, (k + 1) * rank)?;
        let b_k = ops::slice_rows(b_pack, k * rank, (k + 1) * rank)?;
        let y_k = ops::matmul(&ops::matmul(x, &a_k)?, &b_k)?;
        let w_k = ops::slice_cols(w, k, k + 1)?;
        let term = ops::scale_rows_by_col(&y_k, &w_k)?;
        acc = Some(match acc {
            Some(t) => ops::add(&t, &term)?,
            None => term,
        });
    }
    match acc {
        Some(t) => Ok(t),
        None => Ok(Tensor::from_raw(vec![n, b], vec![0.0; n * b])),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Dim(format!("{what}: expected 2-D, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn check_moe_shapes(
    a_pack: &Tensor,
    b_pack: &Tensor,
    w: &Tensor,
    n: usize,
    a: usize,
    kr: usize,
    k_experts: usize,
) -> Result<()> {
    if a_pack.shape() != [a, kr] {
        return Err(Error::Dim(format!(
            "a_pack shape {:?}, expected [{a}, {kr}]",
            a_pack.shape()
        )));
    }
    if b_pack.shape()[0] != kr {
        return Err(Error::Dim(format!(
            "b_pack shape {:?}, expected [{kr}, b]",
            b_pack.shape()
        )));
    }
    if w.shape() != [n, k_experts + 1] {
        return Err(Error::Dim(format!(
            "router weights shape {:?}, expected [{n}, {}]",
            w.shape(),
            k_experts + 1
        )));
    }
    Ok(())
}

fn attach_fused(
    mut out: Tensor,
    inputs: &[&Tensor],
    back: crate::numcore::tensor::BackFn,
) -> Result<Tensor> {
    if let Some(tape) = merged_tape(inputs)? {
        let id = tape.record(out.len(), Some(back));
        out.node = Some(NodeRef { tape, id });
    }
    Ok(out)
}
