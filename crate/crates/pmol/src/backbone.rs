//! Tiny decoder-only transformer used as the frozen base model.
//!
//! Each block is pre-norm attention + FFN; PMoL layers hook into the FFN
//! down-projection, with the router consuming the same activation the
//! down-projection consumes. Also provides the sequence log-probability
//! utilities the preference losses need.

use serde::{Deserialize, Serialize};

use crate::adapter::{forward_with_leaves, Path, PmolLayer, PmolLeaves};
use crate::error::{Error, Result};
use crate::numcore::ops;
use crate::numcore::{Rng, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all backbone dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub gain1: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
    pub gain2: Vec<f64>,
}

/// All backbone parameters. When `frozen` is set the optimizer must skip
/// them; forward passes still differentiate *through* them so upstream
/// adapters receive gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneParams {
    pub cfg: BackboneConfig,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    pub out_proj: Vec<f64>,
    pub frozen: bool,
}

impl BackboneParams {
    /// Canonical parameter order, shared by `tensors` and the optimizer.
    pub fn ordered_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            v.extend([
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.gain1, &mut l.w_up,
                &mut l.w_down, &mut l.gain2,
            ]);
        }
        v.push(&mut self.final_gain);
        v.push(&mut self.out_proj);
        v
    }

    /// Tensor views in canonical order; watched on `tape` when given.
    pub fn tensors(&self, tape: Option<&Tape>) -> Result<BackboneTensors> {
        let c = &self.cfg;
        let (v, d, ff) = (c.vocab_size, c.d_model, c.d_ff);
        let mk = |shape: Vec<usize>, vals: &Vec<f64>| -> Result<Tensor> {
            let t = Tensor::new(shape, vals.clone())?;
            Ok(match tape {
                Some(tape) => tape.watch(&t),
                None => t,
            })
        };
        Ok(BackboneTensors {
            cfg: c.clone(),
            tok_emb: mk(vec![v, d], &self.tok_emb)?,
            pos_emb: mk(vec![c.max_seq_len, d], &self.pos_emb)?,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    Ok(LayerTensors {
                        wq: mk(vec![d, d], &l.wq)?,
                        wk: mk(vec![d, d], &l.wk)?,
                        wv: mk(vec![d, d], &l.wv)?,
                        wo: mk(vec![d, d], &l.wo)?,
                        gain1: mk(vec![d], &l.gain1)?,
                        w_up: mk(vec![d, ff], &l.w_up)?,
                        w_down: mk(vec![ff, d], &l.w_down)?,
                        gain2: mk(vec![d], &l.gain2)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            final_gain: mk(vec![d], &self.final_gain)?,
            out_proj: mk(vec![d, v], &self.out_proj)?,
        })
    }
}

pub struct LayerTensors {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub gain1: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub gain2: Tensor,
}

pub struct BackboneTensors {
    pub cfg: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerTensors>,
    pub final_gain: Tensor,
    pub out_proj: Tensor,
}

impl BackboneTensors {
    pub fn ordered(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            v.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.gain1, &l.w_up, &l.w_down, &l.gain2]);
        }
        v.push(&self.final_gain);
        v.push(&self.out_proj);
        v
    }
}

/// Gaussian(0, 0.02) init for all weight matrices; norm gains start at 1.
pub fn init_backbone(cfg: &BackboneConfig, rng: &mut Rng) -> Result<BackboneParams> {
    cfg.validate()?;
    let (v, d, ff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            wq: rng.normal_vec(d * d, 0.0, 0.02),
            wk: rng.normal_vec(d * d, 0.0, 0.02),
            wv: rng.normal_vec(d * d, 0.0, 0.02),
            wo: rng.normal_vec(d * d, 0.0, 0.02),
            gain1: vec![1.0; d],
            w_up: rng.normal_vec(d * ff, 0.0, 0.02),
            w_down: rng.normal_vec(ff * d, 0.0, 0.02),
            gain2: vec![1.0; d],
        })
        .collect();
    Ok(BackboneParams {
        cfg: cfg.clone(),
        tok_emb: rng.normal_vec(v * d, 0.0, 0.02),
        pos_emb: rng.normal_vec(cfg.max_seq_len * d, 0.0, 0.02),
        layers,
        final_gain: vec![1.0; d],
        out_proj: rng.normal_vec(d * v, 0.0, 0.02),
        frozen: false,
    })
}

fn causal_mask(t: usize) -> Tensor {
    let mut vals = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            vals[i * t + j] = -1e30;
        }
    }
    Tensor::from_raw(vec![t, t], vals)
}

/// Full causal forward over `tokens`. Returns logits [T×vocab] and, when
/// adapters are attached, the router weight tensor of each layer.
pub fn forward_full(
    bt: &BackboneTensors,
    adapters: Option<(&[PmolLeaves], Path)>,
    tokens: &[usize],
) -> Result<(Tensor, Vec<Tensor>)> {
    let cfg = &bt.cfg;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Data("empty token sequence".into()));
    }
    if t > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some((leaves, _)) = adapters {
        if leaves.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "{} adapters for {} layers",
                leaves.len(),
                cfg.n_layers
            )));
        }
    }
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = causal_mask(t);

    let emb = ops::embed(&bt.tok_emb, tokens)?;
    let pos = ops::slice_rows(&bt.pos_emb, 0, t)?;
    let mut x = ops::add(&emb, &pos)?;
    let mut router_ws = Vec::new();

    for (li, l) in bt.layers.iter().enumerate() {
        // attention
        let h = ops::rmsnorm(&x, &l.gain1)?;
        let q = ops::matmul(&h, &l.wq)?;
        let k = ops::matmul(&h, &l.wk)?;
        let v = ops::matmul(&h, &l.wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hi in 0..cfg.n_heads {
            let (lo, hi_col) = (hi * dh, (hi + 1) * dh);
            let qh = ops::slice_cols(&q, lo, hi_col)?;
            let kh = ops::slice_cols(&k, lo, hi_col)?;
            let vh = ops::slice_cols(&v, lo, hi_col)?;
            let scores = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, scale);
            let att = ops::softmax(&ops::add(&scores, &mask)?, 1)?;
            heads.push(ops::matmul(&att, &vh)?);
        }
        let head_refs: Vec<&Tensor> = heads.iter().collect();
        let attn_out = ops::matmul(&ops::concat_cols(&head_refs)?, &l.wo)?;
        x = ops::add(&x, &attn_out)?;

        // FFN with the adapter on the down-projection
        let h2 = ops::rmsnorm(&x, &l.gain2)?;
        let u = ops::relu(&ops::matmul(&h2, &l.w_up)?);
        let down = match adapters {
            Some((leaves, path)) => {
                let (out, w) = forward_with_leaves(&leaves[li], &l.w_down, &u, path)?;
                router_ws.push(w);
                out
            }
            None => ops::matmul(&u, &l.w_down)?,
        };
        x = ops::add(&x, &down)?;
    }
    let logits = ops::matmul(&ops::rmsnorm(&x, &bt.final_gain)?, &bt.out_proj)?;
    Ok((logits, router_ws))
}

/// Convenience constant-mode forward from raw parameters.
pub fn forward_logits(
    params: &BackboneParams,
    adapters: Option<&[PmolLayer]>,
    tokens: &[usize],
) -> Result<Tensor> {
    let bt = params.tensors(None)?;
    let leaves = adapters
        .map(|ls| ls.iter().map(|l| l.leaves(None)).collect::<Result<Vec<_>>>())
        .transpose()?;
    let (logits, _) =
        forward_full(&bt, leaves.as_deref().map(|l| (l, Path::Parallel)), tokens)?;
    Ok(logits)
}

/// Sum of response-token log probabilities under the model, conditioning on
/// prompt ⊕ response prefix; prompt positions are excluded. Also returns the
/// per-layer router weights when adapters are attached.
pub fn sequence_log_prob_tensor(
    bt: &BackboneTensors,
    adapters: Option<(&[PmolLeaves], Path)>,
    prompt: &[usize],
    response: &[usize],
) -> Result<(Tensor, Vec<Tensor>)> {
    if response.is_empty() {
        return Err(Error::Data("empty response".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Data("empty prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(response);
    let (logits, router_ws) = forward_full(bt, adapters, &tokens)?;
    // position p-1 predicts response[0], ..., p+L-2 predicts response[L-1]
    let p = prompt.len();
    let rows = ops::slice_rows(&logits, p - 1, p + response.len() - 1)?;
    let per_tok = ops::log_softmax_gather(&rows, response)?;
    Ok((ops::sum_all(&per_tok)?, router_ws))
}

/// Constant-mode scalar wrapper around [`sequence_log_prob_tensor`].
pub fn sequence_log_prob(
    params: &BackboneParams,
    adapters: Option<&[PmolLayer]>,
    prompt: &[usize],
    response: &[usize],
) -> Result<f64> {
    let bt = params.tensors(None)?;
    let leaves = adapters
        .map(|ls| ls.iter().map(|l| l.leaves(None)).collect::<Result<Vec<_>>>())
        .transpose()?;
    let (lp, _) = sequence_log_prob_tensor(
        &bt,
        leaves.as_deref().map(|l| (l, Path::Parallel)),
        prompt,
        response,
    )?;
    Ok(lp.item())
}

/// Next-token cross-entropy training on a synthetic corpus; marks the
/// parameters frozen afterwards. Steps cycle through the corpus in order.
pub fn pretrain_backbone(
    params: &mut BackboneParams,
    corpus: &[Vec<usize>],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    if corpus.iter().any(|s| s.len() < 2) {
        return Err(Error::Data("pretraining sequences must have length >= 2".into()));
    }
    let mut opt = crate::trainengine::Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let seq = &corpus[step % corpus.len()];
        let tape = Tape::new();
        let bt = params.tensors(Some(&tape))?;
        let (logits, _) = forward_full(&bt, None, &seq[..seq.len() - 1])?;
        let lp = ops::log_softmax_gather(&logits, &seq[1..])?;
        let loss = ops::scale(&ops::mean_all(&lp)?, -1.0);
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("pretrain loss became {lv} at step {step}")));
        }
        losses.push(lv);
        crate::numcore::backward(&loss)?;
        let grads: Vec<Option<Tensor>> = bt.ordered().iter().map(|t| t.grad()).collect();
        for (slot, (param, grad)) in params.ordered_mut().into_iter().zip(grads).enumerate() {
            if let Some(g) = grad {
                opt.step(slot, param, g.values())
                    .map_err(|e| Error::Numeric(format!("pretrain param {slot}: {e}")))?;
            }
        }
    }
    params.frozen = true;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_pmol_layer, ExpertGroupTable};

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            seed: 0,
        }
    }

    fn adapters_for(cfg: &BackboneConfig, seed: u64) -> Vec<PmolLayer> {
        let mut rng = Rng::new(seed);
        (0..cfg.n_layers)
            .map(|_| {
                init_pmol_layer(
                    cfg.d_ff,
                    cfg.d_model,
                    2,
                    ExpertGroupTable::even(3, 2, 0.8).unwrap(),
                    &mut rng,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn init_validation_and_determinism() {
        let cfg = small_cfg();
        let p1 = init_backbone(&cfg, &mut Rng::new(3)).unwrap();
        let p2 = init_backbone(&cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(p1.tok_emb, p2.tok_emb);
        assert_eq!(p1.layers[1].w_down, p2.layers[1].w_down);

        let bad = BackboneConfig { d_model: 7, n_heads: 2, ..small_cfg() };
        assert!(init_backbone(&bad, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_init_adapters_are_exact_identity() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, &mut Rng::new(5)).unwrap();
        let adapters = adapters_for(&cfg, 6);
        let tokens = [1usize, 4, 9, 2, 2, 7];
        let plain = forward_logits(&params, None, &tokens).unwrap();
        let adapted = forward_logits(&params, Some(&adapters), &tokens).unwrap();
        let max = plain
            .values()
            .iter()
            .zip(adapted.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-12, "max logit diff {max}");
    }

    #[test]
    fn single_token_shape_and_range_check() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, &mut Rng::new(5)).unwrap();
        let logits = forward_logits(&params, None, &[3]).unwrap();
        assert_eq!(logits.shape(), &[1, cfg.vocab_size]);
        assert!(forward_logits(&params, None, &[11]).is_err());
        assert!(forward_logits(&params, None, &[0; 13]).is_err());
    }

    #[test]
    fn causality_full_vs_incremental() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, &mut Rng::new(8)).unwrap();
        let tokens = [5usize, 1, 10, 3, 0, 6, 6, 2];
        let full = forward_logits(&params, None, &tokens).unwrap();
        for t in 1..=tokens.len() {
            let part = forward_logits(&params, None, &tokens[..t]).unwrap();
            // row t-1 of the prefix forward must match row t-1 of the full one
            let (a, b) = (
                &part.values()[(t - 1) * cfg.vocab_size..t * cfg.vocab_size],
                &full.values()[(t - 1) * cfg.vocab_size..t * cfg.vocab_size],
            );
            let max = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
            assert!(max < 1e-10, "prefix {t}: diff {max}");
        }
        // changing a later token never changes earlier logits
        let mut mutated = tokens;
        mutated[5] = 9;
        let full2 = forward_logits(&params, None, &mutated).unwrap();
        for r in 0..5 {
            let (a, b) = (
                &full.values()[r * cfg.vocab_size..(r + 1) * cfg.vocab_size],
                &full2.values()[r * cfg.vocab_size..(r + 1) * cfg.vocab_size],
            );
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sequence_log_prob_matches_per_step_oracle() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, &mut Rng::new(13)).unwrap();
        let prompt = [2usize, 7, 1];
        let response = [4usize, 0, 9, 9];
        let lp = sequence_log_prob(&params, None, &prompt, &response).unwrap();
        assert!(lp <= 0.0);
        // brute-force chain rule: product of per-step softmax values
        let mut ctx = prompt.to_vec();
        let mut want = 0.0;
        for &tok in &response {
            let logits = forward_logits(&params, None, &ctx).unwrap();
            let row = &logits.values()[(ctx.len() - 1) * cfg.vocab_size..];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            want += row[tok] - max - z.ln();
            ctx.push(tok);
        }
        assert!((lp - want).abs() < 1e-9, "{lp} vs {want}");
        assert!(sequence_log_prob(&params, None, &prompt, &[]).is_err());
    }

    #[test]
    fn uniform_logit_model_gives_length_times_log_inv_vocab() {
        let cfg = small_cfg();
        let mut params = init_backbone(&cfg, &mut Rng::new(1)).unwrap();
        // zero final projection -> identical logits -> uniform distribution
        params.out_proj.iter_mut().for_each(|v| *v = 0.0);
        let lp = sequence_log_prob(&params, None, &[1, 2], &[3, 4, 5]).unwrap();
        let want = 3.0 * (1.0 / cfg.vocab_size as f64).ln();
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn pretrain_reduces_cross_entropy_on_repeating_corpus() {
        let cfg = small_cfg();
        let mut params = init_backbone(&cfg, &mut Rng::new(2)).unwrap();
        // 2-symbol repeating corpus: entropy of the true process is 0
        let corpus: Vec<Vec<usize>> = vec![vec![1, 2, 1, 2, 1, 2, 1, 2, 1, 2]; 1];
        let losses = pretrain_backbone(&mut params, &corpus, 200, 1e-2).unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        let final_loss = *losses.last().unwrap();
        assert!(
            final_loss < (cfg.vocab_size as f64).ln(),
            "cross-entropy {final_loss} not below ln(vocab)"
        );
        assert!(params.frozen);

        // steps = 0 leaves parameters unchanged
        let mut p2 = init_backbone(&cfg, &mut Rng::new(2)).unwrap();
        let before = p2.tok_emb.clone();
        pretrain_backbone(&mut p2, &corpus, 0, 1e-2).unwrap();
        assert_eq!(before, p2.tok_emb);

        assert!(pretrain_backbone(&mut params, &[], 1, 1e-2).is_err());
    }
}
