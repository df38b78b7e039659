//! Preference-alignment training: frozen backbone + trainable adapters,
//! Adam, batched preference + routing loss steps, JSON checkpoints with
//! bitwise-reproducible resume, and a read-only evaluation pass.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, init_pmol_layer, ExpertGroupTable, Path as MoePath, PmolLayer, PmolLeaves};
use crate::backbone::{sequence_log_prob, sequence_log_prob_tensor, BackboneParams};
use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::numcore::{backward, ops, Rng, Tape, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction, one moment pair per parameter slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    states: BTreeMap<usize, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, states: BTreeMap::new() }
    }

    /// One update on the slot's parameter vector. Aborts on a non-finite
    /// gradient, naming the slot; callers attach the parameter name.
    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Dim(format!(
                "slot {slot}: {} parameters vs {} gradient entries",
                param.len(),
                grad.len()
            )));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {bad} for parameter slot {slot}"
            )));
        }
        let st = self.states.entry(slot).or_default();
        if st.m.is_empty() {
            st.m = vec![0.0; param.len()];
            st.v = vec![0.0; param.len()];
        }
        st.t += 1;
        let bc1 = 1.0 - BETA1.powi(st.t as i32);
        let bc2 = 1.0 - BETA2.powi(st.t as i32);
        for ((p, g), (m, v)) in
            param.iter_mut().zip(grad).zip(st.m.iter_mut().zip(st.v.iter_mut()))
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Which routing auxiliary loss to apply on top of the preference loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Soft,
    Hard,
    Switch,
    Balance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dpo,
    Orpo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta_egs: f64,
    pub beta_dpo: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_variant: LossVariant,
    pub algorithm: Algorithm,
    /// Penalty weight of the odds-ratio term when `algorithm` is orpo.
    pub lambda_orpo: f64,
    /// Weight of the switch-variant utilization loss.
    pub switch_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta_egs: 0.1,
            beta_dpo: 0.1,
            lr: 1e-3,
            epochs: 2,
            batch_size: 8,
            loss_variant: LossVariant::Soft,
            algorithm: Algorithm::Dpo,
            lambda_orpo: 1.0,
            switch_alpha: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [(self.beta_dpo, "beta_dpo"), (self.lr, "lr"), (self.switch_alpha, "switch_alpha")] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        for (v, name) in [(self.beta_egs, "beta_egs"), (self.lambda_orpo, "lambda_orpo")] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0 and finite")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Frozen backbone plus one trainable adapted layer per transformer block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PmolModel {
    pub backbone: BackboneParams,
    pub adapters: Vec<PmolLayer>,
}

impl PmolModel {
    /// Attaches a fresh adapter (zero-contribution init) to every layer's
    /// FFN down-projection and marks the backbone frozen.
    pub fn new(
        mut backbone: BackboneParams,
        groups: ExpertGroupTable,
        rank: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (a, b) = (backbone.cfg.d_ff, backbone.cfg.d_model);
        let adapters = (0..backbone.cfg.n_layers)
            .map(|_| init_pmol_layer(a, b, rank, groups.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        backbone.frozen = true;
        Ok(PmolModel { backbone, adapters })
    }

    pub fn groups(&self) -> &ExpertGroupTable {
        &self.adapters[0].groups
    }

    pub fn adapter_leaves(&self, tape: Option<&Tape>) -> Result<Vec<PmolLeaves>> {
        self.adapters.iter().map(|l| l.leaves(tape)).collect()
    }
}

/// Name and size of one parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSetEntry {
    pub name: String,
    pub len: usize,
}

/// Splits the model into (frozen, trainable) parameter sets. Everything in
/// the backbone is frozen; every adapter matrix and router weight trains.
pub fn partition_parameters(model: &PmolModel) -> (Vec<ParamSetEntry>, Vec<ParamSetEntry>) {
    let cfg = &model.backbone.cfg;
    let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
    let mut frozen = vec![
        ParamSetEntry { name: "tok_emb".into(), len: v * d },
        ParamSetEntry { name: "pos_emb".into(), len: cfg.max_seq_len * d },
    ];
    for li in 0..cfg.n_layers {
        for (n, len) in [
            ("wq", d * d),
            ("wk", d * d),
            ("wv", d * d),
            ("wo", d * d),
            ("gain1", d),
            ("w_up", d * f),
            ("w_down", f * d),
            ("gain2", d),
        ] {
            frozen.push(ParamSetEntry { name: format!("layer{li}.{n}"), len });
        }
    }
    frozen.push(ParamSetEntry { name: "final_gain".into(), len: d });
    frozen.push(ParamSetEntry { name: "out_proj".into(), len: d * v });

    let mut trainable = Vec::new();
    for (li, layer) in model.adapters.iter().enumerate() {
        for (ki, e) in layer.experts().iter().enumerate() {
            trainable.push(ParamSetEntry {
                name: format!("layer{li}.expert{ki}.a"),
                len: e.a_mat.len(),
            });
            trainable.push(ParamSetEntry {
                name: format!("layer{li}.expert{ki}.b"),
                len: e.b_mat.len(),
            });
        }
        let r = layer.router();
        trainable.push(ParamSetEntry { name: format!("layer{li}.router.w_r"), len: r.w_r.len() });
        trainable.push(ParamSetEntry { name: format!("layer{li}.router.bias"), len: r.bias.len() });
    }
    (frozen, trainable)
}

/// Chosen/rejected log probabilities under the adapter-free backbone, aligned
/// with `pairs`. Pure function of the frozen backbone, so computable once per
/// dataset and shared across runs.
pub fn reference_log_probs(
    backbone: &BackboneParams,
    pairs: &[PreferencePair],
) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            Ok((
                sequence_log_prob(backbone, None, &p.prompt, &p.chosen)?,
                sequence_log_prob(backbone, None, &p.prompt, &p.rejected)?,
            ))
        })
        .collect()
}

// Routing loss of one pair: variant loss per adapted layer on the chosen
// response's token rows, averaged over layers.
fn routing_loss_for_pair(
    router_ws: &[Tensor],
    pair: &PreferencePair,
    groups: &ExpertGroupTable,
    cfg: &TrainConfig,
) -> Result<Option<Tensor>> {
    if cfg.loss_variant == LossVariant::None {
        return Ok(None);
    }
    let (p, l) = (pair.prompt.len(), pair.chosen.len());
    let mut per_layer = Vec::with_capacity(router_ws.len());
    for w in router_ws {
        let resp = ops::slice_rows(w, p, p + l)?;
        let loss = match cfg.loss_variant {
            LossVariant::Soft => {
                let d = losses::balance_distribution(groups, pair.preference_id)?;
                losses::egs_loss(&resp, &d)?
            }
            LossVariant::Hard => losses::egs_hard_loss(&resp, groups, pair.preference_id)?,
            LossVariant::Switch => losses::switch_loss(&resp, cfg.switch_alpha)?,
            LossVariant::Balance => losses::expert_balance_loss(&resp)?,
            LossVariant::None => unreachable!(),
        };
        per_layer.push(loss);
    }
    Ok(Some(ops::mean_of(&per_layer)?))
}

// Writes the packed adapter parameter vectors back into the layer and
// refreshes its stacked cache.
fn unpack_into_layer(
    layer: &mut PmolLayer,
    a_pack: &[f64],
    b_pack: &[f64],
    w_r: &[f64],
    bias: &[f64],
) {
    let (a, b, r) = (layer.in_dim, layer.out_dim, layer.rank);
    let k = layer.num_experts();
    let kr = k * r;
    {
        let experts = layer.experts_mut();
        for (ki, e) in experts.iter_mut().enumerate() {
            for row in 0..a {
                e.a_mat[row * r..(row + 1) * r]
                    .copy_from_slice(&a_pack[row * kr + ki * r..row * kr + (ki + 1) * r]);
            }
            e.b_mat.copy_from_slice(&b_pack[ki * r * b..(ki + 1) * r * b]);
        }
    }
    {
        let router = layer.router_mut();
        router.w_r.copy_from_slice(w_r);
        router.bias.copy_from_slice(bias);
    }
    adapter::stack_experts(layer);
}

/// One optimization step on a batch. `refs` holds the reference
/// (chosen, rejected) log probabilities aligned with `batch`.
pub fn train_step(
    model: &mut PmolModel,
    batch: &[PreferencePair],
    refs: &[(f64, f64)],
    cfg: &TrainConfig,
    opt: &mut Adam,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    if batch.len() != refs.len() {
        return Err(Error::Dim(format!(
            "{} pairs vs {} reference entries",
            batch.len(),
            refs.len()
        )));
    }
    let groups = model.groups().clone();
    for p in batch {
        groups.entry_for(p.preference_id)?;
    }

    let tape = Tape::new();
    let leaves = model.adapter_leaves(Some(&tape))?;
    let bt = model.backbone.tensors(None)?;
    let attach = Some((leaves.as_slice(), MoePath::Parallel));

    let mut pref_terms = Vec::with_capacity(batch.len());
    let mut routing_terms = Vec::with_capacity(batch.len());
    for (pair, &(ref_c, ref_r)) in batch.iter().zip(refs) {
        let (lp_c, router_ws) =
            sequence_log_prob_tensor(&bt, attach, &pair.prompt, &pair.chosen)?;
        let (lp_r, _) = sequence_log_prob_tensor(&bt, attach, &pair.prompt, &pair.rejected)?;
        let pref = match cfg.algorithm {
            Algorithm::Dpo => losses::dpo_loss(
                &lp_c,
                &lp_r,
                &Tensor::scalar(ref_c),
                &Tensor::scalar(ref_r),
                cfg.beta_dpo,
            )?,
            Algorithm::Orpo => losses::orpo_loss(
                &lp_c,
                &lp_r,
                cfg.lambda_orpo,
                pair.chosen.len(),
                pair.rejected.len(),
            )?,
        };
        pref_terms.push(pref);
        if let Some(rl) = routing_loss_for_pair(&router_ws, pair, &groups, cfg)? {
            routing_terms.push(rl);
        }
    }

    let pref_mean = ops::mean_of(&pref_terms)?;
    let (loss, breakdown) = if routing_terms.is_empty() {
        (pref_mean.clone(), losses::total_loss(pref_mean.item(), 0.0, 0.0)?)
    } else {
        let routing_mean = ops::mean_of(&routing_terms)?;
        let total = ops::add(&pref_mean, &ops::scale(&routing_mean, cfg.beta_egs))?;
        (
            total,
            losses::total_loss(pref_mean.item(), routing_mean.item(), cfg.beta_egs)?,
        )
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("loss became {}", breakdown.total)));
    }
    backward(&loss)?;

    for (li, lv) in leaves.iter().enumerate() {
        let parts: [(&Tensor, &str); 4] = [
            (&lv.a_pack, "a_pack"),
            (&lv.b_pack, "b_pack"),
            (&lv.w_r, "router.w_r"),
            (&lv.bias, "router.bias"),
        ];
        let mut updated = Vec::with_capacity(4);
        for (pi, (t, name)) in parts.iter().enumerate() {
            let mut vals = t.values().to_vec();
            if let Some(g) = t.grad() {
                opt.step(li * 4 + pi, &mut vals, g.values())
                    .map_err(|e| Error::Numeric(format!("layer{li}.{name}: {e}")))?;
            }
            updated.push(vals);
        }
        let [a_pack, b_pack, w_r, bias] = <[Vec<f64>; 4]>::try_from(updated).unwrap();
        unpack_into_layer(&mut model.adapters[li], &a_pack, &b_pack, &w_r, &bias);
    }
    Ok(breakdown)
}

/// Per-preference evaluation metrics on held-out pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefMetrics {
    pub preference_id: usize,
    /// Mean policy log-prob margin, chosen minus rejected.
    pub mean_margin: f64,
    /// Fraction of pairs with positive margin.
    pub accuracy: f64,
    /// Router mass per expert group (entry order of the group table),
    /// averaged over layers, chosen-response tokens, and pairs.
    pub group_mass: Vec<f64>,
    /// Mass on the empty expert, same averaging.
    pub empty_mass: f64,
    pub n_pairs: usize,
}

/// Read-only evaluation: margins, accuracy, and router group mass per
/// preference.
pub fn evaluate(model: &PmolModel, held_out: &[PreferencePair]) -> Result<Vec<PrefMetrics>> {
    if held_out.is_empty() {
        return Err(Error::Data("empty held-out set".into()));
    }
    let groups = model.groups();
    for p in held_out {
        groups.entry_for(p.preference_id)?;
    }
    let bt = model.backbone.tensors(None)?;
    let leaves = model.adapter_leaves(None)?;
    let attach = Some((leaves.as_slice(), MoePath::Parallel));
    let kp1 = groups.num_experts() + 1;

    let mut prefs: Vec<usize> = held_out.iter().map(|p| p.preference_id).collect();
    prefs.sort_unstable();
    prefs.dedup();

    let mut out = Vec::new();
    for pref in prefs {
        let pairs: Vec<&PreferencePair> =
            held_out.iter().filter(|p| p.preference_id == pref).collect();
        let mut margin_sum = 0.0;
        let mut wins = 0usize;
        let mut mean_w = vec![0.0; kp1];
        for pair in &pairs {
            let (lp_c, router_ws) =
                sequence_log_prob_tensor(&bt, attach, &pair.prompt, &pair.chosen)?;
            let (lp_r, _) =
                sequence_log_prob_tensor(&bt, attach, &pair.prompt, &pair.rejected)?;
            let margin = lp_c.item() - lp_r.item();
            margin_sum += margin;
            wins += (margin > 0.0) as usize;
            let (p, l) = (pair.prompt.len(), pair.chosen.len());
            for w in &router_ws {
                let wv = w.values();
                for row in p..p + l {
                    for s in 0..kp1 {
                        mean_w[s] += wv[row * kp1 + s];
                    }
                }
            }
        }
        let denom: f64 = pairs
            .iter()
            .map(|p| (p.chosen.len() * model.adapters.len()) as f64)
            .sum();
        for s in mean_w.iter_mut() {
            *s /= denom;
        }
        let group_mass = groups
            .entries()
            .iter()
            .map(|e| mean_w[e.start..e.end].iter().sum())
            .collect();
        out.push(PrefMetrics {
            preference_id: pref,
            mean_margin: margin_sum / pairs.len() as f64,
            accuracy: wins as f64 / pairs.len() as f64,
            group_mass,
            empty_mass: mean_w[kp1 - 1],
            n_pairs: pairs.len(),
        });
    }
    Ok(out)
}

/// One training step's logged losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Runs `cfg.epochs` of shuffled mini-batch training. Batch order is a pure
/// function of (seed, epoch), so resuming from `start_step` replays the same
/// schedule and continues bitwise-identically. Returns records for the steps
/// actually executed.
pub fn run_training(
    model: &mut PmolModel,
    opt: &mut Adam,
    pairs: &[PreferencePair],
    refs: &[(f64, f64)],
    cfg: &TrainConfig,
    start_step: u64,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if pairs.len() != refs.len() {
        return Err(Error::Dim("pairs and reference log probs misaligned".into()));
    }
    let mut records = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        Rng::new(cfg.seed).fork(epoch as u64 + 1).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if step < start_step {
                step += 1;
                continue;
            }
            let batch: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let batch_refs: Vec<(f64, f64)> = chunk.iter().map(|&i| refs[i]).collect();
            let loss = train_step(model, &batch, &batch_refs, cfg, opt)?;
            records.push(StepRecord { step, epoch, loss });
            step += 1;
        }
    }
    Ok(records)
}

/// Serializable training snapshot; reloading and continuing reproduces an
/// uninterrupted run bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: PmolModel,
    pub opt: Adam,
    pub step: u64,
    pub cfg: TrainConfig,
    pub config_hash: u64,
}

/// FNV-1a over a byte string; used for config and dataset fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn config_hash(cfg: &TrainConfig) -> u64 {
    fnv1a(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(ckpt)?;
    std::fs::write(path.as_ref(), json)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let raw = std::fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&raw)?)
}
