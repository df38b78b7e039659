//! Training objectives: DPO and ORPO preference losses, the four routing
//! auxiliary losses, and the total-loss combiner.
//!
//! The routing losses use the generalized (unnormalized) KL convention with
//! 0·ln 0 = 0: the balance distribution sums to sc ≤ 1 while the real-expert
//! weights sum to < 1, so the loss can be negative; its exact minimum over
//! softmax-feasible weights is sc·ln sc, attained when the group carries all
//! its target mass uniformly.

use crate::adapter::ExpertGroupTable;
use crate::error::{Error, Result};
use crate::numcore::{ops, Tensor};

/// Balance target over the K experts: zero outside the preference's group
/// range, sc divided by the group size inside (so the entries sum to sc).
#[derive(Debug, Clone)]
pub struct BalanceDistribution {
    pub d: Vec<f64>,
    pub preference_id: usize,
    pub sc: f64,
}

/// One training step's loss components; total = preference + beta·routing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub preference_loss: f64,
    pub routing_loss: f64,
    pub total: f64,
    pub beta_egs: f64,
}

/// Standard balance distribution for one preference's expert group.
pub fn balance_distribution(
    groups: &ExpertGroupTable,
    preference_id: usize,
) -> Result<BalanceDistribution> {
    let e = groups.entry_for(preference_id)?;
    let mut d = vec![0.0; groups.num_experts()];
    let per = e.sc / (e.end - e.start) as f64;
    for slot in d[e.start..e.end].iter_mut() {
        *slot = per;
    }
    Ok(BalanceDistribution { d, preference_id, sc: e.sc })
}

fn check_router_weights(w: &Tensor, k: usize) -> Result<usize> {
    let s = w.shape();
    if s.len() != 2 || s[1] != k + 1 {
        return Err(Error::Dim(format!(
            "router weights shape {s:?}, expected [tokens, {}]",
            k + 1
        )));
    }
    Ok(s[0])
}

/// Generalized KL(D || w[:K]) averaged over tokens; the empty expert slot is
/// excluded. A zero weight where D > 0 would make the loss +infinite; that
/// cannot come out of a softmax, and is rejected with a diagnostic here.
pub fn egs_loss(router_weights: &Tensor, d: &BalanceDistribution) -> Result<Tensor> {
    let k = d.d.len();
    check_router_weights(router_weights, k)?;
    let kp1 = k + 1;
    for (idx, &wv) in router_weights.values().iter().enumerate() {
        if idx % kp1 < k && d.d[idx % kp1] > 0.0 && wv == 0.0 {
            return Err(Error::Numeric(
                "egs_loss is +inf: zero router weight where the balance target is positive".into(),
            ));
        }
    }
    // sum_i D_i ln D_i with 0 ln 0 = 0
    let const_term: f64 = d.d.iter().filter(|&&di| di > 0.0).map(|&di| di * di.ln()).sum();
    // cross term only over the support of D, so zero weights where D = 0
    // (allowed) never reach the log
    let t = router_weights.shape()[0] as f64;
    let mut cross_parts = Vec::new();
    let mut i = 0;
    while i < k {
        if d.d[i] == 0.0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < k && d.d[i] > 0.0 {
            i += 1;
        }
        let wk = ops::slice_cols(router_weights, start, i)?;
        let lw = ops::ln(&wk)?;
        cross_parts.push(ops::sum_all(&ops::scale_cols(&lw, &d.d[start..i])?)?);
    }
    let mut cross = Tensor::scalar(0.0);
    for part in &cross_parts {
        cross = ops::add(&cross, part)?;
    }
    Ok(ops::add_scalar(&ops::scale(&cross, -1.0 / t), const_term))
}

/// [`egs_loss`] with the soft constraint coefficient forced to 1.
pub fn egs_hard_loss(
    router_weights: &Tensor,
    groups: &ExpertGroupTable,
    preference_id: usize,
) -> Result<Tensor> {
    let e = groups.entry_for(preference_id)?;
    let mut d = vec![0.0; groups.num_experts()];
    let per = 1.0 / (e.end - e.start) as f64;
    for slot in d[e.start..e.end].iter_mut() {
        *slot = per;
    }
    egs_loss(router_weights, &BalanceDistribution { d, preference_id, sc: 1.0 })
}

/// Switch-Transformer top-1 utilization loss over the K real experts:
/// alpha · K · sum_i f_i p_i, with f from argmax counts (ties to the lowest
/// index) and p from mean weights. Gradient flows through p only.
pub fn switch_loss(per_token_weights: &Tensor, alpha: f64) -> Result<Tensor> {
    let s = per_token_weights.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Dim(format!("switch_loss: weights shape {s:?}")));
    }
    let (t, kp1) = (s[0], s[1]);
    if t == 0 {
        return Err(Error::Data("switch_loss over zero tokens".into()));
    }
    let k = kp1 - 1;
    let wv = per_token_weights.values();
    let mut f = vec![0.0; k];
    for row in 0..t {
        let slice = &wv[row * kp1..row * kp1 + k];
        let mut best = 0;
        for (i, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = i;
            }
        }
        f[best] += 1.0;
    }
    for fi in f.iter_mut() {
        *fi /= t as f64;
    }
    let p = ops::mean_rows(&ops::slice_cols(per_token_weights, 0, k)?)?;
    let fp = ops::mul(&p, &Tensor::new(vec![k], f)?)?;
    Ok(ops::scale(&ops::sum_all(&fp)?, alpha * k as f64))
}

/// Uniform-target balance loss: generalized KL({1/K} || w[:K]), token mean.
pub fn expert_balance_loss(router_weights: &Tensor) -> Result<Tensor> {
    let kp1 = *router_weights
        .shape()
        .last()
        .ok_or_else(|| Error::Dim("empty weights".into()))?;
    let k = kp1 - 1;
    let d = vec![1.0 / k as f64; k];
    egs_loss(router_weights, &BalanceDistribution { d, preference_id: usize::MAX, sc: 1.0 })
}

fn finite(v: &Tensor, name: &str) -> Result<()> {
    if v.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("{name} is not finite")));
    }
    Ok(())
}

/// -log sigmoid(beta·[(logpc_pi − logpc_ref) − (logpr_pi − logpr_ref)]).
pub fn dpo_loss(
    logp_chosen_policy: &Tensor,
    logp_rejected_policy: &Tensor,
    logp_chosen_ref: &Tensor,
    logp_rejected_ref: &Tensor,
    beta_dpo: f64,
) -> Result<Tensor> {
    if beta_dpo <= 0.0 {
        return Err(Error::Config(format!("beta_dpo must be positive, got {beta_dpo}")));
    }
    for (t, n) in [
        (logp_chosen_policy, "logp_chosen_policy"),
        (logp_rejected_policy, "logp_rejected_policy"),
        (logp_chosen_ref, "logp_chosen_ref"),
        (logp_rejected_ref, "logp_rejected_ref"),
    ] {
        finite(t, n)?;
    }
    let chosen_margin = ops::sub(logp_chosen_policy, logp_chosen_ref)?;
    let rejected_margin = ops::sub(logp_rejected_policy, logp_rejected_ref)?;
    let margin = ops::scale(&ops::sub(&chosen_margin, &rejected_margin)?, beta_dpo);
    Ok(ops::scale(&ops::log_sigmoid(&margin), -1.0))
}

/// ORPO: token-mean NLL of the chosen sequence plus
/// lambda · (-log sigmoid(log odds ratio)) on length-normalized log
/// probabilities, where odds(p) = p / (1 - p) and the log odds ratio is
/// log odds(chosen) - log odds(rejected).
pub fn orpo_loss(
    logp_chosen: &Tensor,
    logp_rejected: &Tensor,
    lambda_orpo: f64,
    chosen_len: usize,
    rejected_len: usize,
) -> Result<Tensor> {
    if chosen_len == 0 || rejected_len == 0 {
        return Err(Error::Data("orpo_loss: sequence lengths must be >= 1".into()));
    }
    finite(logp_chosen, "logp_chosen")?;
    finite(logp_rejected, "logp_rejected")?;
    let lc = ops::scale(logp_chosen, 1.0 / chosen_len as f64);
    let lr = ops::scale(logp_rejected, 1.0 / rejected_len as f64);
    let nll = ops::scale(&lc, -1.0);
    if lambda_orpo == 0.0 {
        return Ok(nll);
    }
    // log odds(p) = log p - log(1 - p), with p = exp(mean log prob) < 1
    let odds_c = ops::sub(&lc, &ops::log1m_exp(&lc)?)?;
    let odds_r = ops::sub(&lr, &ops::log1m_exp(&lr)?)?;
    let penalty = ops::scale(&ops::log_sigmoid(&ops::sub(&odds_c, &odds_r)?), -1.0);
    ops::add(&nll, &ops::scale(&penalty, lambda_orpo))
}

/// Combines a preference loss and a routing loss: total = pref + beta·routing.
pub fn total_loss(preference_loss: f64, routing_loss: f64, beta_egs: f64) -> Result<LossBreakdown> {
    if beta_egs < 0.0 {
        return Err(Error::Config(format!("beta_egs must be >= 0, got {beta_egs}")));
    }
    Ok(LossBreakdown {
        preference_loss,
        routing_loss,
        total: preference_loss + beta_egs * routing_loss,
        beta_egs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::GroupEntry;
    use crate::numcore::gradcheck::finite_difference_gradient;
    use crate::numcore::Rng;

    fn table(ranges: &[(usize, usize, f64)], k: usize) -> ExpertGroupTable {
        let entries = ranges
            .iter()
            .enumerate()
            .map(|(i, &(s, e, sc))| GroupEntry { preference_id: i, start: s, end: e, sc })
            .collect();
        ExpertGroupTable::new(entries, k).unwrap()
    }

    fn weights(rows: &[&[f64]]) -> Tensor {
        let n = rows[0].len();
        let vals: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), n], vals).unwrap()
    }

    #[test]
    fn balance_distribution_examples() {
        let g = table(&[(0, 4, 0.8), (4, 8, 0.8)], 8);
        let d = balance_distribution(&g, 0).unwrap();
        assert_eq!(d.d, vec![0.2, 0.2, 0.2, 0.2, 0.0, 0.0, 0.0, 0.0]);
        let g = table(&[(0, 4, 0.8), (4, 6, 0.9)], 6);
        let d = balance_distribution(&g, 1).unwrap();
        assert_eq!(d.d, vec![0.0, 0.0, 0.0, 0.0, 0.45, 0.45]);
        let g = table(&[(0, 2, 0.5), (2, 3, 1.0)], 3);
        let d = balance_distribution(&g, 1).unwrap();
        assert_eq!(d.d, vec![0.0, 0.0, 1.0]);
        assert!(balance_distribution(&g, 9).is_err());
    }

    #[test]
    fn egs_loss_examples() {
        // in-group weights exactly sc_d each -> 0
        let g = table(&[(0, 2, 0.8), (2, 4, 0.8)], 4);
        let d = balance_distribution(&g, 0).unwrap();
        let w = weights(&[&[0.4, 0.4, 0.05, 0.05, 0.1]]);
        assert!(egs_loss(&w, &d).unwrap().item().abs() < 1e-12);

        // K=2, group (0,1), sc=0.8, w=[0.4, 0.4, 0.2] -> 0.8 ln 2
        let g = table(&[(0, 1, 0.8), (1, 2, 0.8)], 2);
        let d = balance_distribution(&g, 0).unwrap();
        let w = weights(&[&[0.4, 0.4, 0.2]]);
        let got = egs_loss(&w, &d).unwrap().item();
        assert!((got - 0.8 * std::f64::consts::LN_2).abs() < 1e-12, "{got}");

        // invariant to redistribution of out-of-group mass
        let g = table(&[(0, 2, 0.8), (2, 5, 0.8)], 5);
        let d = balance_distribution(&g, 0).unwrap();
        let w1 = weights(&[&[0.3, 0.2, 0.1, 0.2, 0.1, 0.1]]);
        let w2 = weights(&[&[0.3, 0.2, 0.35, 0.02, 0.03, 0.1]]);
        let (l1, l2) = (egs_loss(&w1, &d).unwrap().item(), egs_loss(&w2, &d).unwrap().item());
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn egs_hard_loss_examples() {
        let g = table(&[(0, 2, 0.8), (2, 4, 0.8)], 4);
        // zero weights outside the group are fine (target is 0 there)
        let w = weights(&[&[0.5, 0.5, 0.0, 0.0, 0.0]]);
        assert!(egs_hard_loss(&w, &g, 0).unwrap().item().abs() < 1e-12);

        let g = table(&[(0, 1, 0.8), (1, 2, 0.8)], 2);
        let w = weights(&[&[0.4, 0.4, 0.2]]);
        let got = egs_hard_loss(&w, &g, 0).unwrap().item();
        assert!((got - (1.0f64 / 0.4).ln()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn switch_loss_examples() {
        // uniform routing over the K real experts -> alpha
        let k = 4;
        let mut row = vec![1.0 / k as f64; k];
        row.push(0.0);
        let w = weights(&[&row, &row, &row]);
        let got = switch_loss(&w, 0.01).unwrap().item();
        assert!((got - 0.01).abs() < 1e-12, "{got}");

        // all tokens fully on expert 0 -> alpha * K
        let mut hot = vec![0.0; k + 1];
        hot[0] = 1.0;
        let w = weights(&[&hot, &hot]);
        let got = switch_loss(&w, 0.01).unwrap().item();
        assert!((got - 0.01 * k as f64).abs() < 1e-12, "{got}");

        // random stream matches an independent accumulation oracle
        let mut rng = Rng::new(31);
        let t = 17;
        let mut rows = Vec::new();
        for _ in 0..t {
            let raw: Vec<f64> = (0..=k).map(|_| rng.uniform() + 0.01).collect();
            let z: f64 = raw.iter().sum();
            rows.push(raw.into_iter().map(|v| v / z).collect::<Vec<_>>());
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let w = weights(&refs);
        let got = switch_loss(&w, 0.37).unwrap().item();
        let mut p = vec![0.0; k];
        let mut f = vec![0.0; k];
        for row in &rows {
            for i in 0..k {
                p[i] += row[i] / t as f64;
            }
            let mut best = 0;
            for i in 1..k {
                if row[i] > row[best] {
                    best = i;
                }
            }
            f[best] += 1.0 / t as f64;
        }
        let want: f64 = 0.37 * k as f64 * p.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn expert_balance_loss_examples() {
        // uniform over all K+1 slots, K=3 -> ln(4/3)
        let w = weights(&[&[0.25, 0.25, 0.25, 0.25]]);
        let got = expert_balance_loss(&w).unwrap().item();
        assert!((got - (4.0f64 / 3.0).ln()).abs() < 1e-12, "{got}");

        // w[:K] each exactly 1/K -> 0 (limiting case, empty weight 0)
        let third = 1.0 / 3.0;
        let w = weights(&[&[third, third, third, 0.0]]);
        assert!(expert_balance_loss(&w).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn dpo_loss_examples() {
        let s = Tensor::scalar;
        // equal margins -> ln 2
        let l = dpo_loss(&s(-5.0), &s(-6.0), &s(-5.0), &s(-6.0), 0.1).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
        // huge positive policy margin -> loss -> 0
        let l = dpo_loss(&s(-1.0), &s(-500.0), &s(-5.0), &s(-5.0), 1.0).unwrap();
        assert!(l.item() < 1e-9);
        // gradient w.r.t. chosen policy log prob is negative
        let f = |x: &Tensor| dpo_loss(x, &s(-6.0), &s(-5.0), &s(-6.0), 0.3);
        let g = finite_difference_gradient(f, &s(-5.0), 1e-5).unwrap();
        assert!(g.item() < 0.0);
        // invalid inputs
        assert!(dpo_loss(&s(-5.0), &s(-6.0), &s(-5.0), &s(-6.0), 0.0).is_err());
    }

    #[test]
    fn orpo_loss_examples() {
        let s = Tensor::scalar;
        // lambda = 0 reduces to chosen token-mean NLL
        let l = orpo_loss(&s(-6.0), &s(-9.0), 0.0, 3, 3).unwrap();
        assert!((l.item() - 2.0).abs() < 1e-12);
        // equal length-normalized log probs -> penalty term = ln 2
        let l = orpo_loss(&s(-6.0), &s(-6.0), 1.0, 3, 3).unwrap();
        assert!((l.item() - (2.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        // penalty decreases as the margin grows
        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let l = orpo_loss(&s(-6.0), &s(-6.0 - margin), 1.0, 3, 3).unwrap().item();
            let penalty = l - 2.0;
            assert!(penalty < prev, "penalty not decreasing at margin {margin}");
            prev = penalty;
        }
        assert!(orpo_loss(&s(-6.0), &s(-9.0), 1.0, 0, 3).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let b = total_loss(0.5, 2.0, 0.1).unwrap();
        assert!((b.total - 0.7).abs() < 1e-12);
        let b = total_loss(0.3, 0.9, 1.0).unwrap();
        assert!((b.total - 1.2).abs() < 1e-12);
        let b = total_loss(0.42, 777.0, 0.0).unwrap();
        assert_eq!(b.total, 0.42);
        assert!(total_loss(0.1, 0.1, -0.5).is_err());
    }

    #[test]
    fn egs_gradient_is_negative_on_in_group_weights() {
        // d loss / d w_i = -D_i / w_i < 0 inside the group
        let g = table(&[(0, 2, 0.8), (2, 4, 0.8)], 4);
        let d = balance_distribution(&g, 0).unwrap();
        let w0 = weights(&[&[0.3, 0.25, 0.15, 0.2, 0.1]]);
        let grad = finite_difference_gradient(|w| egs_loss(w, &d), &w0, 1e-6).unwrap();
        assert!(grad.values()[0] < 0.0 && grad.values()[1] < 0.0);
        assert!(grad.values()[2].abs() < 1e-9 && grad.values()[4].abs() < 1e-9);
    }
}
