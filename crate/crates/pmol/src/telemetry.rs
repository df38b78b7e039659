//! Read-only observability: per-layer router-weight recording, a scalar
//! specialization score, and the parallel-vs-sequential micro-benchmark
//! harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    forward_with_leaves, init_pmol_layer, ExpertGroupTable, Path as MoePath,
};
use crate::backbone::sequence_log_prob_tensor;
use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::losses::{balance_distribution, egs_loss};
use crate::numcore::{backward, ops, Rng, Tape, Tensor};
use crate::trainengine::PmolModel;

/// Mean router weights of one (layer, preference) cell, averaged over
/// chosen-response tokens and pairs. `mean_weights` has K+1 entries; the last
/// is the empty expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub layer_index: usize,
    pub preference_id: usize,
    pub mean_weights: Vec<f64>,
    pub step: u64,
}

impl TelemetryRecord {
    /// Aggregates the per-expert means to per-group mass, group-table order.
    pub fn group_masses(&self, groups: &ExpertGroupTable) -> Vec<f64> {
        groups
            .entries()
            .iter()
            .map(|e| self.mean_weights[e.start..e.end].iter().sum())
            .collect()
    }
}

/// Records token-mean router weights per (layer, preference) over the
/// chosen responses of `held_out`. Changes no model state.
pub fn record_expert_weights(
    model: &PmolModel,
    held_out: &[PreferencePair],
    step: u64,
) -> Result<Vec<TelemetryRecord>> {
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
    let n_layers = model.adapters.len();

    let mut prefs: Vec<usize> = held_out.iter().map(|p| p.preference_id).collect();
    prefs.sort_unstable();
    prefs.dedup();

    let mut records = Vec::new();
    for &pref in &prefs {
        let mut sums = vec![vec![0.0; kp1]; n_layers];
        let mut tokens = 0usize;
        for pair in held_out.iter().filter(|p| p.preference_id == pref) {
            let (_, router_ws) =
                sequence_log_prob_tensor(&bt, attach, &pair.prompt, &pair.chosen)?;
            let (p, l) = (pair.prompt.len(), pair.chosen.len());
            for (li, w) in router_ws.iter().enumerate() {
                let wv = w.values();
                for row in p..p + l {
                    for s in 0..kp1 {
                        sums[li][s] += wv[row * kp1 + s];
                    }
                }
            }
            tokens += l;
        }
        for (li, sum) in sums.into_iter().enumerate() {
            records.push(TelemetryRecord {
                layer_index: li,
                preference_id: pref,
                mean_weights: sum.into_iter().map(|s| s / tokens as f64).collect(),
                step,
            });
        }
    }
    Ok(records)
}

/// Scalar separation measure over a set of records:
///
/// score = clip(mean over preferences of (own-group mass − max other-group
/// mass), 0, 1), where masses are first averaged over layers. 0 means no
/// separation (uniform router), 1 means every preference routes entirely to
/// its own group.
pub fn specialization_score(
    records: &[TelemetryRecord],
    groups: &ExpertGroupTable,
) -> Result<f64> {
    let mut diffs = Vec::new();
    for entry in groups.entries() {
        let own: Vec<&TelemetryRecord> = records
            .iter()
            .filter(|r| r.preference_id == entry.preference_id)
            .collect();
        if own.is_empty() {
            return Err(Error::Data(format!(
                "no records for preference {}",
                entry.preference_id
            )));
        }
        let n_groups = groups.entries().len();
        let mut mean_mass = vec![0.0; n_groups];
        for r in &own {
            for (gi, m) in r.group_masses(groups).into_iter().enumerate() {
                mean_mass[gi] += m / own.len() as f64;
            }
        }
        let own_idx = groups
            .entries()
            .iter()
            .position(|e| e.preference_id == entry.preference_id)
            .unwrap();
        let max_other = mean_mass
            .iter()
            .enumerate()
            .filter(|&(gi, _)| gi != own_idx)
            .map(|(_, &m)| m)
            .fold(f64::NEG_INFINITY, f64::max);
        diffs.push(mean_mass[own_idx] - max_other);
    }
    Ok((diffs.iter().sum::<f64>() / diffs.len() as f64).clamp(0.0, 1.0))
}

/// Which computation a benchmark row timed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPath {
    Sequential,
    Parallel,
    /// Plain x·W0 with no adapter, the lower bound on layer cost.
    LinearBaseline,
    /// Routing-loss evaluation on the layer's router weights.
    EgsLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPhase {
    Forward,
    ForwardBackward,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchShape {
    pub k: usize,
    pub rank: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// batch · sequence length, i.e. router token rows.
    pub tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub path: BenchPath,
    pub phase: BenchPhase,
    pub shape: BenchShape,
    /// Median wall time per call over `reps` measured calls.
    pub seconds: f64,
}

const WARMUPS: usize = 5;

fn median_time(mut f: impl FnMut(), reps: usize) -> f64 {
    for _ in 0..WARMUPS {
        f();
    }
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

/// Times several closures with their reps interleaved round-robin, so slow
/// drift in machine speed (thermal throttling, co-tenant load) biases every
/// closure's median the same way instead of whichever ran last.
fn median_times_interleaved(fs: &mut [&mut dyn FnMut()], reps: usize) -> Vec<f64> {
    for f in fs.iter_mut() {
        for _ in 0..WARMUPS {
            f();
        }
    }
    let mut times = vec![Vec::with_capacity(reps); fs.len()];
    for _ in 0..reps {
        for (f, ts) in fs.iter_mut().zip(times.iter_mut()) {
            let t0 = Instant::now();
            f();
            ts.push(t0.elapsed().as_secs_f64());
        }
    }
    times
        .into_iter()
        .map(|mut ts| {
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts[ts.len() / 2]
        })
        .collect()
}

/// Times forward and forward+backward for both adapter paths plus the linear
/// baseline and routing-loss cost, one result row per (path, phase, shape).
/// Paths are verified equivalent within 1e-10 on each shape before timing.
/// Runs on the calling thread only. `reps` is clamped to at least 30.
pub fn bench_forward(shapes: &[BenchShape], reps: usize) -> Result<Vec<BenchResult>> {
    let reps = reps.max(30);
    let mut out = Vec::new();
    for &shape in shapes {
        let BenchShape { k, rank, in_dim, out_dim, tokens } = shape;
        let mut rng = Rng::new(0x9e3779b9);
        let groups = ExpertGroupTable::even(k, 1, 0.8)?;
        let mut layer = init_pmol_layer(in_dim, out_dim, rank, groups.clone(), &mut rng)?;
        // non-zero B so both paths do representative work
        for e in layer.experts_mut() {
            e.b_mat = rng.normal_vec(rank * out_dim, 0.0, 0.1);
        }
        crate::adapter::stack_experts(&mut layer);
        let w0 = Tensor::new(vec![in_dim, out_dim], rng.normal_vec(in_dim * out_dim, 0.0, 0.05))?;
        let x = Tensor::new(vec![tokens, in_dim], rng.normal_vec(tokens * in_dim, 0.0, 1.0))?;

        // equivalence gate on the exact benchmarked shape
        let leaves = layer.leaves(None)?;
        let (seq_out, w_seq) = forward_with_leaves(&leaves, &w0, &x, MoePath::Sequential)?;
        let (par_out, _) = forward_with_leaves(&leaves, &w0, &x, MoePath::Parallel)?;
        let max_diff = seq_out
            .values()
            .iter()
            .zip(par_out.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if max_diff >= 1e-10 {
            return Err(Error::Numeric(format!(
                "path outputs differ by {max_diff} on shape {shape:?}; refusing to time"
            )));
        }

        let fwd = |moe: MoePath| {
            let leaves = layer.leaves(None).unwrap();
            forward_with_leaves(&leaves, &w0, &x, moe).unwrap();
        };
        let fwd_bwd = |moe: MoePath| {
            let tape = Tape::new();
            let leaves = layer.leaves(Some(&tape)).unwrap();
            let (y, _) = forward_with_leaves(&leaves, &w0, &x, moe).unwrap();
            let loss = ops::sum_all(&y).unwrap();
            backward(&loss).unwrap();
        };
        let secs = median_times_interleaved(
            &mut [
                &mut || fwd(MoePath::Sequential),
                &mut || fwd(MoePath::Parallel),
                &mut || fwd_bwd(MoePath::Sequential),
                &mut || fwd_bwd(MoePath::Parallel),
            ],
            reps,
        );
        for (i, path) in [BenchPath::Sequential, BenchPath::Parallel].into_iter().enumerate() {
            out.push(BenchResult { path, phase: BenchPhase::Forward, shape, seconds: secs[i] });
            out.push(BenchResult {
                path,
                phase: BenchPhase::ForwardBackward,
                shape,
                seconds: secs[i + 2],
            });
        }

        let secs = median_time(
            || {
                ops::matmul(&x, &w0).unwrap();
            },
            reps,
        );
        out.push(BenchResult {
            path: BenchPath::LinearBaseline,
            phase: BenchPhase::Forward,
            shape,
            seconds: secs,
        });

        let d = balance_distribution(&groups, 0)?;
        let secs = median_time(
            || {
                egs_loss(&w_seq, &d).unwrap();
            },
            reps,
        );
        out.push(BenchResult {
            path: BenchPath::EgsLoss,
            phase: BenchPhase::Forward,
            shape,
            seconds: secs,
        });
    }
    Ok(out)
}

/// CSV with header `path,phase,k,rank,in_dim,out_dim,tokens,seconds`.
pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("path,phase,k,rank,in_dim,out_dim,tokens,seconds\n");
    for r in results {
        let path = serde_json::to_string(&r.path).unwrap().trim_matches('"').to_string();
        let phase = serde_json::to_string(&r.phase).unwrap().trim_matches('"').to_string();
        s.push_str(&format!(
            "{path},{phase},{},{},{},{},{},{:.9}\n",
            r.shape.k, r.shape.rank, r.shape.in_dim, r.shape.out_dim, r.shape.tokens, r.seconds
        ));
    }
    s
}

/// CSV with header `layer,preference,step,w0..wK` (per-expert means).
pub fn telemetry_csv(records: &[TelemetryRecord]) -> String {
    let kp1 = records.first().map_or(0, |r| r.mean_weights.len());
    let mut s = String::from("layer,preference,step");
    for i in 0..kp1 {
        s.push_str(&format!(",w{i}"));
    }
    s.push('\n');
    for r in records {
        s.push_str(&format!("{},{},{}", r.layer_index, r.preference_id, r.step));
        for w in &r.mean_weights {
            s.push_str(&format!(",{w:.12}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig};
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};

    fn model_and_data() -> (PmolModel, Vec<PreferencePair>) {
        let cfg = BackboneConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            seed: 4,
        };
        let mut rng = Rng::new(4);
        let backbone = init_backbone(&cfg, &mut rng).unwrap();
        let groups = ExpertGroupTable::even(2, 2, 0.8).unwrap();
        let model = PmolModel::new(backbone, groups, 4, &mut rng).unwrap();
        let pairs = generate_synthetic_dataset(&SyntheticSpec {
            n_preferences: 2,
            pairs_per_preference: 4,
            gap: 1.0,
            conflict: 0.0,
            seed: 2,
        })
        .unwrap();
        (model, pairs)
    }

    #[test]
    fn zero_router_gives_uniform_records() {
        let (mut model, pairs) = model_and_data();
        for layer in &mut model.adapters {
            let r = layer.router_mut();
            r.w_r.iter_mut().for_each(|v| *v = 0.0);
            r.bias.iter_mut().for_each(|v| *v = 0.0);
            crate::adapter::stack_experts(layer);
        }
        let records = record_expert_weights(&model, &pairs, 0).unwrap();
        assert_eq!(records.len(), 2 * 2); // layers x preferences
        let kp1 = 5;
        for r in &records {
            for &w in &r.mean_weights {
                assert!((w - 1.0 / kp1 as f64).abs() < 1e-12);
            }
            let masses = r.group_masses(model.groups());
            for m in masses {
                assert!((m - 2.0 / kp1 as f64).abs() < 1e-12);
            }
        }
        let score = specialization_score(&records, model.groups()).unwrap();
        assert!(score.abs() < 1e-12);
    }

    #[test]
    fn records_sum_to_one_and_leave_model_unchanged() {
        let (model, pairs) = model_and_data();
        let before = serde_json::to_string(&model).unwrap();
        let records = record_expert_weights(&model, &pairs, 3).unwrap();
        for r in &records {
            let sum: f64 = r.mean_weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
            assert_eq!(r.step, 3);
        }
        assert_eq!(serde_json::to_string(&model).unwrap(), before);
    }

    fn synthetic_record(layer: usize, pref: usize, weights: Vec<f64>) -> TelemetryRecord {
        TelemetryRecord { layer_index: layer, preference_id: pref, mean_weights: weights, step: 0 }
    }

    #[test]
    fn specialization_score_extremes_and_relabeling() {
        let groups = ExpertGroupTable::even(2, 2, 0.8).unwrap();
        // full own-group routing -> 1
        let full = vec![
            synthetic_record(0, 0, vec![0.5, 0.5, 0.0, 0.0, 0.0]),
            synthetic_record(0, 1, vec![0.0, 0.0, 0.5, 0.5, 0.0]),
        ];
        assert!((specialization_score(&full, &groups).unwrap() - 1.0).abs() < 1e-12);

        // relabeling preferences (and their groups) leaves the score unchanged
        let swapped_groups = ExpertGroupTable::new(
            vec![
                crate::adapter::GroupEntry { preference_id: 1, start: 0, end: 2, sc: 0.8 },
                crate::adapter::GroupEntry { preference_id: 0, start: 2, end: 4, sc: 0.8 },
            ],
            4,
        )
        .unwrap();
        let relabeled = vec![
            synthetic_record(0, 1, vec![0.5, 0.5, 0.0, 0.0, 0.0]),
            synthetic_record(0, 0, vec![0.0, 0.0, 0.5, 0.5, 0.0]),
        ];
        assert!(
            (specialization_score(&relabeled, &swapped_groups).unwrap() - 1.0).abs() < 1e-12
        );

        // missing preference -> error
        assert!(specialization_score(&full[..1], &groups).is_err());
    }

    #[test]
    fn bench_smoke() {
        let shapes = [BenchShape { k: 4, rank: 2, in_dim: 16, out_dim: 16, tokens: 64 }];
        let results = bench_forward(&shapes, 30).unwrap();
        // 2 paths x 2 phases + linear + egs
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(r.seconds > 0.0);
        }
        let csv = bench_csv(&results);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("path,phase,"));
        assert!(csv.contains("sequential,forward_backward"));
    }
}
