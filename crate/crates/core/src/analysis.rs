//! Training-dynamics instrumentation: branch gradient norms, compute
//! accounting and the metrics CSV.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::masking::masked_count;
use crate::objective::{Objective, ObjectiveKind, StepKeys};
use crate::tensor::{GradCheckReport, Real, Tape};
use crate::trainer::TrainRecord;
use crate::vit::{ParamStore, Vit, VitConfig};

pub const METRICS_HEADER: &str = "epoch,step,loss_total,loss_main,loss_sub,probe_eq1,probe_eq2,grad_norm_main,grad_norm_sub,lr,train_acc,eval_acc";

/// Parameter gradients of each branch's weighted loss, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchGrads<T> {
    pub main: Vec<Vec<T>>,
    pub sub: Vec<Vec<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BranchGradReport {
    pub grad_norm_main: f64,
    pub grad_norm_sub: f64,
}

/// Backward of `w_ce * loss_main` alone, then of `w_kd * loss_sub` alone,
/// on one recorded step. Branches absent from the objective read zero.
pub fn branch_grads<T: Real>(
    vit: &Vit,
    params: &ParamStore<T>,
    batch: &Batch<T>,
    objective: &Objective,
    keys: &StepKeys,
) -> Result<BranchGrads<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = objective.build_step(&mut tape, vit, &bound, batch, keys)?;
    let collect = |tape: &Tape<T>| bound.vars().iter().map(|&v| tape.grad_or_zeros(v)).collect::<Vec<_>>();

    let w_main = match (objective.kind, out.loss_sub) {
        (ObjectiveKind::SubModel, Some(_)) => objective.weights.w_ce,
        _ => 1.0,
    };
    let main = tape.scale(out.loss_main, T::lit(w_main));
    tape.backward(main)?;
    let main = collect(&tape);
    tape.zero_grad();
    let sub = match out.loss_sub {
        Some(l) => {
            let s = tape.scale(l, T::lit(objective.weights.w_kd));
            tape.backward(s)?;
            collect(&tape)
        }
        None => main.iter().map(|g| vec![T::zero(); g.len()]).collect(),
    };
    Ok(BranchGrads { main, sub })
}

/// Mean over parameter tensors of each tensor's gradient L2 norm.
pub fn mean_tensor_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    if grads.is_empty() {
        return 0.0;
    }
    let total: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .sum();
    total / grads.len() as f64
}

pub fn branch_grad_norms<T: Real>(
    vit: &Vit,
    params: &ParamStore<T>,
    batch: &Batch<T>,
    objective: &Objective,
    keys: &StepKeys,
) -> Result<BranchGradReport> {
    let g = branch_grads(vit, params, batch, objective, keys)?;
    Ok(BranchGradReport {
        grad_norm_main: mean_tensor_norm(&g.main),
        grad_norm_sub: mean_tensor_norm(&g.sub),
    })
}

/// Settings of [`check_objective_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub depth: usize,
    pub dim: usize,
    pub seed: u64,
    pub eps: f64,
    /// Standard deviation of the random initialisation.
    pub init_std: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            depth: 2,
            dim: 32,
            seed: 0,
            eps: 1e-5,
            init_std: 0.25,
        }
    }
}

/// Finite-difference check of the full masked sub-model objective on a
/// small ViT in 64-bit: 8×8 images in 4×4 patches, 2 heads, 3 classes, a
/// batch of 4, half the tokens removed, main dropout and drop-path 0.1.
/// Masks and drops come from fixed streams, so every evaluation sees the
/// same ones, and the sub-branch target is held at its value for the
/// unperturbed parameters. Returns the report and the parameter count.
pub fn check_objective_gradients(setup: &GradCheckSetup) -> Result<(GradCheckReport, usize)> {
    use crate::objective::{build_sub_spec, DropRates, LossKind, LossWeights, SubConfig, SubTarget};
    use crate::rng::{uniform01, Purpose, StreamKey};
    use crate::tensor::{grad_check, Tensor};
    use crate::vit::Bound;

    let config = VitConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        dim: setup.dim,
        depth: setup.depth,
        heads: 2,
        mlp_ratio: 2.0,
        classes: 3,
        class_token: true,
    };
    let vit = Vit::new(config)?;
    let store = vit.init_params_with_std::<f64>(setup.seed, setup.init_std);
    let drops = DropRates {
        dropout: 0.1,
        drop_path: 0.1,
    };
    let objective = Objective {
        kind: ObjectiveKind::SubModel,
        weights: LossWeights::default(),
        sub: Some(build_sub_spec(&SubConfig::masksub(0.5), drops)?),
        sub_target: SubTarget::Kd,
        loss: LossKind::Ce,
        smoothing: 0.0,
        main_drops: drops,
    };
    let mut rng = StreamKey::new(setup.seed, Purpose::Test, 0).rng();
    let batch = Batch {
        images: Tensor::from_fn(&[4, 3, 8, 8], |_| 2.0 * uniform01(&mut rng) - 1.0),
        labels: vec![0, 2, 1, 0],
        classes: 3,
    };
    let keys = StepKeys::new(setup.seed, 3);
    let frozen = {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = objective.build_step(&mut tape, &vit, &bound, &batch, &keys)?;
        tape.value(out.logits_main).to_vec()
    };
    let mut params: Vec<Tensor<f64>> = store.tensors().cloned().collect();
    let count = store.num_scalars();
    let report = grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let out = objective.build_step_with(tape, &vit, &bound, &batch, &keys, Some(&frozen))?;
            Ok(out.total)
        },
        &mut params,
        setup.eps,
    )?;
    Ok((report, count))
}

/// Per-sample multiply-accumulate counts of one main and one sub forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopBudget {
    pub flops_main: u64,
    pub flops_sub: u64,
    /// `(main + sub) / main` from the analytic count.
    pub ratio: f64,
    /// `1 + keep_ratio`, the count that treats every cost as linear in tokens.
    pub linear_ratio: f64,
    pub kept_tokens: usize,
}

fn forward_macs(c: &VitConfig, patch_tokens: usize) -> u64 {
    let (d, h) = (c.dim as u64, c.hidden_dim() as u64);
    let p = c.num_patches() as u64;
    let t = (patch_tokens + usize::from(c.class_token)) as u64;
    let embed = p * c.patch_features() as u64 * d;
    let linear = t * (3 * d * d + d * d + 2 * d * h);
    let attention = 2 * t * t * d;
    embed + c.depth as u64 * (linear + attention) + d * c.classes as u64
}

/// Compute of a sub forward that keeps `keep_ratio` of the patch tokens,
/// relative to the main forward. Patch projection runs on every patch in
/// both branches; removal happens after it.
pub fn flop_estimate(config: &VitConfig, keep_ratio: f64) -> Result<FlopBudget> {
    config.validate()?;
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Range {
            what: "keep-ratio",
            value: keep_ratio,
            range: "(0, 1]",
        });
    }
    let p = config.num_patches();
    let kept = p - masked_count(p, 1.0 - keep_ratio);
    if kept == 0 {
        return Err(Error::Contract("keep-ratio leaves no tokens".into()));
    }
    let main = forward_macs(config, p);
    let sub = forward_macs(config, kept);
    Ok(FlopBudget {
        flops_main: main,
        flops_sub: sub,
        ratio: (main + sub) as f64 / main as f64,
        linear_ratio: 1.0 + keep_ratio,
        kept_tokens: kept,
    })
}

fn real(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn metrics_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let reals = [
            r.loss_total,
            r.loss_main,
            r.loss_sub,
            r.probe_eq1,
            r.probe_eq2,
            r.grad_norm_main,
            r.grad_norm_sub,
            r.lr,
            r.train_acc,
            r.eval_acc,
        ];
        s.push_str(&format!("{},{}", r.epoch, r.step));
        for v in reals {
            s.push(',');
            s.push_str(&real(v));
        }
        s.push('\n');
    }
    s
}

pub fn emit_metrics(records: &[TrainRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("no records to emit".into()));
    }
    fs::write(path, metrics_csv(records))?;
    Ok(())
}

pub fn parse_metrics(text: &str) -> Result<Vec<TrainRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "metrics header {:?} does not match {METRICS_HEADER:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("row {} has {} fields, expected 12", i + 1, f.len())));
        }
        let bad = |what: &str| Error::Format(format!("row {}: cannot parse {what}", i + 1));
        let int = |j: usize| f[j].parse::<usize>().map_err(|_| bad(f[j]));
        let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad(f[j]));
        out.push(TrainRecord {
            epoch: int(0)?,
            step: int(1)?,
            loss_total: num(2)?,
            loss_main: num(3)?,
            loss_sub: num(4)?,
            probe_eq1: num(5)?,
            probe_eq2: num(6)?,
            grad_norm_main: num(7)?,
            grad_norm_sub: num(8)?,
            lr: num(9)?,
            train_acc: num(10)?,
            eval_acc: num(11)?,
        });
    }
    Ok(out)
}

pub fn load_metrics(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = fs::read_to_string(path)?;
    parse_metrics(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochDelta {
    pub epoch: usize,
    pub probe_eq1: f64,
    pub probe_eq2: f64,
    pub eval_acc: f64,
}

/// Differences `b - a` between two runs at their common epochs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub epochs: Vec<EpochDelta>,
    pub final_epoch: usize,
    pub final_probe_eq1: f64,
    pub final_probe_eq2: f64,
    pub final_eval_acc: f64,
    /// Run b ends with lower probe losses of both kinds than run a.
    pub b_improves_probes: bool,
    pub b_eval_at_least_a: bool,
}

pub fn compare_runs(a: &[TrainRecord], b: &[TrainRecord]) -> Result<Comparison> {
    let epochs: Vec<EpochDelta> = a
        .iter()
        .filter_map(|ra| {
            b.iter().find(|rb| rb.epoch == ra.epoch).map(|rb| EpochDelta {
                epoch: ra.epoch,
                probe_eq1: rb.probe_eq1 - ra.probe_eq1,
                probe_eq2: rb.probe_eq2 - ra.probe_eq2,
                eval_acc: rb.eval_acc - ra.eval_acc,
            })
        })
        .collect();
    let last = epochs
        .iter()
        .max_by_key(|d| d.epoch)
        .cloned()
        .ok_or_else(|| Error::Format("runs share no epochs".into()))?;
    Ok(Comparison {
        final_epoch: last.epoch,
        final_probe_eq1: last.probe_eq1,
        final_probe_eq2: last.probe_eq2,
        final_eval_acc: last.eval_acc,
        b_improves_probes: last.probe_eq1 < 0.0 && last.probe_eq2 < 0.0,
        b_eval_at_least_a: last.eval_acc >= 0.0,
        epochs,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6}  {:>14}  {:>14}  {:>14}", "epoch", "d_probe_eq1", "d_probe_eq2", "d_eval_acc")?;
        for d in &self.epochs {
            writeln!(
                f,
                "{:>6}  {:>14.6e}  {:>14.6e}  {:>14.6e}",
                d.epoch, d.probe_eq1, d.probe_eq2, d.eval_acc
            )?;
        }
        writeln!(f, "final epoch {}", self.final_epoch)?;
        writeln!(f, "b improves both probe losses: {}", self.b_improves_probes)?;
        write!(f, "b eval accuracy >= a: {}", self.b_eval_at_least_a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, x: f64) -> TrainRecord {
        TrainRecord {
            epoch,
            step: epoch * 10,
            loss_total: x,
            loss_main: x / 3.0,
            loss_sub: 1.0 / 7.0,
            probe_eq1: x.sqrt(),
            probe_eq2: 2.0,
            grad_norm_main: 1e-5,
            grad_norm_sub: 0.0,
            lr: 3.3e-4,
            train_acc: 0.5,
            eval_acc: 0.25,
        }
    }

    #[test]
    fn flop_ratios() {
        let c = VitConfig::default();
        assert_eq!(flop_estimate(&c, 1.0).unwrap().ratio, 2.0);
        let half = flop_estimate(&c, 0.5).unwrap();
        assert!((1.25..=1.6).contains(&half.ratio), "{}", half.ratio);
        let quarter = flop_estimate(&c, 0.25).unwrap();
        assert_eq!(quarter.linear_ratio, 1.25);
        assert!(quarter.ratio < 1.25 && quarter.ratio > 1.2, "{}", quarter.ratio);
        assert!(flop_estimate(&c, 0.0).is_err());
    }

    #[test]
    fn flop_count_by_hand() {
        // dim 96, 64 patches + class token, hidden 384, depth 4
        let t = 65u64;
        let block = t * (4 * 96 * 96 + 2 * 96 * 384) + 2 * t * t * 96;
        let want = 64 * 48 * 96 + 4 * block + 96 * 10;
        assert_eq!(flop_estimate(&VitConfig::default(), 1.0).unwrap().flops_main, want);
    }

    #[test]
    fn csv_header_roundtrip_and_determinism() {
        let recs = vec![record(1, 2.302585093), record(2, 1.0 / 3.0)];
        let text = metrics_csv(&recs);
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(text, metrics_csv(&recs));
        assert!(!text.contains('\r'));
        let back = parse_metrics(&text).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.epoch, b.epoch);
            assert!(((a.loss_main - b.loss_main) / a.loss_main).abs() < 1e-8);
            assert_eq!(b.grad_norm_sub, 0.0);
        }
        assert_eq!(metrics_csv(&recs[..1]).lines().count(), 2);
        assert!(matches!(parse_metrics("epoch,step\n"), Err(Error::Format(_))));
    }

    #[test]
    fn compare_self_is_zero() {
        let recs = vec![record(1, 2.0), record(2, 1.0)];
        let c = compare_runs(&recs, &recs).unwrap();
        assert!(c.epochs.iter().all(|d| d.probe_eq1 == 0.0 && d.eval_acc == 0.0));
        assert_eq!(c.final_epoch, 2);
        assert!(!c.b_improves_probes && c.b_eval_at_least_a);
        assert!(compare_runs(&recs, &[record(9, 1.0)]).is_err());
    }
}
