//! Training objectives.
//!
//! The main branch is trained on the labels. The sub branch runs the same
//! parameters on the same batch under masking, extra dropout or a higher
//! drop-path rate, and is trained against the main branch's probabilities
//! held constant. The total loss is `w_ce * main + w_kd * sub`.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::masking::{embed_masked, MaskSpec, MaskStrategy};
use crate::rng::{Purpose, StreamKey};
use crate::tensor::{Real, Tape, Var};
use crate::vit::{check_probability, Bound, DropSpec, ParamStore, TokenPositions, Vit};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Ce,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_ce: 0.5, w_kd: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.w_ce) || !ok(self.w_kd) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if (self.w_ce + self.w_kd - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "loss weights must sum to 1, got {} + {}",
                self.w_ce, self.w_kd
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubVariant {
    Masksub,
    Dropsub,
    Pathsub,
}

/// What the sub branch is trained against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubTarget {
    /// Probabilities of the main branch, held constant.
    #[default]
    Kd,
    /// The ground-truth labels.
    HardLabel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Main branch plus sub branch.
    #[default]
    SubModel,
    /// Only the perturbed branch, trained on labels.
    SingleModel,
}

/// Sub-branch settings as written in a config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SubConfig {
    pub variant: SubVariant,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default)]
    pub mask_strategy: MaskStrategy,
    /// Cell size for zero-fill masking.
    #[serde(default)]
    pub mask_patch_size: usize,
}

fn default_strength() -> f64 {
    0.5
}

impl SubConfig {
    pub fn masksub(ratio: f64) -> Self {
        SubConfig {
            variant: SubVariant::Masksub,
            strength: ratio,
            mask_strategy: MaskStrategy::TokenRemoval,
            mask_patch_size: 0,
        }
    }

    pub fn dropsub(p: f64) -> Self {
        SubConfig {
            variant: SubVariant::Dropsub,
            strength: p,
            ..Self::masksub(0.0)
        }
    }

    pub fn pathsub(delta: f64) -> Self {
        SubConfig {
            variant: SubVariant::Pathsub,
            strength: delta,
            ..Self::masksub(0.0)
        }
    }
}

/// Dropout and drop-path probabilities of one branch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DropRates {
    pub dropout: f64,
    pub drop_path: f64,
}

/// Resolved sub-branch perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubSpec {
    pub variant: SubVariant,
    pub strength: f64,
    /// Strategy, ratio and cell size when the branch masks its input.
    pub mask: Option<(MaskStrategy, f64, usize)>,
    pub drops: DropRates,
}

/// Resolves a sub-branch config against the main branch's drop rates.
pub fn build_sub_spec(config: &SubConfig, main: DropRates) -> Result<SubSpec> {
    let s = config.strength;
    let (mask, drops) = match config.variant {
        SubVariant::Masksub => {
            let limit_ok = match config.mask_strategy {
                MaskStrategy::TokenRemoval => (0.0..1.0).contains(&s),
                _ => (0.0..=1.0).contains(&s),
            };
            if !limit_ok {
                return Err(Error::Range {
                    what: "mask ratio",
                    value: s,
                    range: "[0, 1), [0, 1] without token removal",
                });
            }
            if config.mask_strategy == MaskStrategy::ZeroFill && config.mask_patch_size == 0 {
                return Err(Error::Config("zero-fill needs mask-patch-size".into()));
            }
            (
                Some((config.mask_strategy, s, config.mask_patch_size)),
                main,
            )
        }
        SubVariant::Dropsub => {
            check_probability("dropout", s)?;
            (
                None,
                DropRates {
                    dropout: s,
                    drop_path: main.drop_path,
                },
            )
        }
        SubVariant::Pathsub => {
            if !(s > 0.0) {
                return Err(Error::Range {
                    what: "drop-path increase",
                    value: s,
                    range: "(0, 1)",
                });
            }
            let p = main.drop_path + s;
            check_probability("drop-path", p)?;
            (
                None,
                DropRates {
                    dropout: main.dropout,
                    drop_path: p,
                },
            )
        }
    };
    Ok(SubSpec {
        variant: config.variant,
        strength: s,
        mask,
        drops,
    })
}

/// Random streams of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepKeys {
    pub seed: u64,
    pub step: u64,
}

impl StepKeys {
    pub fn new(seed: u64, step: u64) -> Self {
        StepKeys { seed, step }
    }

    pub fn main_drop(&self) -> StreamKey {
        StreamKey::new(self.seed, Purpose::MainDrop, self.step)
    }

    pub fn sub_drop(&self) -> StreamKey {
        StreamKey::new(self.seed, Purpose::SubDrop, self.step)
    }

    pub fn sub_mask(&self) -> StreamKey {
        StreamKey::new(self.seed, Purpose::SubMask, self.step)
    }
}

impl SubSpec {
    pub fn mask_spec(&self, keys: &StepKeys) -> Result<Option<MaskSpec>> {
        self.mask
            .map(|(strategy, ratio, patch)| MaskSpec::new(strategy, ratio, patch, keys.sub_mask()))
            .transpose()
    }

    pub fn drop_spec(&self, keys: &StepKeys) -> Result<DropSpec> {
        DropSpec::train(self.drops.dropout, self.drops.drop_path, keys.sub_drop())
    }
}

fn hard_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    batch: &Batch<T>,
    loss: LossKind,
    smoothing: f64,
) -> Result<Var> {
    let target = tape.constant(&[batch.len(), batch.classes], batch.targets(smoothing))?;
    match loss {
        LossKind::Ce => tape.cross_entropy_soft(logits, target),
        LossKind::Bce => tape.bce_soft(logits, target),
    }
}

/// Unperturbed-input forward pass and its label loss.
#[allow(clippy::too_many_arguments)]
pub fn main_step<T: Real>(
    tape: &mut Tape<T>,
    vit: &Vit,
    bound: &Bound,
    batch: &Batch<T>,
    drop: &DropSpec,
    loss: LossKind,
    smoothing: f64,
) -> Result<(Var, Var)> {
    let x = tape.leaf(&batch.images, false);
    let tokens = vit.patch_embed(tape, bound, x)?;
    let logits = vit.forward(tape, bound, tokens, &TokenPositions::All, drop)?;
    let l = hard_loss(tape, logits, batch, loss, smoothing)?;
    Ok((logits, l))
}

/// Logits of the perturbed branch.
pub fn sub_forward<T: Real>(
    tape: &mut Tape<T>,
    vit: &Vit,
    bound: &Bound,
    batch: &Batch<T>,
    sub: &SubSpec,
    drop: &DropSpec,
    keys: &StepKeys,
) -> Result<Var> {
    let (tokens, positions) = match sub.mask_spec(keys)? {
        Some(spec) => embed_masked(vit, tape, bound, &batch.images, &spec)?,
        None => {
            let x = tape.leaf(&batch.images, false);
            (vit.patch_embed(tape, bound, x)?, TokenPositions::All)
        }
    };
    vit.forward(tape, bound, tokens, &positions, drop)
}

/// Probabilities of constant main logits: softmax for CE, sigmoid for BCE.
pub fn soft_targets<T: Real>(tape: &mut Tape<T>, main_logits: Var, loss: LossKind) -> Result<Var> {
    if tape.requires_grad(main_logits) {
        return Err(Error::Contract(
            "sub-branch target must be detached from the main branch".into(),
        ));
    }
    match loss {
        LossKind::Ce => tape.softmax(main_logits),
        LossKind::Bce => Ok(tape.sigmoid(main_logits)),
    }
}

/// Perturbed forward pass trained against the constant main logits.
#[allow(clippy::too_many_arguments)]
pub fn sub_step<T: Real>(
    tape: &mut Tape<T>,
    vit: &Vit,
    bound: &Bound,
    batch: &Batch<T>,
    sub: &SubSpec,
    keys: &StepKeys,
    main_logits: Var,
    loss: LossKind,
) -> Result<(Var, Var)> {
    let target = soft_targets(tape, main_logits, loss)?;
    let drop = sub.drop_spec(keys)?;
    let logits = sub_forward(tape, vit, bound, batch, sub, &drop, keys)?;
    let l = match loss {
        LossKind::Ce => tape.cross_entropy_soft(logits, target)?,
        LossKind::Bce => tape.bce_soft(logits, target)?,
    };
    Ok((logits, l))
}

pub fn combined_loss<T: Real>(tape: &mut Tape<T>, main: Var, sub: Var, weights: &LossWeights) -> Result<Var> {
    let a = tape.scale(main, T::lit(weights.w_ce));
    let b = tape.scale(sub, T::lit(weights.w_kd));
    tape.add(a, b)
}

/// Complete objective of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub weights: LossWeights,
    pub sub: Option<SubSpec>,
    pub sub_target: SubTarget,
    pub loss: LossKind,
    pub smoothing: f64,
    pub main_drops: DropRates,
}

impl Objective {
    /// Plain label training of the unperturbed model.
    pub fn baseline(main_drops: DropRates) -> Self {
        Objective {
            kind: ObjectiveKind::SubModel,
            weights: LossWeights { w_ce: 1.0, w_kd: 0.0 },
            sub: None,
            sub_target: SubTarget::Kd,
            loss: LossKind::Ce,
            smoothing: 0.0,
            main_drops,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        check_probability("dropout", self.main_drops.dropout)?;
        check_probability("drop-path", self.main_drops.drop_path)?;
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Range {
                what: "label-smoothing",
                value: self.smoothing,
                range: "[0, 1)",
            });
        }
        if self.kind == ObjectiveKind::SingleModel && self.sub.is_none() {
            return Err(Error::Config("single-model objective needs a sub-spec".into()));
        }
        Ok(())
    }

    pub fn main_drop(&self, keys: &StepKeys) -> Result<DropSpec> {
        DropSpec::train(self.main_drops.dropout, self.main_drops.drop_path, keys.main_drop())
    }

    /// Records one step's forward passes and losses on `tape`.
    pub fn build_step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vit: &Vit,
        bound: &Bound,
        batch: &Batch<T>,
        keys: &StepKeys,
    ) -> Result<StepOutputs> {
        self.build_step_with(tape, vit, bound, batch, keys, None)
    }

    /// As [`Objective::build_step`], but when `frozen_main` is given the
    /// sub-branch target is computed from those logit values, recorded as a
    /// constant, instead of from the live main logits.
    pub fn build_step_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vit: &Vit,
        bound: &Bound,
        batch: &Batch<T>,
        keys: &StepKeys,
        frozen_main: Option<&[T]>,
    ) -> Result<StepOutputs> {
        if self.kind == ObjectiveKind::SingleModel {
            let sub = self.sub.as_ref().expect("validated");
            let drop = sub.drop_spec(keys)?;
            let logits = sub_forward(tape, vit, bound, batch, sub, &drop, keys)?;
            let l = hard_loss(tape, logits, batch, self.loss, self.smoothing)?;
            return Ok(StepOutputs {
                logits_main: logits,
                logits_sub: None,
                loss_main: l,
                loss_sub: None,
                total: l,
            });
        }
        let drop = self.main_drop(keys)?;
        let (logits_main, loss_main) = main_step(tape, vit, bound, batch, &drop, self.loss, self.smoothing)?;
        let Some(sub) = self.sub.as_ref() else {
            return Ok(StepOutputs {
                logits_main,
                logits_sub: None,
                loss_main,
                loss_sub: None,
                total: loss_main,
            });
        };
        let (logits_sub, loss_sub) = match self.sub_target {
            SubTarget::Kd => {
                let frozen = match frozen_main {
                    Some(v) => {
                        let shape = tape.shape(logits_main).to_vec();
                        tape.constant(&shape, v.to_vec())?
                    }
                    None => tape.detach(logits_main),
                };
                sub_step(tape, vit, bound, batch, sub, keys, frozen, self.loss)?
            }
            SubTarget::HardLabel => {
                let drop = sub.drop_spec(keys)?;
                let logits = sub_forward(tape, vit, bound, batch, sub, &drop, keys)?;
                let l = hard_loss(tape, logits, batch, self.loss, self.smoothing)?;
                (logits, l)
            }
        };
        let total = combined_loss(tape, loss_main, loss_sub, &self.weights)?;
        Ok(StepOutputs {
            logits_main,
            logits_sub: Some(logits_sub),
            loss_main,
            loss_sub: Some(loss_sub),
            total,
        })
    }
}

/// Tape handles of one step. For a single-model objective the trained
/// perturbed branch is reported as the main branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOutputs {
    pub logits_main: Var,
    pub logits_sub: Option<Var>,
    pub loss_main: Var,
    pub loss_sub: Option<Var>,
    pub total: Var,
}

impl StepOutputs {
    /// `(main, sub, total)` loss values; a missing sub branch reads 0.
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> (f64, f64, f64) {
        (
            tape.scalar(self.loss_main),
            self.loss_sub.map_or(0.0, |v| tape.scalar(v)),
            tape.scalar(self.total),
        )
    }
}

/// Label cross-entropy of the unperturbed model and of the model with its
/// input masked by `mask`, both in evaluation mode.
pub fn probe_losses<T: Real>(
    vit: &Vit,
    params: &ParamStore<T>,
    batch: &Batch<T>,
    mask: &MaskSpec,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let eval = DropSpec::eval();
    let (_, eq1) = main_step(&mut tape, vit, &bound, batch, &eval, LossKind::Ce, 0.0)?;
    let (tokens, positions) = embed_masked(vit, &mut tape, &bound, &batch.images, mask)?;
    let logits = vit.forward(&mut tape, &bound, tokens, &positions, &eval)?;
    let eq2 = hard_loss(&mut tape, logits, batch, LossKind::Ce, 0.0)?;
    Ok((tape.scalar(eq1), tape.scalar(eq2)))
}
