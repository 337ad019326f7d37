//! Losses, the three-stage schedule and the policy-gradient alternative.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::backbones::init_backbones;
use crate::cost::{expected_flops, Accounting, CostModel, Provenance};
use crate::data::PreparedVideo;
use crate::error::{Error, Result};
use crate::eval::{csv_err, evaluate, evaluate_params, init_aggregator, lstm_aggregate};
use crate::gumbel::TemperatureSchedule;
use crate::params::{Checkpoint, ModelKind, ParamSet, SgdMomentum};
use crate::policy::{init_policy, is_policy_param};
use crate::router::{Decider, PolicyTrace, Router, RouterOutput};
use crate::tensor::{Graph, Tensor};

pub const TRAIN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the cost term; accuracy gets `1 - alpha`.
    pub alpha: f64,
    /// Weight of the usage-balance term.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights need alpha in [0,1] and beta >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub epochs: u32,
    pub lr: f64,
    #[serde(default = "enabled")]
    pub enabled: bool,
}

fn enabled() -> bool {
    true
}

impl Stage {
    pub fn new(epochs: u32, lr: f64) -> Self {
        Self {
            epochs,
            lr,
            enabled: true,
        }
    }

    /// Epochs after scaling; an enabled stage with a positive count keeps at
    /// least one epoch.
    pub fn scaled_epochs(&self, scale: f64) -> u32 {
        if !self.enabled || self.epochs == 0 {
            0
        } else {
            ((f64::from(self.epochs) * scale).round() as u32).max(1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub warmup: Stage,
    pub joint: Stage,
    pub finetune: Stage,
    pub momentum: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            warmup: Stage::new(10, 0.02),
            joint: Stage::new(50, 0.001),
            finetune: Stage::new(50, 0.0005),
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Warmup,
    Joint,
    Finetune,
}

impl StageName {
    pub const ALL: [StageName; 3] = [Self::Warmup, Self::Joint, Self::Finetune];
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Warmup => "warmup",
            Self::Joint => "joint",
            Self::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Gumbel,
    Reinforce,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gumbel => "gumbel",
            Self::Reinforce => "reinforce",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel" => Ok(Self::Gumbel),
            "reinforce" => Ok(Self::Reinforce),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// Which part of the action space the policy may use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySetting {
    #[default]
    Full,
    /// Resolutions only, no skipping.
    ResolutionOnly,
    /// Highest resolution or a skip.
    SkipOnly,
}

impl PolicySetting {
    /// `None` when every action is allowed.
    pub fn mask(&self, arch: &ArchConfig) -> Option<Vec<bool>> {
        let l = arch.levels();
        match self {
            Self::Full => None,
            Self::ResolutionOnly => Some((0..arch.num_actions()).map(|a| a < l).collect()),
            Self::SkipOnly => Some((0..arch.num_actions()).map(|a| a == 0 || a >= l).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceConfig {
    pub joint_lr: f64,
    pub finetune_lr: f64,
    /// Moving-average factor of the reward baseline.
    pub baseline_decay: f64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        Self {
            joint_lr: 0.002,
            finetune_lr: 0.001,
            baseline_decay: 0.9,
        }
    }
}

/// Every training hyperparameter. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelKind,
    pub method: Method,
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub schedule: StageSchedule,
    /// Multiplier on every stage's epoch count.
    pub epoch_scale: f64,
    pub batch_size: usize,
    pub temperature: TemperatureSchedule,
    pub cost_table: Provenance,
    pub policy_setting: PolicySetting,
    pub reinforce: ReinforceConfig,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: TRAIN_CONFIG_VERSION,
            seed: 0,
            model: ModelKind::Arnet,
            method: Method::Gumbel,
            arch: ArchConfig::default(),
            weights: LossWeights::default(),
            schedule: StageSchedule::default(),
            epoch_scale: 0.2,
            batch_size: 8,
            temperature: TemperatureSchedule::default(),
            cost_table: Provenance::Paper,
            policy_setting: PolicySetting::Full,
            reinforce: ReinforceConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Published recipe with learning rates raised for networks trained from
    /// scratch on the synthetic benchmark. The published rates assume
    /// pretrained backbones and barely move randomly initialised ones.
    ///
    /// Warm-up leaves the backbones with logits in the hundreds on frames
    /// that carry the patch. Averaged into the video prediction, they make
    /// the straight-through policy gradient spiky, and a single spike can
    /// push the policy into an all-full-resolution corner it never leaves.
    /// Clipping the batch gradient removes the spikes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.schedule.warmup.lr = 0.1;
        c.schedule.joint.lr = 0.02;
        c.schedule.finetune.lr = 0.01;
        c.grad_clip = Some(1.0);
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TRAIN_CONFIG_VERSION {
            return Err(Error::Version {
                expected: TRAIN_CONFIG_VERSION.to_string(),
                found: self.version.to_string(),
            });
        }
        self.arch.validate()?;
        self.weights.validate()?;
        let s = &self.schedule;
        for (name, st) in [
            ("warmup", s.warmup),
            ("joint", s.joint),
            ("finetune", s.finetune),
        ] {
            if !(st.lr > 0.0 && st.lr.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} lr must be positive, got {}",
                    st.lr
                )));
            }
        }
        let r = &self.reinforce;
        if !(r.joint_lr > 0.0 && r.finetune_lr > 0.0 && (0.0..1.0).contains(&r.baseline_decay)) {
            return Err(Error::InvalidArgument(format!(
                "bad reinforce settings {r:?}"
            )));
        }
        if !(0.0..=1.0).contains(&s.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0,1]",
                s.momentum
            )));
        }
        if !(self.epoch_scale > 0.0 && self.epoch_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epoch scale {} must be positive",
                self.epoch_scale
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "gradient clip {:?} must be positive",
                self.grad_clip
            )));
        }
        if self.temperature.tau0 <= 0.0 || self.temperature.floor <= 0.0 {
            return Err(Error::InvalidArgument(
                "temperatures must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Scaled epoch count of a stage; zero when disabled.
    pub fn epochs(&self, stage: StageName) -> u32 {
        self.stage(stage).scaled_epochs(self.epoch_scale)
    }

    pub fn stage(&self, stage: StageName) -> Stage {
        match stage {
            StageName::Warmup => self.schedule.warmup,
            StageName::Joint => self.schedule.joint,
            StageName::Finetune => self.schedule.finetune,
        }
    }

    /// Learning rate of a stage, with the policy-gradient overrides.
    pub fn lr(&self, stage: StageName) -> f64 {
        match (self.method, stage) {
            (Method::Reinforce, StageName::Joint) => self.reinforce.joint_lr,
            (Method::Reinforce, StageName::Finetune) => self.reinforce.finetune_lr,
            _ => self.stage(stage).lr,
        }
    }

    /// Temperature at joint-stage epoch `e` (0-based), read off the
    /// unscaled schedule so a shortened run anneals over the same range.
    pub fn tau(&self, joint_epoch: u32) -> f64 {
        self.temperature
            .temperature_at(f64::from(joint_epoch) / self.epoch_scale)
    }

    pub fn mask(&self) -> Option<Vec<bool>> {
        self.policy_setting.mask(&self.arch)
    }
}

/// The named configurations of the ablation tables.
pub mod presets {
    use super::*;

    /// (label, alpha, beta) for the loss ablation.
    pub const LOSSES: [(&str, f64, f64); 3] = [
        ("acc", 0.0, 0.0),
        ("acc+eff", 0.1, 0.0),
        ("acc+eff+uni", 0.1, 0.3),
    ];

    pub fn loss_ablation(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        LOSSES
            .iter()
            .map(|&(name, alpha, beta)| {
                let mut c = base.clone();
                c.weights = LossWeights { alpha, beta };
                (name.to_string(), c)
            })
            .collect()
    }

    pub fn policy_ablation(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        [
            ("resolution_only", PolicySetting::ResolutionOnly),
            ("skip_only", PolicySetting::SkipOnly),
            ("resolution+skip", PolicySetting::Full),
        ]
        .into_iter()
        .map(|(name, p)| {
            let mut c = base.clone();
            c.policy_setting = p;
            (name.to_string(), c)
        })
        .collect()
    }

    /// Joint only; warm-up + joint; all three stages.
    pub fn strategy_ablation(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        [
            ("joint", [false, true, false]),
            ("warmup+joint", [true, true, false]),
            ("all", [true, true, true]),
        ]
        .into_iter()
        .map(|(name, on)| {
            let mut c = base.clone();
            c.schedule.warmup.enabled = on[0];
            c.schedule.joint.enabled = on[1];
            c.schedule.finetune.enabled = on[2];
            (name.to_string(), c)
        })
        .collect()
    }
}

/// Cross-entropy of the video prediction.
pub fn loss_acc<'g>(prediction: &Tensor<'g>, label: usize) -> Result<Tensor<'g>> {
    prediction.cross_entropy(label)
}

/// Batch mean of the per-frame expected cost.
pub fn loss_flops<'g>(
    soft_policies: &[&[Tensor<'g>]],
    model: &CostModel,
    frames: usize,
) -> Result<Tensor<'g>> {
    let parts = soft_policies
        .iter()
        .map(|p| expected_flops(p, model, frames))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&parts)
}

/// Action frequencies of a batch. The soft variant averages `π_t` over
/// every decision; the hard variant counts actions per frame, a skip
/// weighing the frames it covers.
#[derive(Clone, Debug)]
pub struct UsageStats<'g> {
    pub soft: Tensor<'g>,
    pub hard: Vec<f64>,
}

impl<'g> UsageStats<'g> {
    pub fn from_outputs(outputs: &[RouterOutput<'g>], num_actions: usize) -> Result<Option<Self>> {
        let soft: Vec<Tensor<'g>> = outputs
            .iter()
            .flat_map(|o| o.soft_policies.iter().copied())
            .collect();
        if soft.is_empty() {
            return Ok(None);
        }
        let mut hard = vec![0.0; num_actions];
        let mut n = 0.0;
        for o in outputs {
            let f = o.trace.frames.len() as f64;
            for (h, u) in hard.iter_mut().zip(o.trace.hard_usage(num_actions)) {
                *h += u * f;
            }
            n += f;
        }
        if n > 0.0 {
            hard.iter_mut().for_each(|h| *h /= n);
        }
        Ok(Some(Self {
            soft: mean_of(&soft)?,
            hard,
        }))
    }
}

/// `Σ_i (u_i − 1/K)²` over the `K` entries of a usage vector.
pub fn loss_uni<'g>(usage: &Tensor<'g>) -> Result<Tensor<'g>> {
    let k = usage.numel();
    let target = usage.graph().constant(vec![1.0 / k as f64; k], &[k])?;
    let d = usage.sub(&target)?;
    Ok(d.mul(&d)?.sum())
}

/// `(1 − α)·acc + α·flops + β·uni`.
pub fn total_loss<'g>(
    acc: &Tensor<'g>,
    flops: &Tensor<'g>,
    uni: &Tensor<'g>,
    w: &LossWeights,
) -> Result<Tensor<'g>> {
    acc.scale(1.0 - w.alpha)
        .add(&flops.scale(w.alpha))?
        .add(&uni.scale(w.beta))
}

fn mean_of<'g>(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty batch".into()))?;
    let mut s = *first;
    for p in rest {
        s = s.add(p)?;
    }
    Ok(s.scale(1.0 / parts.len() as f64))
}

/// Fresh parameters for a model kind.
pub fn init_model(kind: ModelKind, arch: &ArchConfig, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    match kind {
        ModelKind::Arnet => {
            init_backbones(&mut p, arch, &mut rng)?;
            init_policy(&mut p, arch, &mut rng)?;
        }
        ModelKind::Uniform => {
            p.init_convnet("backbone0", &arch.backbone(0)?, &mut rng)?;
        }
        ModelKind::Lstm => {
            p.init_convnet("backbone0", &arch.backbone(0)?, &mut rng)?;
            init_aggregator(&mut p, arch, &mut rng)?;
        }
    }
    Ok(p)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: u32,
    pub stage: StageName,
    pub loss_acc: f64,
    pub loss_flops: f64,
    pub loss_uni: f64,
    pub total: f64,
    /// Validation top-1.
    pub acc: f64,
    /// Validation cost under paper accounting.
    pub gflops_f: f64,
    pub gflops_v: f64,
    /// Gumbel temperature; empty outside the joint stage.
    pub tau: Option<f64>,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record([
        "epoch",
        "stage",
        "loss_acc",
        "loss_flops",
        "loss_uni",
        "total",
        "acc",
        "gflops_f",
        "gflops_v",
        "tau",
    ])
    .map_err(csv_err)?;
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log_csv<R: std::io::Read>(r: R) -> Result<Vec<LogRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Which parameters receive updates in a stage. Warm-up and finetuning keep
/// the decision-making parameters fixed.
/// `(1 − α)·CE + α·GFLOPS/f` of a validation pass. The balance term is left
/// out: it regularizes training and says nothing about a finished policy.
fn validation_objective(traces: &[PolicyTrace], gflops_f: f64, w: &LossWeights) -> f64 {
    let ces: Vec<f64> = traces
        .iter()
        .filter_map(|tr| {
            let label = tr.label?;
            let max = tr.prediction.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + tr.prediction.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Some(lse - tr.prediction[label])
        })
        .collect();
    let ce = ces.iter().sum::<f64>() / ces.len().max(1) as f64;
    (1.0 - w.alpha) * ce + w.alpha * gflops_f
}

fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max: f64) {
    let norm = grads
        .values()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
}

fn trainable(stage: StageName, name: &str) -> bool {
    stage == StageName::Joint || !is_policy_param(name)
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    costs: &'a CostModel,
    mask: Option<Vec<bool>>,
    params: ParamSet,
    opt: SgdMomentum,
    rng: ChaCha8Rng,
    baseline: Option<f64>,
}

#[derive(Default)]
struct EpochTotals {
    acc: f64,
    flops: f64,
    uni: f64,
    total: f64,
    batches: usize,
}

impl Trainer<'_> {
    fn resolution_actions(&self) -> Vec<usize> {
        (0..self.cfg.arch.levels())
            .filter(|&a| self.mask.as_ref().is_none_or(|m| m[a]))
            .collect()
    }

    fn forward<'g>(
        &mut self,
        stage: StageName,
        tau: f64,
        bound: &crate::params::Bound<'g>,
        video: &PreparedVideo,
    ) -> Result<RouterOutput<'g>> {
        let cfg = self.cfg;
        let arch = &cfg.arch;
        let router = Router {
            arch,
            params: bound,
            costs: self.costs,
            mask: self.mask.as_deref(),
        };
        let t_len = video.leveled.frames;
        match cfg.model {
            ModelKind::Uniform => {
                router.run_video(&video.leveled, &mut Decider::Forced(&vec![0; t_len]))
            }
            ModelKind::Lstm => lstm_aggregate(bound, arch, &video.leveled, self.costs),
            ModelKind::Arnet => match (stage, cfg.method) {
                (StageName::Warmup, _) => {
                    let allowed = self.resolution_actions();
                    router.run_video(
                        &video.leveled,
                        &mut Decider::Random {
                            rng: &mut self.rng,
                            allowed: &allowed,
                        },
                    )
                }
                (StageName::Joint, Method::Gumbel) => router.run_video(
                    &video.leveled,
                    &mut Decider::Gumbel {
                        tau,
                        rng: &mut self.rng,
                    },
                ),
                (StageName::Joint, Method::Reinforce) => router.run_video(
                    &video.leveled,
                    &mut Decider::Categorical { rng: &mut self.rng },
                ),
                (StageName::Finetune, _) => router.run_video(&video.leveled, &mut Decider::Argmax),
            },
        }
    }

    fn batch(
        &mut self,
        stage: StageName,
        tau: f64,
        videos: &[&PreparedVideo],
        totals: &mut EpochTotals,
    ) -> Result<()> {
        let cfg = self.cfg;
        let g = Graph::new();
        let bound = self.params.bind(&g, |n| trainable(stage, n))?;
        let mut outputs = Vec::with_capacity(videos.len());
        let mut ces = Vec::with_capacity(videos.len());
        for v in videos {
            let out = self.forward(stage, tau, &bound, v)?;
            ces.push(loss_acc(&out.prediction, v.meta.label)?);
            outputs.push(out);
        }
        let acc = mean_of(&ces)?;
        let t_len = videos[0].leveled.frames;
        let soft: Vec<&[Tensor<'_>]> = outputs.iter().map(|o| o.soft_policies.as_slice()).collect();
        let (flops, uni) = match UsageStats::from_outputs(&outputs, cfg.arch.num_actions())? {
            Some(stats) => (
                loss_flops(&soft, self.costs, t_len)?,
                loss_uni(&stats.soft)?,
            ),
            None => {
                // Routing without the policy: report the realized cost as a constant.
                let mut hard = 0.0;
                for o in &outputs {
                    hard += self
                        .costs
                        .video_cost(&o.trace, Accounting::Paper)?
                        .gflops_per_frame;
                }
                (g.scalar(hard / outputs.len() as f64), g.scalar(0.0))
            }
        };
        let total = total_loss(&acc, &flops, &uni, &cfg.weights)?;
        let objective = if stage == StageName::Joint && cfg.method == Method::Reinforce {
            total.add(&self.policy_gradient_surrogate(&outputs, &ces)?)?
        } else {
            total
        };
        let value = total.item();
        if !value.is_finite() || !objective.item().is_finite() {
            return Err(Error::NonFinite(format!("{stage} loss {value}")));
        }
        objective.backward()?;
        let mut grads = bound.grads();
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        self.opt.step(&mut self.params, &grads, cfg.lr(stage))?;
        totals.acc += acc.item();
        totals.flops += flops.item();
        totals.uni += uni.item();
        totals.total += value;
        totals.batches += 1;
        Ok(())
    }

    /// `−mean_v (R_v − b)·Σ_t log π(a_t)` with the per-video reward
    /// `R_v = −[(1 − α)·CE_v + α·GFLOPS/f_v]` held constant, then the moving
    /// baseline absorbs this batch's mean reward.
    fn policy_gradient_surrogate<'g>(
        &mut self,
        outputs: &[RouterOutput<'g>],
        ces: &[Tensor<'g>],
    ) -> Result<Tensor<'g>> {
        let w = self.cfg.weights;
        let mut rewards = Vec::with_capacity(outputs.len());
        for (o, ce) in outputs.iter().zip(ces) {
            let cost = self
                .costs
                .video_cost(&o.trace, Accounting::Paper)?
                .gflops_per_frame;
            rewards.push(-((1.0 - w.alpha) * ce.item() + w.alpha * cost));
        }
        let mean_r = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let b = *self.baseline.get_or_insert(mean_r);
        let mut terms = Vec::with_capacity(outputs.len());
        for (o, r) in outputs.iter().zip(&rewards) {
            let g = o.prediction.graph();
            let mut lp = g.scalar(0.0);
            for l in &o.taken_log_probs {
                lp = lp.add(l)?;
            }
            terms.push(lp.scale(-(r - b)));
        }
        let d = self.cfg.reinforce.baseline_decay;
        self.baseline = Some(d * b + (1.0 - d) * mean_r);
        mean_of(&terms)
    }
}

/// Warm-up, joint training and finetuning in order, logging one row per
/// epoch through `on_epoch` as soon as it is complete.
pub fn train_three_stage(
    cfg: &TrainConfig,
    train: &[PreparedVideo],
    val: &[PreparedVideo],
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let costs = CostModel::for_provenance(cfg.cost_table, &cfg.arch)?;
    let mut t = Trainer {
        cfg,
        costs: &costs,
        mask: cfg.mask(),
        params: init_model(cfg.model, &cfg.arch, cfg.seed)?,
        opt: SgdMomentum::new(cfg.schedule.momentum),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e64),
        baseline: None,
    };
    let mut log = Vec::new();
    let mut epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for stage in StageName::ALL {
        t.opt.reset();
        // Joint epoch with the lowest validation objective.
        let mut best: Option<(f64, ParamSet)> = None;
        for e in 0..cfg.epochs(stage) {
            let tau = (stage == StageName::Joint).then(|| cfg.tau(e));
            order.shuffle(&mut t.rng);
            let mut totals = EpochTotals::default();
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&PreparedVideo> = chunk.iter().map(|&i| &train[i]).collect();
                t.batch(stage, tau.unwrap_or(1.0), &batch, &mut totals)?;
            }
            let ev = evaluate_params(
                cfg.model,
                &cfg.arch,
                t.mask.as_deref(),
                &t.params,
                val,
                &costs,
            )?;
            let m = &ev.metrics;
            let n = totals.batches as f64;
            let row = LogRow {
                epoch,
                stage,
                loss_acc: totals.acc / n,
                loss_flops: totals.flops / n,
                loss_uni: totals.uni / n,
                total: totals.total / n,
                acc: m.top1,
                gflops_f: m.gflops_f,
                gflops_v: m.gflops_v,
                tau,
            };
            if stage == StageName::Joint && !val.is_empty() {
                let score = validation_objective(&ev.traces, m.gflops_f, &cfg.weights);
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, t.params.clone()));
                }
            }
            on_epoch(&row);
            log.push(row);
            epoch += 1;
        }
        if let Some((_, params)) = best {
            t.params = params;
        }
    }
    let mut checkpoint = Checkpoint::new(cfg.model, cfg.arch.clone(), t.params);
    checkpoint.mask = t.mask;
    Ok(TrainOutcome { checkpoint, log })
}

/// The same schedule with policy-gradient updates in the joint stage.
pub fn reinforce_train(
    cfg: &TrainConfig,
    train: &[PreparedVideo],
    val: &[PreparedVideo],
    on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    let mut c = cfg.clone();
    c.method = Method::Reinforce;
    train_three_stage(&c, train, val, on_epoch)
}

/// One row of the method comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub accuracy: f64,
    pub map: f64,
    pub gflops_f: f64,
    pub gflops_v: f64,
    pub train_videos: usize,
    pub test_videos: usize,
    /// [`splits_digest`] of the data both methods saw.
    pub split_digest: String,
}

/// Hex digest of `(split, id, label)` over every video of every split, so two
/// runs can show they used identical data.
pub fn splits_digest(splits: &[&[PreparedVideo]]) -> String {
    use std::hash::{DefaultHasher, Hash, Hasher};
    let mut h = DefaultHasher::new();
    for (i, videos) in splits.iter().enumerate() {
        i.hash(&mut h);
        for v in videos.iter() {
            (v.meta.id, v.meta.label).hash(&mut h);
        }
    }
    format!("{:016x}", h.finish())
}

/// Train the same config once with Gumbel sampling and once with policy
/// gradients, on the same splits, and evaluate both on `test`.
pub fn compare_methods(
    cfg: &TrainConfig,
    train: &[PreparedVideo],
    val: &[PreparedVideo],
    test: &[PreparedVideo],
    accounting: Accounting,
    mut on_epoch: impl FnMut(Method, &LogRow),
) -> Result<Vec<(CompareRow, TrainOutcome)>> {
    let digest = splits_digest(&[train, val, test]);
    let costs = CostModel::for_provenance(cfg.cost_table, &cfg.arch)?;
    let mut out = Vec::with_capacity(2);
    for method in [Method::Gumbel, Method::Reinforce] {
        let mut c = cfg.clone();
        c.method = method;
        let outcome = train_three_stage(&c, train, val, |r| on_epoch(method, r))?;
        let m = evaluate(&outcome.checkpoint, test, &costs)?.metrics;
        let (gflops_f, gflops_v) = m.gflops(accounting);
        let row = CompareRow {
            method,
            accuracy: m.top1,
            map: m.map,
            gflops_f,
            gflops_v,
            train_videos: train.len(),
            test_videos: test.len(),
            split_digest: digest.clone(),
        };
        out.push((row, outcome));
    }
    Ok(out)
}

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_compare_csv<R: std::io::Read>(r: R) -> Result<Vec<CompareRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uni_closed_forms() {
        let g = Graph::new();
        let u = g.constant(vec![1.0 / 7.0; 7], &[7]).unwrap();
        assert!(loss_uni(&u).unwrap().item().abs() < 1e-15);
        let mut one = vec![0.0; 7];
        one[3] = 1.0;
        let v = loss_uni(&g.constant(one, &[7]).unwrap()).unwrap().item();
        assert!((v - 42.0 / 49.0).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let mut g = BTreeMap::from([("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])]);
        clip_global_norm(&mut g, 10.0);
        assert_eq!(g["a"], vec![3.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn validation_objective_matches_cross_entropy() {
        let tr = PolicyTrace {
            label: Some(1),
            prediction: vec![0.0, 2.0f64.ln()],
            ..Default::default()
        };
        // softmax = (1/3, 2/3)
        let w = LossWeights { alpha: 0.25, beta: 9.0 };
        let v = validation_objective(&[tr], 2.0, &w);
        assert!((v - (0.75 * 1.5f64.ln() + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weights() {
        let g = Graph::new();
        let (a, f, u) = (g.scalar(1.5), g.scalar(0.25), g.scalar(0.5));
        let w0 = LossWeights {
            alpha: 0.0,
            beta: 0.0,
        };
        assert_eq!(total_loss(&a, &f, &u, &w0).unwrap().item(), 1.5);
        let v = total_loss(&a, &f, &u, &LossWeights::default())
            .unwrap()
            .item();
        assert!((v - (0.9 * 1.5 + 0.1 * 0.25 + 0.3 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn config_defaults_and_scaling() {
        let c = TrainConfig::default();
        let e: Vec<u32> = StageName::ALL.iter().map(|&s| c.epochs(s)).collect();
        assert_eq!(e, [2, 10, 10]);
        let mut full = c.clone();
        full.epoch_scale = 1.0;
        assert_eq!(StageName::ALL.map(|s| full.epochs(s)), [10, 50, 50]);
        assert_eq!(c.tau(0), 5.0);
        assert!((c.tau(1) - 5.0 * (-0.045f64 * 5.0).exp()).abs() < 1e-12);
        let back = TrainConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let mut r = c.clone();
        r.method = Method::Reinforce;
        assert_eq!(r.lr(StageName::Joint), 0.002);
        assert_eq!(r.lr(StageName::Finetune), 0.001);
        assert_eq!(r.lr(StageName::Warmup), 0.02);
    }

    #[test]
    fn policy_setting_masks() {
        let arch = ArchConfig::default();
        assert_eq!(PolicySetting::Full.mask(&arch), None);
        assert_eq!(
            PolicySetting::ResolutionOnly.mask(&arch).unwrap(),
            [true, true, true, true, false, false, false]
        );
        assert_eq!(
            PolicySetting::SkipOnly.mask(&arch).unwrap(),
            [true, false, false, false, true, true, true]
        );
    }

    #[test]
    fn log_csv_round_trip_with_empty_tau() {
        let row = |stage, tau| LogRow {
            epoch: 0,
            stage,
            loss_acc: 1.0,
            loss_flops: 0.5,
            loss_uni: 0.25,
            total: 1.2,
            acc: 0.5,
            gflops_f: 1.0,
            gflops_v: 16.0,
            tau,
        };
        let rows = vec![
            row(StageName::Warmup, None),
            row(StageName::Joint, Some(5.0)),
        ];
        let mut buf = Vec::new();
        write_log_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "epoch,stage,loss_acc,loss_flops,loss_uni,total,acc,gflops_f,gflops_v,tau\n0,warmup,"
        ));
        assert!(text.lines().nth(1).unwrap().ends_with(','));
        assert_eq!(read_log_csv(buf.as_slice()).unwrap(), rows);
    }
}
