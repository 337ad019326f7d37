//! The per-video decision loop: decode actions, apply skips, dispatch
//! observed frames to backbones, and average the frame predictions.

use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::backbones::backbone_predict;
use crate::cost::{Accounting, CostModel};
use crate::data::LeveledVideo;
use crate::error::{Error, Result};
use crate::gumbel::{gumbel_max, sample_gumbel, straight_through, GumbelSample};
use crate::params::Bound;
use crate::policy::{argmax, extract_features, lowest_res_predict, policy_update, PolicyState};
use crate::tensor::Tensor;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// A decoded decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    /// Classify the frame at ladder level `l` (0 is the highest resolution).
    Resolution(usize),
    /// Skip this frame and the next `n - 1`.
    Skip(usize),
}

/// Index `a < L` is a resolution level; `a ≥ L` selects skip `a - L`.
pub fn decode_action(index: usize, arch: &ArchConfig) -> Result<PolicyAction> {
    let l = arch.levels();
    if index < l {
        Ok(PolicyAction::Resolution(index))
    } else if let Some(&n) = arch.skips.get(index - l) {
        Ok(PolicyAction::Skip(n))
    } else {
        Err(Error::InvalidArgument(format!(
            "action {index} outside the {} available",
            arch.num_actions()
        )))
    }
}

/// One frame of a [`PolicyTrace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    /// False when an earlier skip covered the frame.
    pub observed: bool,
    /// The decision taken at this frame, if one was.
    pub action: Option<PolicyAction>,
    pub action_index: Option<usize>,
    /// Frame whose skip covered this one.
    pub skipped_by: Option<usize>,
    /// Whether the policy network processed this frame.
    pub policy_ran: bool,
    /// Backbone levels executed on this frame.
    pub levels: Vec<usize>,
    /// Backbone cost under paper accounting, GFLOPs.
    pub cost_flops: f64,
    pub predicted: bool,
    /// Policy distribution `π_t`, when the policy ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<Vec<f64>>,
    /// Frame class logits, when predicted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

impl FrameRecord {
    pub fn unobserved(t: usize, skipped_by: usize) -> Self {
        Self {
            t,
            observed: false,
            action: None,
            action_index: None,
            skipped_by: Some(skipped_by),
            policy_ran: false,
            levels: Vec::new(),
            cost_flops: 0.0,
            predicted: false,
            soft: None,
            logits: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrace {
    pub video: usize,
    pub label: Option<usize>,
    pub frames: Vec<FrameRecord>,
    /// No frame was predicted and the lowest-resolution head was applied to
    /// the first observed frame instead.
    pub fallback: bool,
    /// Video-level class logits.
    pub prediction: Vec<f64>,
}

impl PolicyTrace {
    /// Per-action share of frames, each frame attributed to the decision that
    /// covered it (a skip of `F` counts `F` frames, truncated at the end).
    pub fn hard_usage(&self, num_actions: usize) -> Vec<f64> {
        let mut u = vec![0.0; num_actions];
        let mut n = 0usize;
        for f in &self.frames {
            let idx = match f.skipped_by {
                Some(src) => self.frames.get(src).and_then(|s| s.action_index),
                None => f.action_index,
            };
            if let Some(i) = idx.filter(|&i| i < num_actions) {
                u[i] += 1.0;
                n += 1;
            }
        }
        if n > 0 {
            u.iter_mut().for_each(|v| *v /= n as f64);
        }
        u
    }

    /// Per-action count of decisions (skips weigh 1).
    pub fn decision_counts(&self, num_actions: usize) -> Vec<usize> {
        let mut c = vec![0; num_actions];
        for i in self.frames.iter().filter_map(|f| f.action_index) {
            if i < num_actions {
                c[i] += 1;
            }
        }
        c
    }

    pub fn predicted_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.predicted).count()
    }
}

/// Serialized form of one trace frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub schema: u32,
    pub video: usize,
    pub label: Option<usize>,
    pub fallback: bool,
    #[serde(flatten)]
    pub frame: FrameRecord,
}

/// One JSON object per frame. Soft distributions and frame logits are
/// dropped.
pub fn write_jsonl<W: Write>(traces: &[PolicyTrace], mut w: W) -> Result<()> {
    for tr in traces {
        for f in &tr.frames {
            let line = TraceLine {
                schema: TRACE_SCHEMA_VERSION,
                video: tr.video,
                label: tr.label,
                fallback: tr.fallback,
                frame: FrameRecord {
                    soft: None,
                    logits: None,
                    ..f.clone()
                },
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Inverse of [`write_jsonl`]; frames regroup by consecutive video id.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PolicyTrace>> {
    let mut out: Vec<PolicyTrace> = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(&line)?;
        if rec.schema != TRACE_SCHEMA_VERSION {
            return Err(Error::Version {
                expected: TRACE_SCHEMA_VERSION.to_string(),
                found: rec.schema.to_string(),
            });
        }
        match out.last_mut() {
            Some(tr) if tr.video == rec.video && rec.frame.t == tr.frames.len() => {
                tr.frames.push(rec.frame)
            }
            _ => out.push(PolicyTrace {
                video: rec.video,
                label: rec.label,
                frames: vec![rec.frame],
                fallback: rec.fallback,
                prediction: Vec::new(),
            }),
        }
    }
    Ok(out)
}

/// How decisions are made for observed frames.
pub enum Decider<'a> {
    /// Straight-through Gumbel sampling at temperature `tau`.
    Gumbel { tau: f64, rng: &'a mut dyn RngCore },
    /// Plain categorical sampling from `π_t`, recording `log π_t(a_t)`.
    Categorical { rng: &'a mut dyn RngCore },
    /// Deterministic argmax of `π_t`.
    Argmax,
    /// Action index per frame `t`, consulted only for observed frames. The
    /// policy network does not run.
    Forced(&'a [usize]),
    /// Uniform draw from `allowed` for every observed frame. The policy
    /// network does not run.
    Random {
        rng: &'a mut dyn RngCore,
        allowed: &'a [usize],
    },
}

impl Decider<'_> {
    pub fn uses_policy(&self) -> bool {
        matches!(
            self,
            Self::Gumbel { .. } | Self::Categorical { .. } | Self::Argmax
        )
    }
}

/// Everything [`Router::run_video`] produces.
pub struct RouterOutput<'g> {
    /// Video class logits `[C]`.
    pub prediction: Tensor<'g>,
    pub trace: PolicyTrace,
    /// `π_t` for every frame the policy processed.
    pub soft_policies: Vec<Tensor<'g>>,
    /// `log π_t(a_t)` for every sampled decision (categorical mode only).
    pub taken_log_probs: Vec<Tensor<'g>>,
}

/// Mean of frame logits.
pub fn average_predictions<'g>(frame_logits: &[Tensor<'g>]) -> Result<Tensor<'g>> {
    let (first, rest) = frame_logits
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("no frame predictions to average".into()))?;
    let mut sum = *first;
    for y in rest {
        sum = sum.add(y)?;
    }
    Ok(sum.scale(1.0 / frame_logits.len() as f64))
}

/// Model parameters bound to a graph, plus the cost table used to annotate
/// traces.
pub struct Router<'a, 'g> {
    pub arch: &'a ArchConfig,
    pub params: &'a Bound<'g>,
    pub costs: &'a CostModel,
    /// Allowed actions; `None` allows all.
    pub mask: Option<&'a [bool]>,
}

impl<'g> Router<'_, 'g> {
    /// Frames `ts` at `level` as one `[n, C, s, s]` constant.
    fn gather(&self, video: &LeveledVideo, level: usize, ts: &[usize]) -> Result<Tensor<'g>> {
        let g = self.params.graph();
        let s = video.size(level);
        let mut data = Vec::with_capacity(ts.len() * video.channels * s * s);
        for &t in ts {
            data.extend_from_slice(video.frame(level, t));
        }
        g.constant(data, &[ts.len(), video.channels, s, s])
    }

    /// Process one video. Decisions run sequentially over frames; backbone
    /// work is batched per level afterwards, which yields the same values as
    /// frame-by-frame dispatch.
    pub fn run_video(
        &self,
        video: &LeveledVideo,
        decider: &mut Decider<'_>,
    ) -> Result<RouterOutput<'g>> {
        let arch = self.arch;
        let (t_len, levels, d) = (video.frames, arch.levels(), arch.feature_dim());
        if video.sizes() != arch.ladder.levels() || video.channels != arch.in_channels {
            return Err(Error::InvalidArgument(format!(
                "video levels {:?}x{} do not match the model ladder {:?}x{}",
                video.sizes(),
                video.channels,
                arch.ladder.levels(),
                arch.in_channels
            )));
        }
        if let Decider::Forced(seq) = decider {
            if seq.len() < t_len {
                return Err(Error::InvalidArgument(format!(
                    "{} forced actions for {t_len} frames",
                    seq.len()
                )));
            }
        }
        let g = self.params.graph();
        let lowest = levels - 1;
        let all: Vec<usize> = (0..t_len).collect();
        let uses_policy = decider.uses_policy();
        let feats = if uses_policy {
            Some(extract_features(
                &self.gather(video, lowest, &all)?,
                self.params,
                arch,
            )?)
        } else {
            None
        };

        let mut frames: Vec<FrameRecord> = Vec::with_capacity(t_len);
        let mut soft_policies = Vec::new();
        let mut taken_log_probs = Vec::new();
        // Straight-through one-hot per observed frame (Gumbel mode only).
        let mut relaxed: Vec<Option<Tensor<'g>>> = vec![None; t_len];
        let mut state = PolicyState::initial(g, arch)?;
        let mut cover: Option<(usize, usize)> = None; // (source frame, frames left)

        for t in 0..t_len {
            if let Some((src, left)) = cover {
                frames.push(FrameRecord::unobserved(t, src));
                cover = (left > 1).then_some((src, left - 1));
                continue;
            }
            let mut soft = None;
            let index = match decider {
                Decider::Forced(seq) => seq[t],
                Decider::Random { rng, allowed } => *allowed
                    .choose(rng)
                    .ok_or_else(|| Error::InvalidArgument("no allowed actions".into()))?,
                _ => {
                    let f = feats
                        .expect("features exist when the policy runs")
                        .slice(t * d, d)?;
                    let (z, next) = policy_update(&f, &state, self.params, self.mask)?;
                    state = next;
                    let pi = z.softmax();
                    soft = Some(pi.value());
                    soft_policies.push(pi);
                    match decider {
                        Decider::Gumbel { tau, rng } => {
                            let s = GumbelSample::draw(&z.log_softmax(), *tau, *rng)?;
                            let st = straight_through(&s)?;
                            relaxed[t] = Some(st);
                            s.hard_index
                        }
                        Decider::Categorical { rng } => {
                            let lp = z.log_softmax();
                            let noise = sample_gumbel(*rng, lp.numel());
                            let a = lp.with_value(|v| gumbel_max(v, &noise))?;
                            taken_log_probs.push(lp.index(a)?);
                            a
                        }
                        _ => z.with_value(argmax),
                    }
                }
            };
            if self
                .mask
                .is_some_and(|m| !m.get(index).copied().unwrap_or(false))
            {
                return Err(Error::InvalidArgument(format!(
                    "action {index} is masked out"
                )));
            }
            let action = decode_action(index, arch)?;
            let mut rec = FrameRecord {
                t,
                observed: true,
                action: Some(action),
                action_index: Some(index),
                skipped_by: None,
                policy_ran: uses_policy,
                levels: Vec::new(),
                cost_flops: 0.0,
                predicted: false,
                soft,
                logits: None,
            };
            match action {
                PolicyAction::Resolution(l) => {
                    rec.levels.push(l);
                    rec.predicted = true;
                    rec.cost_flops = self.costs.flops_of_action(action, Accounting::Paper)?;
                }
                PolicyAction::Skip(n) => {
                    let covered = (n - 1).min(t_len - 1 - t);
                    cover = (covered > 0).then_some((t, covered));
                }
            }
            frames.push(rec);
        }

        // Batched dispatch. In Gumbel mode every observed frame is scored at
        // every level so the relaxed one-hot receives a gradient on each
        // resolution entry; the forward value equals the plain mean over the
        // chosen levels.
        let dense = relaxed.iter().any(Option::is_some);
        let c = arch.num_classes;
        let mut frame_logits: Vec<Option<Tensor<'g>>> = vec![None; t_len];
        let mut weighted: Vec<Tensor<'g>> = Vec::new();
        let mut mass: Vec<Tensor<'g>> = Vec::new();
        for level in 0..levels {
            let ts: Vec<usize> = frames
                .iter()
                .filter(|f| {
                    if dense {
                        relaxed[f.t].is_some()
                    } else {
                        f.predicted && f.levels.contains(&level)
                    }
                })
                .map(|f| f.t)
                .collect();
            if ts.is_empty() {
                continue;
            }
            let rows = if level == lowest {
                match feats {
                    Some(fe) => {
                        let mut parts = Vec::with_capacity(ts.len());
                        for &t in &ts {
                            parts.push(lowest_res_predict(&fe.slice(t * d, d)?, self.params)?);
                        }
                        parts
                    }
                    None => {
                        let fe =
                            extract_features(&self.gather(video, level, &ts)?, self.params, arch)?;
                        split_rows(&lowest_res_predict(&fe, self.params)?, ts.len(), c)?
                    }
                }
            } else {
                let y =
                    backbone_predict(&self.gather(video, level, &ts)?, level, self.params, arch)?;
                split_rows(&y, ts.len(), c)?
            };
            for (&t, y) in ts.iter().zip(rows) {
                if frames[t].levels.contains(&level) {
                    frame_logits[t] = Some(y);
                }
                if let Some(st) = relaxed[t] {
                    let w = st.index(level)?;
                    weighted.push(y.scale_by(&w)?);
                    mass.push(w);
                }
            }
        }

        for (rec, y) in frames.iter_mut().zip(&frame_logits) {
            rec.logits = y.map(|y| y.value());
        }
        let used: Vec<Tensor<'g>> = frame_logits.iter().flatten().copied().collect();
        let fallback = used.is_empty();
        let prediction = if fallback {
            let f0 = match feats {
                Some(fe) => fe.slice(0, d)?,
                None => extract_features(&self.gather(video, lowest, &[0])?, self.params, arch)?
                    .reshape(&[d])?,
            };
            lowest_res_predict(&f0, self.params)?
        } else if dense {
            sum_all(&weighted)?.scale_by(&sum_all(&mass)?.recip())?
        } else {
            average_predictions(&used)?
        };
        let trace = PolicyTrace {
            video: 0,
            label: None,
            frames,
            fallback,
            prediction: prediction.value(),
        };
        Ok(RouterOutput {
            prediction,
            trace,
            soft_policies,
            taken_log_probs,
        })
    }
}

fn sum_all<'g>(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("empty sum".into()))?;
    let mut s = *first;
    for p in rest {
        s = s.add(p)?;
    }
    Ok(s)
}

fn split_rows<'g>(y: &Tensor<'g>, n: usize, c: usize) -> Result<Vec<Tensor<'g>>> {
    (0..n).map(|i| y.slice(i * c, c)).collect()
}
