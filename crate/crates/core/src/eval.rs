//! Metrics, baselines, policy usage reports and accuracy/cost curves.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::backbones::{backbone_features, backbone_predict};
use crate::cost::{Accounting, CostModel, Provenance};
use crate::data::{LeveledVideo, PreparedVideo, VideoMeta};
use crate::error::{Error, Result};
use crate::params::{Bound, Checkpoint, ModelKind, ParamSet};
use crate::policy::{argmax, extract_features, lowest_res_predict, lstm_weights};
use crate::router::{
    average_predictions, Decider, FrameRecord, PolicyAction, PolicyTrace, Router, RouterOutput,
};
use crate::tensor::{lstm_step, softmax, Graph, Tensor};

pub const METRICS_VERSION: u32 = 1;
pub const AGGREGATOR_LSTM: &str = "aggregator.lstm";
pub const AGGREGATOR_FC: &str = "aggregator.fc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub version: u32,
    pub videos: usize,
    pub top1: f64,
    pub map: f64,
    /// Paper accounting.
    pub gflops_f: f64,
    pub gflops_v: f64,
    /// Full accounting, including the policy network.
    pub gflops_f_full: f64,
    pub gflops_v_full: f64,
    pub cost_table: Provenance,
}

impl Metrics {
    pub fn gflops(&self, accounting: Accounting) -> (f64, f64) {
        match accounting {
            Accounting::Paper => (self.gflops_f, self.gflops_v),
            Accounting::Full => (self.gflops_f_full, self.gflops_v_full),
        }
    }
}

/// All-points average precision of one ranking: the mean, over positives, of
/// precision at the rank of each positive. Ties keep input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// One-vs-rest AP per class from per-video class scores, averaged over the
/// classes that have at least one positive.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> f64 {
    let aps: Vec<f64> = (0..num_classes)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|v| v[c]).collect();
            let p: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            average_precision(&s, &p)
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Aggregate traces into metrics. Labels come from the traces.
pub fn summarize(traces: &[PolicyTrace], costs: &CostModel, num_classes: usize) -> Result<Metrics> {
    let n = traces.len();
    let (mut correct, mut gv, mut gv_full, mut gf, mut gf_full) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for tr in traces {
        let label = tr.label.ok_or_else(|| {
            Error::InvalidArgument(format!("trace of video {} has no label", tr.video))
        })?;
        if tr.prediction.len() != num_classes {
            return Err(Error::InvalidArgument(format!(
                "trace of video {} has {} scores for {num_classes} classes",
                tr.video,
                tr.prediction.len()
            )));
        }
        correct += usize::from(argmax(&tr.prediction) == label);
        scores.push(softmax(&tr.prediction));
        labels.push(label);
        let p = costs.video_cost(tr, Accounting::Paper)?;
        let f = costs.video_cost(tr, Accounting::Full)?;
        gv += p.gflops_per_video;
        gf += p.gflops_per_frame;
        gv_full += f.gflops_per_video;
        gf_full += f.gflops_per_frame;
    }
    let d = n.max(1) as f64;
    Ok(Metrics {
        version: METRICS_VERSION,
        videos: n,
        top1: correct as f64 / d,
        map: mean_average_precision(&scores, &labels, num_classes),
        gflops_f: gf / d,
        gflops_v: gv / d,
        gflops_f_full: gf_full / d,
        gflops_v_full: gv_full / d,
        cost_table: costs.provenance,
    })
}

pub fn init_aggregator<R: Rng + ?Sized>(
    params: &mut ParamSet,
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<()> {
    let d = arch.backbone(0)?.feature_dim();
    params.init_lstm(AGGREGATOR_LSTM, d, arch.lstm_hidden, rng)?;
    params.init_linear(AGGREGATOR_FC, arch.lstm_hidden, arch.num_classes, rng)
}

fn all_frames_trace(
    t_len: usize,
    levels: &[usize],
    costs: &CostModel,
    logits: &[Tensor<'_>],
) -> Result<Vec<FrameRecord>> {
    (0..t_len)
        .map(|t| {
            let mut cost = 0.0;
            for &l in levels {
                cost += costs.flops_of_action(PolicyAction::Resolution(l), Accounting::Paper)?;
            }
            Ok(FrameRecord {
                t,
                observed: true,
                action: (levels.len() == 1).then(|| PolicyAction::Resolution(levels[0])),
                action_index: (levels.len() == 1).then(|| levels[0]),
                skipped_by: None,
                policy_ran: false,
                levels: levels.to_vec(),
                cost_flops: cost,
                predicted: true,
                soft: None,
                logits: logits.get(t).map(Tensor::value),
            })
        })
        .collect()
}

/// Highest-resolution features of every frame fed through a recurrent
/// aggregator; the video prediction averages the per-step class logits.
pub fn lstm_aggregate<'g>(
    params: &Bound<'g>,
    arch: &ArchConfig,
    video: &LeveledVideo,
    costs: &CostModel,
) -> Result<RouterOutput<'g>> {
    let g = params.graph();
    let t_len = video.frames;
    let x = level_frames(g, video, 0)?;
    let feats = backbone_features(&x, 0, params, arch)?;
    let d = arch.backbone(0)?.feature_dim();
    let w = lstm_weights(params, AGGREGATOR_LSTM)?;
    let (mut h, mut c) = (g.zeros(&[arch.lstm_hidden])?, g.zeros(&[arch.lstm_hidden])?);
    let (fw, fb) = (
        params.get(&format!("{AGGREGATOR_FC}.weight"))?,
        params.get(&format!("{AGGREGATOR_FC}.bias"))?,
    );
    let mut ys = Vec::with_capacity(t_len);
    for t in 0..t_len {
        (h, c) = lstm_step(&feats.slice(t * d, d)?, &h, &c, &w)?;
        ys.push(h.linear(&fw, Some(&fb))?);
    }
    let prediction = average_predictions(&ys)?;
    let frames = all_frames_trace(t_len, &[0], costs, &ys)?;
    Ok(RouterOutput {
        trace: PolicyTrace {
            frames,
            prediction: prediction.value(),
            ..Default::default()
        },
        prediction,
        soft_policies: Vec::new(),
        taken_log_probs: Vec::new(),
    })
}

/// Every frame through every level; all predictions averaged.
pub fn multiscale<'g>(
    params: &Bound<'g>,
    arch: &ArchConfig,
    video: &LeveledVideo,
    costs: &CostModel,
) -> Result<RouterOutput<'g>> {
    let g = params.graph();
    let (t_len, levels, c) = (video.frames, arch.levels(), arch.num_classes);
    let mut ys = Vec::with_capacity(t_len * levels);
    for level in 0..levels {
        let x = level_frames(g, video, level)?;
        let y = if level + 1 == levels {
            lowest_res_predict(&extract_features(&x, params, arch)?, params)?
        } else {
            backbone_predict(&x, level, params, arch)?
        };
        for t in 0..t_len {
            ys.push(y.slice(t * c, c)?);
        }
    }
    let prediction = average_predictions(&ys)?;
    let all: Vec<usize> = (0..levels).collect();
    let frames = all_frames_trace(t_len, &all, costs, &[])?;
    Ok(RouterOutput {
        trace: PolicyTrace {
            frames,
            prediction: prediction.value(),
            ..Default::default()
        },
        prediction,
        soft_policies: Vec::new(),
        taken_log_probs: Vec::new(),
    })
}

fn level_frames<'g>(g: &'g Graph, video: &LeveledVideo, level: usize) -> Result<Tensor<'g>> {
    let s = video.size(level);
    let mut data = Vec::with_capacity(video.frames * video.channels * s * s);
    for t in 0..video.frames {
        data.extend_from_slice(video.frame(level, t));
    }
    g.constant(data, &[video.frames, video.channels, s, s])
}

/// The simple comparison methods plus the learned policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Every frame at the highest resolution, predictions averaged.
    Uniform,
    /// Every frame at the highest resolution through a recurrent aggregator.
    Lstm,
    /// Actions drawn uniformly from the allowed action space.
    Random,
    /// Every frame at every resolution, predictions averaged.
    Multiscale,
    /// The learned policy (Gumbel training).
    Arnet,
    /// The learned policy (policy-gradient training).
    Reinforce,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        Self::Uniform,
        Self::Lstm,
        Self::Random,
        Self::Multiscale,
        Self::Arnet,
        Self::Reinforce,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Lstm => "lstm",
            Self::Random => "random",
            Self::Multiscale => "multiscale",
            Self::Arnet => "arnet",
            Self::Reinforce => "reinforce",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub traces: Vec<PolicyTrace>,
}

/// How each video is routed during an evaluation pass.
#[derive(Clone, Copy, Debug)]
enum Routing {
    Policy,
    AllHighest,
    Random(u64),
    Multiscale,
    Aggregator,
}

fn run_all(
    arch: &ArchConfig,
    mask: Option<&[bool]>,
    params: &ParamSet,
    videos: &[PreparedVideo],
    costs: &CostModel,
    routing: Routing,
) -> Result<Evaluation> {
    let allowed: Vec<usize> = (0..arch.num_actions())
        .filter(|&a| mask.is_none_or(|m| m[a]))
        .collect();
    let mut rng = match routing {
        Routing::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let zeros = vec![0usize; videos.iter().map(|v| v.leveled.frames).max().unwrap_or(0)];
    let mut traces = Vec::with_capacity(videos.len());
    for v in videos {
        let g = Graph::new();
        let bound = params.bind(&g, |_| false)?;
        let router = Router {
            arch,
            params: &bound,
            costs,
            mask,
        };
        let out = match routing {
            Routing::Policy => router.run_video(&v.leveled, &mut Decider::Argmax)?,
            Routing::AllHighest => router.run_video(&v.leveled, &mut Decider::Forced(&zeros))?,
            Routing::Random(_) => {
                let rng = rng.as_mut().expect("seeded above");
                router.run_video(
                    &v.leveled,
                    &mut Decider::Random {
                        rng,
                        allowed: &allowed,
                    },
                )?
            }
            Routing::Multiscale => multiscale(&bound, arch, &v.leveled, costs)?,
            Routing::Aggregator => lstm_aggregate(&bound, arch, &v.leveled, costs)?,
        };
        let mut trace = out.trace;
        trace.video = v.meta.id;
        trace.label = Some(v.meta.label);
        traces.push(trace);
    }
    Ok(Evaluation {
        metrics: summarize(&traces, costs, arch.num_classes)?,
        traces,
    })
}

/// Evaluate parameters of the given model kind with its own routing:
/// the policy's argmax for AR-Net models, all frames at the highest
/// resolution otherwise.
pub fn evaluate_params(
    kind: ModelKind,
    arch: &ArchConfig,
    mask: Option<&[bool]>,
    params: &ParamSet,
    videos: &[PreparedVideo],
    costs: &CostModel,
) -> Result<Evaluation> {
    let routing = match kind {
        ModelKind::Arnet => Routing::Policy,
        ModelKind::Uniform => Routing::AllHighest,
        ModelKind::Lstm => Routing::Aggregator,
    };
    run_all(arch, mask, params, videos, costs, routing)
}

/// Inference over `videos`. The checkpoint is only read.
pub fn evaluate(
    ck: &Checkpoint,
    videos: &[PreparedVideo],
    costs: &CostModel,
) -> Result<Evaluation> {
    evaluate_params(
        ck.kind,
        &ck.arch,
        ck.mask.as_deref(),
        &ck.params,
        videos,
        costs,
    )
}

/// Run a comparison method with the networks of `ck`.
pub fn run_baseline(
    kind: BaselineKind,
    ck: &Checkpoint,
    videos: &[PreparedVideo],
    costs: &CostModel,
    seed: u64,
) -> Result<Evaluation> {
    let need = |k: ModelKind| {
        if ck.kind == k {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "baseline {kind} needs a {k:?} checkpoint, got {:?}",
                ck.kind
            )))
        }
    };
    let routing = match kind {
        BaselineKind::Uniform => Routing::AllHighest,
        BaselineKind::Lstm => {
            need(ModelKind::Lstm)?;
            Routing::Aggregator
        }
        BaselineKind::Random => {
            need(ModelKind::Arnet)?;
            Routing::Random(seed)
        }
        BaselineKind::Multiscale => {
            need(ModelKind::Arnet)?;
            Routing::Multiscale
        }
        BaselineKind::Arnet | BaselineKind::Reinforce => {
            need(ModelKind::Arnet)?;
            Routing::Policy
        }
    };
    run_all(
        &ck.arch,
        ck.mask.as_deref(),
        &ck.params,
        videos,
        costs,
        routing,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Dataset,
    Class,
}

impl FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(Self::Dataset),
            "class" => Ok(Self::Class),
            other => Err(Error::InvalidArgument(format!(
                "unknown grouping '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UsageRow {
    pub group: String,
    pub frames: usize,
    /// Share of frames per action, skips counting the frames they cover.
    pub usage: Vec<f64>,
    /// Share of level 0 among resolution choices.
    pub high_res_share: f64,
    /// Share of frames handled by a resolution action rather than a skip.
    pub resolution_ratio: f64,
}

/// Per-action usage by dataset or by class.
pub fn policy_histogram(
    traces: &[PolicyTrace],
    arch: &ArchConfig,
    group_by: GroupBy,
) -> Vec<UsageRow> {
    let k = arch.num_actions();
    let levels = arch.levels();
    let mut groups: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for tr in traces {
        let key = match group_by {
            GroupBy::Dataset => "all".to_string(),
            GroupBy::Class => tr
                .label
                .map_or_else(|| "unlabeled".into(), |l| format!("class{l}")),
        };
        let counts = groups.entry(key).or_insert_with(|| vec![0.0; k]);
        let n = tr.frames.len() as f64;
        for (c, u) in counts.iter_mut().zip(tr.hard_usage(k)) {
            *c += u * n;
        }
    }
    groups
        .into_iter()
        .map(|(group, counts)| {
            let frames: f64 = counts.iter().sum();
            let res: f64 = counts[..levels].iter().sum();
            let share = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
            UsageRow {
                group,
                frames: frames.round() as usize,
                usage: counts.iter().map(|&c| share(c, frames)).collect(),
                high_res_share: share(counts[0], res),
                resolution_ratio: share(res, frames),
            }
        })
        .collect()
}

pub fn write_usage_csv<W: Write>(rows: &[UsageRow], arch: &ArchConfig, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["group".to_string(), "frames".to_string()];
    header.extend((0..arch.num_actions()).map(|a| format!("a{a}")));
    header.extend(["high_res_share".to_string(), "resolution_ratio".to_string()]);
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.group.clone(), r.frames.to_string()];
        rec.extend(r.usage.iter().map(|u| u.to_string()));
        rec.extend([r.high_res_share.to_string(), r.resolution_ratio.to_string()]);
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// How often highest-resolution choices land on informative frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub level0_on_informative: usize,
    pub level0_total: usize,
    pub informative_frames: usize,
    pub total_frames: usize,
}

impl HitRate {
    /// `P(informative | level 0 chosen)`; `None` without level-0 choices.
    pub fn hit_rate(&self) -> Option<f64> {
        (self.level0_total > 0)
            .then(|| self.level0_on_informative as f64 / self.level0_total as f64)
    }

    /// `P(informative)` over all frames.
    pub fn base_rate(&self) -> f64 {
        if self.total_frames == 0 {
            0.0
        } else {
            self.informative_frames as f64 / self.total_frames as f64
        }
    }
}

/// Compare level-0 decisions against ground-truth informative frames.
pub fn level0_hit_rate(traces: &[PolicyTrace], metas: &[VideoMeta]) -> Result<HitRate> {
    let mut h = HitRate::default();
    for tr in traces {
        let meta = metas
            .iter()
            .find(|m| m.id == tr.video)
            .ok_or_else(|| Error::InvalidArgument(format!("no metadata for video {}", tr.video)))?;
        h.total_frames += tr.frames.len();
        h.informative_frames += tr
            .frames
            .iter()
            .filter(|f| meta.is_informative(f.t))
            .count();
        for f in tr
            .frames
            .iter()
            .filter(|f| f.action == Some(PolicyAction::Resolution(0)))
        {
            h.level0_total += 1;
            h.level0_on_informative += usize::from(meta.is_informative(f.t));
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub label: String,
    pub gflops_v: f64,
    pub accuracy: f64,
    pub map: f64,
}

/// Rows sorted by GFLOPS/V ascending (ties by label).
pub fn curve_export(mut points: Vec<CurvePoint>) -> Vec<CurvePoint> {
    points.sort_by(|a, b| {
        a.gflops_v
            .total_cmp(&b.gflops_v)
            .then_with(|| a.label.cmp(&b.label))
    });
    points
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_average_precision() {
        // Ranking: pos, neg, pos -> (1/1 + 2/3) / 2.
        let ap = average_precision(&[0.9, 0.5, 0.2], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
        // 3 videos, 2 classes: class 0 ranked [v0 (pos), v2 (neg), v1 (pos)].
        let scores = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4]];
        let labels = [0, 0, 1];
        let ap0 = (1.0 + 2.0 / 3.0) / 2.0;
        let ap1 = 1.0 / 2.0; // class 1 ranking [v1 (neg), v2 (pos), v0]
        let m = mean_average_precision(&scores, &labels, 2);
        assert!((m - (ap0 + ap1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_scores_give_unit_map() {
        let scores: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..4).map(|c| f64::from(u8::from(c == i % 4))).collect())
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        assert_eq!(mean_average_precision(&scores, &labels, 4), 1.0);
    }

    #[test]
    fn curve_rows_sorted_by_cost() {
        let p = |l: &str, g| CurvePoint {
            label: l.into(),
            gflops_v: g,
            accuracy: 0.5,
            map: 0.5,
        };
        let sorted = curve_export(vec![p("b", 3.0), p("a", 1.0), p("c", 2.0)]);
        assert_eq!(
            sorted.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(),
            ["a", "c", "b"]
        );
        let mut buf = Vec::new();
        write_curve_csv(&sorted, &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("label,gflops_v,accuracy,map\n"));
    }

    #[test]
    fn baseline_names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.to_string().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("bogus".parse::<BaselineKind>().is_err());
    }
}
