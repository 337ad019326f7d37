//! FLOP accounting.
//!
//! Two cost tables exist and are never mixed: an analytic table counted from
//! the toy networks in this crate, and the published per-frame GFLOPS of the
//! full-size backbones, bundled verbatim as a CSV asset. A [`CostModel`] binds
//! one table to the action space.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::router::{PolicyAction, PolicyTrace};
use crate::tensor::Tensor;

pub const COST_TABLE_VERSION: u32 = 1;

const PAPER_TABLE: &str = include_str!("../data/paper_costs.csv");

/// LSTM input width of the full-size policy network, used for its
/// "square of the feature dimension" cost approximation.
const PAPER_POLICY_FEATURE_DIM: f64 = 1280.0;

/// One countable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    },
    Linear {
        d_in: usize,
        d_out: usize,
    },
    /// Pooling, activations, gating: one op per output element.
    Elementwise {
        elements: usize,
    },
}

/// FLOPs of a layer stack: convolutions and linear maps count a
/// multiply-accumulate as 2 FLOPs; elementwise layers 1 per output.
pub fn analytic_flops(layers: &[Layer]) -> f64 {
    layers
        .iter()
        .map(|l| match *l {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                in_h,
                in_w,
            } => {
                let oh = (in_h + 2 * padding - kernel) / stride + 1;
                let ow = (in_w + 2 * padding - kernel) / stride + 1;
                2.0 * (kernel * kernel * in_channels * out_channels * oh * ow) as f64
            }
            Layer::Linear { d_in, d_out } => 2.0 * (d_in * d_out) as f64,
            Layer::Elementwise { elements } => elements as f64,
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Analytic,
    Paper,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Analytic => "analytic",
            Self::Paper => "paper",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "paper" => Ok(Self::Paper),
            other => Err(Error::InvalidArgument(format!(
                "unknown cost table '{other}'"
            ))),
        }
    }
}

/// `(network, resolution) → GFLOPS` per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    pub provenance: Provenance,
    entries: BTreeMap<(String, u32), f64>,
}

#[derive(Deserialize, Serialize)]
struct CsvRow {
    network: String,
    resolution: u32,
    gflops: f64,
}

impl CostTable {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            entries: BTreeMap::new(),
        }
    }

    /// The bundled table of published backbone costs.
    pub fn paper() -> Self {
        Self::from_csv(PAPER_TABLE).expect("bundled cost table is valid")
    }

    /// Costs counted from the toy model family.
    pub fn analytic(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut t = Self::new(Provenance::Analytic);
        let g = 1e-9;
        for level in 0..arch.levels() {
            let spec = arch.backbone(level)?;
            t.insert(
                &spec.id,
                spec.input_resolution as u32,
                analytic_flops(&spec.layers()) * g,
            )?;
        }
        let lowest = arch.ladder.lowest() as u32;
        let phi = arch.policy_features();
        t.insert("phi", lowest, analytic_flops(&phi.layers()) * g)?;
        t.insert(
            "policy_rnn",
            lowest,
            analytic_flops(&arch.recurrent_layers()) * g,
        )?;
        let head = [Layer::Linear {
            d_in: arch.feature_dim(),
            d_out: arch.num_classes,
        }];
        t.insert("cls_head", lowest, analytic_flops(&head) * g)?;
        Ok(t)
    }

    pub fn insert(&mut self, network: &str, resolution: u32, gflops: f64) -> Result<()> {
        if !(gflops > 0.0) || !gflops.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cost of {network}@{resolution} must be positive, got {gflops}"
            )));
        }
        self.entries
            .insert((network.to_string(), resolution), gflops);
        Ok(())
    }

    pub fn get(&self, network: &str, resolution: u32) -> Result<f64> {
        self.entries
            .get(&(network.to_string(), resolution))
            .copied()
            .ok_or_else(|| Error::MissingCost {
                network: network.to_string(),
                resolution,
            })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, f64)> {
        self.entries.iter().map(|((n, r), v)| (n.as_str(), *r, *v))
    }

    /// Parse the versioned CSV format: `#`-prefixed header lines carrying
    /// `resroute cost table v<N>` and `provenance: <kind>`, then a
    /// `network,resolution,gflops` table.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut version = None;
        let mut provenance = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            if let Some(v) = body.strip_prefix("resroute cost table v") {
                version = Some(v.trim().to_string());
            } else if let Some(p) = body.strip_prefix("provenance:") {
                provenance = Some(p.trim().parse::<Provenance>()?);
            }
        }
        let version =
            version.ok_or_else(|| Error::Format("cost table has no version header".into()))?;
        if version != COST_TABLE_VERSION.to_string() {
            return Err(Error::Version {
                expected: COST_TABLE_VERSION.to_string(),
                found: version,
            });
        }
        let provenance = provenance
            .ok_or_else(|| Error::Format("cost table has no provenance header".into()))?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut table = Self::new(provenance);
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(|e| Error::Format(format!("cost table: {e}")))?;
            table.insert(&row.network, row.resolution, row.gflops)?;
        }
        Ok(table)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# resroute cost table v{COST_TABLE_VERSION}\n# provenance: {}\n",
            self.provenance
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        for (network, resolution, gflops) in self.iter() {
            w.serialize(CsvRow {
                network: network.to_string(),
                resolution,
                gflops,
            })
            .expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8"));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accounting {
    /// Backbone cost of each chosen action only.
    #[default]
    Paper,
    /// Additionally charges the policy network on every frame it observes.
    Full,
}

impl fmt::Display for Accounting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Full => "full",
        })
    }
}

impl std::str::FromStr for Accounting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown accounting '{other}'"
            ))),
        }
    }
}

/// A cost table bound to the action space: per-level backbone costs plus the
/// policy network's own per-frame cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub provenance: Provenance,
    level_gflops: Vec<f64>,
    num_skips: usize,
    policy_gflops: f64,
    lowest_head_gflops: f64,
}

impl CostModel {
    /// Published costs: ResNet-50/34/18 at 224/168/112 and MobileNetV2 at 84,
    /// with MobileNetV2 doubling as the policy feature extractor.
    pub fn paper(arch: &ArchConfig) -> Result<Self> {
        let table = CostTable::paper();
        let nets = [
            ("resnet50", 224),
            ("resnet34", 168),
            ("resnet18", 112),
            ("mobilenetv2", 84),
        ];
        if arch.levels() != nets.len() {
            return Err(Error::InvalidArgument(format!(
                "the published table covers 4 resolution levels, the model has {}",
                arch.levels()
            )));
        }
        let level_gflops = nets
            .iter()
            .map(|(n, r)| table.get(n, *r))
            .collect::<Result<Vec<_>>>()?;
        let d = PAPER_POLICY_FEATURE_DIM;
        Ok(Self {
            provenance: Provenance::Paper,
            num_skips: arch.skip_actions(),
            policy_gflops: level_gflops[3] + d * d * 1e-9,
            lowest_head_gflops: 2.0 * d * arch.num_classes as f64 * 1e-9,
            level_gflops,
        })
    }

    pub fn analytic(arch: &ArchConfig) -> Result<Self> {
        Self::from_analytic_table(&CostTable::analytic(arch)?, arch)
    }

    pub fn from_analytic_table(table: &CostTable, arch: &ArchConfig) -> Result<Self> {
        let lowest = arch.ladder.lowest() as u32;
        let level_gflops = (0..arch.levels())
            .map(|l| {
                let spec = arch.backbone(l)?;
                table.get(&spec.id, spec.input_resolution as u32)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            provenance: table.provenance,
            num_skips: arch.skip_actions(),
            policy_gflops: table.get("phi", lowest)? + table.get("policy_rnn", lowest)?,
            lowest_head_gflops: table.get("cls_head", lowest)?,
            level_gflops,
        })
    }

    pub fn for_provenance(p: Provenance, arch: &ArchConfig) -> Result<Self> {
        match p {
            Provenance::Paper => Self::paper(arch),
            Provenance::Analytic => Self::analytic(arch),
        }
    }

    pub fn level_gflops(&self) -> &[f64] {
        &self.level_gflops
    }

    pub fn policy_gflops(&self) -> f64 {
        self.policy_gflops
    }

    pub fn num_actions(&self) -> usize {
        self.level_gflops.len() + self.num_skips
    }

    /// Per-action cost vector over the whole action space (skips cost 0).
    pub fn action_costs(&self, accounting: Accounting) -> Vec<f64> {
        let l = self.level_gflops.len();
        (0..self.num_actions())
            .map(|a| {
                if a >= l {
                    0.0
                } else if accounting == Accounting::Full && a + 1 == l {
                    self.lowest_head_gflops
                } else {
                    self.level_gflops[a]
                }
            })
            .collect()
    }

    /// Cost of one decision's backbone work. Under full accounting the policy
    /// overhead is charged separately per observed frame, and the lowest level
    /// only adds its classification head.
    pub fn flops_of_action(&self, action: PolicyAction, accounting: Accounting) -> Result<f64> {
        match action {
            PolicyAction::Skip(_) => Ok(0.0),
            PolicyAction::Resolution(l) => {
                let last = self.level_gflops.len().checked_sub(1);
                match (self.level_gflops.get(l), accounting) {
                    (None, _) => Err(Error::InvalidArgument(format!(
                        "no cost for resolution level {l}"
                    ))),
                    (Some(_), Accounting::Full) if Some(l) == last => Ok(self.lowest_head_gflops),
                    (Some(&c), _) => Ok(c),
                }
            }
        }
    }

    /// Aggregate one trace. Usage attributes every frame to the decision that
    /// covered it, so a skip of `F` frames weighs `F`.
    pub fn video_cost(&self, trace: &PolicyTrace, accounting: Accounting) -> Result<CostReport> {
        let last = self.level_gflops.len() - 1;
        let mut total = 0.0;
        for f in trace.frames.iter().filter(|f| f.observed) {
            let shared = accounting == Accounting::Full && f.policy_ran;
            if shared {
                total += self.policy_gflops;
            }
            for &l in &f.levels {
                let c = self.level_gflops.get(l).ok_or_else(|| {
                    Error::InvalidArgument(format!("no cost for resolution level {l}"))
                })?;
                total += if shared && l == last {
                    self.lowest_head_gflops
                } else {
                    *c
                };
            }
        }
        let t = trace.frames.len().max(1) as f64;
        Ok(CostReport {
            gflops_per_frame: total / t,
            gflops_per_video: total,
            usage: trace.hard_usage(self.num_actions()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(rename = "gflops_f")]
    pub gflops_per_frame: f64,
    #[serde(rename = "gflops_v")]
    pub gflops_per_video: f64,
    /// Share of decisions per action.
    pub usage: Vec<f64>,
}

/// `Σ_t ⟨π_t, FLOPS⟩ / frames`: the differentiable per-frame cost surrogate.
pub fn expected_flops<'g>(
    soft_policies: &[Tensor<'g>],
    model: &CostModel,
    frames: usize,
) -> Result<Tensor<'g>> {
    let first = soft_policies
        .first()
        .ok_or_else(|| Error::InvalidArgument("expected_flops needs at least one policy".into()))?;
    if frames == 0 {
        return Err(Error::InvalidArgument(
            "frame count must be positive".into(),
        ));
    }
    let g = first.graph();
    let costs = g.constant(
        model.action_costs(Accounting::Paper),
        &[model.num_actions()],
    )?;
    let mut total: Option<Tensor<'g>> = None;
    for pi in soft_policies {
        let c = pi.mul(&costs)?.sum();
        total = Some(match total {
            None => c,
            Some(t) => t.add(&c)?,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / frames as f64))
}
