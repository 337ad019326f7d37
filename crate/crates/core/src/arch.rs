//! Architecture description shared by the policy network, the backbones and
//! the analytic cost model.

use serde::{Deserialize, Serialize};

use crate::cost::Layer;
use crate::error::{Error, Result};

/// Square input resolutions in strictly descending order. Level 0 is the base
/// resolution of the data; the last level feeds the policy network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ResolutionLadder(Vec<usize>);

impl ResolutionLadder {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::InvalidArgument(
                "a ladder needs at least two resolutions".into(),
            ));
        }
        if levels.windows(2).any(|w| w[0] <= w[1]) || levels.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "resolutions must be positive and strictly descending, got {levels:?}"
            )));
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn base(&self) -> usize {
        self.0[0]
    }

    pub fn lowest(&self) -> usize {
        self.0[self.0.len() - 1]
    }

    pub fn resolution(&self, level: usize) -> Result<usize> {
        self.0.get(level).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("level {level} outside ladder of {}", self.0.len()))
        })
    }

    /// Whether `level` is reached from the base by exact block averaging.
    pub fn is_exact(&self, level: usize) -> bool {
        self.0.get(level).is_some_and(|&s| self.base() % s == 0)
    }
}

impl TryFrom<Vec<usize>> for ResolutionLadder {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ResolutionLadder> for Vec<usize> {
    fn from(l: ResolutionLadder) -> Self {
        l.0
    }
}

impl Default for ResolutionLadder {
    fn default() -> Self {
        Self(vec![32, 24, 16, 8])
    }
}

/// A stack of 3×3, stride-2 convolutions (each followed by ReLU), global
/// average pooling, and a linear head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub id: String,
    pub input_resolution: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// Output size of the linear head; `None` stops at the pooled features.
    pub head: Option<usize>,
}

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

pub(crate) fn conv_out(size: usize) -> usize {
    (size + 2 * PADDING - KERNEL) / STRIDE + 1
}

impl ConvNetSpec {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    /// Layer list for FLOP counting.
    pub fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut size = self.input_resolution;
        let mut cin = self.in_channels;
        for &w in &self.widths {
            layers.push(Layer::Conv {
                in_channels: cin,
                out_channels: w,
                kernel: KERNEL,
                stride: STRIDE,
                padding: PADDING,
                in_h: size,
                in_w: size,
            });
            size = conv_out(size);
            layers.push(Layer::Elementwise {
                elements: w * size * size,
            });
            cin = w;
        }
        if !self.widths.is_empty() {
            layers.push(Layer::Elementwise { elements: cin });
        }
        if let Some(out) = self.head {
            layers.push(Layer::Linear {
                d_in: cin,
                d_out: out,
            });
        }
        layers
    }
}

/// Every size hyperparameter of the model family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub ladder: ResolutionLadder,
    /// Frame counts of the skip actions.
    pub skips: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Conv widths of the policy feature extractor, run at the lowest resolution.
    pub policy_widths: Vec<usize>,
    pub lstm_hidden: usize,
    /// Conv widths of the backbones for levels `0..L-1`; the last level
    /// reuses the policy features.
    pub backbone_widths: Vec<Vec<usize>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            ladder: ResolutionLadder::default(),
            skips: vec![1, 2, 4],
            num_classes: 6,
            in_channels: 1,
            policy_widths: vec![16, 32],
            lstm_hidden: 64,
            backbone_widths: vec![vec![32, 32, 32], vec![24, 24, 24], vec![16, 16]],
        }
    }
}

impl ArchConfig {
    /// Number of resolution actions, `L`.
    pub fn levels(&self) -> usize {
        self.ladder.len()
    }

    /// Number of skip actions, `M`.
    pub fn skip_actions(&self) -> usize {
        self.skips.len()
    }

    /// Size of the action space, `L + M`.
    pub fn num_actions(&self) -> usize {
        self.levels() + self.skip_actions()
    }

    pub fn max_skip(&self) -> usize {
        self.skips.iter().copied().max().unwrap_or(1)
    }

    pub fn feature_dim(&self) -> usize {
        self.policy_features().feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if self.backbone_widths.len() + 1 != l {
            return Err(Error::InvalidArgument(format!(
                "{} backbones for a ladder of {l} levels (expected {})",
                self.backbone_widths.len(),
                l - 1
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if self.skips.is_empty() || self.skips.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid skip lengths {:?}",
                self.skips
            )));
        }
        if self.policy_widths.is_empty() || self.backbone_widths.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument(
                "every network needs a conv layer".into(),
            ));
        }
        Ok(())
    }

    /// Feature extractor of the policy (no head).
    pub fn policy_features(&self) -> ConvNetSpec {
        ConvNetSpec {
            id: "phi".into(),
            input_resolution: self.ladder.lowest(),
            in_channels: self.in_channels,
            widths: self.policy_widths.clone(),
            head: None,
        }
    }

    /// Classifier for `level`. The last level is the policy feature extractor
    /// followed by its own classification head.
    pub fn backbone(&self, level: usize) -> Result<ConvNetSpec> {
        let l = self.levels();
        if level + 1 == l {
            return Ok(ConvNetSpec {
                id: format!("psi{level}"),
                head: Some(self.num_classes),
                ..self.policy_features()
            });
        }
        let widths = self.backbone_widths.get(level).ok_or_else(|| {
            Error::InvalidArgument(format!("no backbone for level {level} of {l}"))
        })?;
        Ok(ConvNetSpec {
            id: format!("psi{level}"),
            input_resolution: self.ladder.resolution(level)?,
            in_channels: self.in_channels,
            widths: widths.clone(),
            head: Some(self.num_classes),
        })
    }

    /// FLOP-counting layers of one LSTM step plus the policy logits head.
    pub fn recurrent_layers(&self) -> Vec<Layer> {
        let (d, k) = (self.feature_dim(), self.lstm_hidden);
        vec![
            Layer::Linear {
                d_in: d,
                d_out: 4 * k,
            },
            Layer::Linear {
                d_in: k,
                d_out: 4 * k,
            },
            Layer::Elementwise {
                elements: 4 * k + 5 * k,
            },
            Layer::Linear {
                d_in: k,
                d_out: self.num_actions(),
            },
        ]
    }
}
