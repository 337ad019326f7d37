//! The decision pathway: a small conv feature extractor on lowest-resolution
//! frames, an LSTM over observed frames, and a linear head producing one
//! logit per action. The same features feed the lowest-resolution
//! classification head.
//!
//! Parameters live under `policy.phi`, `policy.lstm`, `policy.fc` (the policy
//! proper) and `policy.cls` (the lowest-resolution classifier head).

use rand::Rng;

use crate::arch::ArchConfig;
use crate::backbones::conv_features;
use crate::error::{shape_err, Error, Result};
use crate::gumbel::GumbelSample;
use crate::params::{Bound, ParamSet};
use crate::tensor::{lstm_step, LstmWeights, Tensor};

pub const PHI: &str = "policy.phi";
pub const LSTM: &str = "policy.lstm";
pub const FC: &str = "policy.fc";
pub const CLS: &str = "policy.cls";

/// Whether `name` belongs to the parameters that make routing decisions.
/// These are the ones frozen during warm-up and finetuning.
pub fn is_policy_param(name: &str) -> bool {
    [PHI, LSTM, FC]
        .iter()
        .any(|p| name.strip_prefix(p).is_some_and(|r| r.starts_with('.')))
}

pub fn init_policy<R: Rng + ?Sized>(
    params: &mut ParamSet,
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<()> {
    let d = arch.feature_dim();
    params.init_convnet(PHI, &arch.policy_features(), rng)?;
    params.init_lstm(LSTM, d, arch.lstm_hidden, rng)?;
    params.init_linear(FC, arch.lstm_hidden, arch.num_actions(), rng)?;
    params.init_linear(CLS, d, arch.num_classes, rng)
}

/// Recurrent state between observed frames.
#[derive(Clone, Copy, Debug)]
pub struct PolicyState<'g> {
    pub h: Tensor<'g>,
    pub c: Tensor<'g>,
    /// Frames still covered by the last skip; the policy must not run while
    /// this is positive.
    pub pending_skips: usize,
}

impl<'g> PolicyState<'g> {
    pub fn initial(g: &'g crate::tensor::Graph, arch: &ArchConfig) -> Result<Self> {
        Ok(Self {
            h: g.zeros(&[arch.lstm_hidden])?,
            c: g.zeros(&[arch.lstm_hidden])?,
            pending_skips: 0,
        })
    }
}

/// Features `[N, d]` of `[N, C, s, s]` frames at the lowest resolution.
pub fn extract_features<'g>(
    frames: &Tensor<'g>,
    params: &Bound<'g>,
    arch: &ArchConfig,
) -> Result<Tensor<'g>> {
    let s = arch.ladder.lowest();
    let shape = frames.shape();
    if shape.len() != 4 || shape[1..] != [arch.in_channels, s, s] {
        return Err(shape_err(
            "extract_features",
            format!(
                "expected [N, {}, {s}, {s}], got {shape:?}",
                arch.in_channels
            ),
        ));
    }
    conv_features(frames, params, PHI, arch.policy_widths.len())
}

/// Action logits `z = FC(h)`.
pub fn policy_logits<'g>(h: &Tensor<'g>, params: &Bound<'g>) -> Result<Tensor<'g>> {
    h.linear(
        &params.get(&format!("{FC}.weight"))?,
        Some(&params.get(&format!("{FC}.bias"))?),
    )
}

/// Class logits of the lowest-resolution classifier from features `[d]` or
/// `[N, d]`.
pub fn lowest_res_predict<'g>(f: &Tensor<'g>, params: &Bound<'g>) -> Result<Tensor<'g>> {
    f.linear(
        &params.get(&format!("{CLS}.weight"))?,
        Some(&params.get(&format!("{CLS}.bias"))?),
    )
}

pub fn lstm_weights<'g>(params: &Bound<'g>, prefix: &str) -> Result<LstmWeights<'g>> {
    Ok(LstmWeights {
        w_ih: params.get(&format!("{prefix}.w_ih"))?,
        w_hh: params.get(&format!("{prefix}.w_hh"))?,
        bias: params.get(&format!("{prefix}.bias"))?,
    })
}

/// Advance the LSTM on features `f` and return `(logits, new state)`.
/// Disallowed actions get a logit of `-inf`.
pub fn policy_update<'g>(
    f: &Tensor<'g>,
    state: &PolicyState<'g>,
    params: &Bound<'g>,
    mask: Option<&[bool]>,
) -> Result<(Tensor<'g>, PolicyState<'g>)> {
    if state.pending_skips > 0 {
        return Err(Error::InvalidArgument(format!(
            "policy invoked with {} frames still to skip",
            state.pending_skips
        )));
    }
    let (h, c) = lstm_step(f, &state.h, &state.c, &lstm_weights(params, LSTM)?)?;
    let mut z = policy_logits(&h, params)?;
    if let Some(mask) = mask {
        if mask.len() != z.numel() {
            return Err(shape_err(
                "policy mask",
                format!("{} flags for {} actions", mask.len(), z.numel()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("action mask allows nothing".into()));
        }
        if mask.iter().any(|&m| !m) {
            let bias = mask
                .iter()
                .map(|&m| if m { 0.0 } else { f64::NEG_INFINITY })
                .collect();
            z = z.add(&f.graph().constant(bias, &[mask.len()])?)?;
        }
    }
    if z.with_value(|v| v.iter().any(|x| x.is_nan() || *x == f64::INFINITY)) {
        return Err(Error::NonFinite(format!("policy logits {:?}", z.value())));
    }
    Ok((
        z,
        PolicyState {
            h,
            c,
            pending_skips: 0,
        },
    ))
}

/// How an observed frame's action is chosen.
pub enum StepMode<'r, R: Rng + ?Sized> {
    /// Straight-through Gumbel sample at temperature `tau`.
    Train { tau: f64, rng: &'r mut R },
    /// Deterministic argmax of the policy.
    Infer,
}

/// Outcome of [`policy_step`].
pub enum Decision<'g> {
    Sampled(GumbelSample<'g>),
    Argmax(usize),
}

impl Decision<'_> {
    pub fn index(&self) -> usize {
        match self {
            Self::Sampled(s) => s.hard_index,
            Self::Argmax(i) => *i,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Full single-frame step from a base-resolution `[C, s_0, s_0]` frame:
/// resize, extract features, advance the LSTM, decide.
pub fn policy_step<'g, R: Rng + ?Sized>(
    frame: &Tensor<'g>,
    state: &PolicyState<'g>,
    params: &Bound<'g>,
    arch: &ArchConfig,
    mode: StepMode<'_, R>,
) -> Result<(Decision<'g>, PolicyState<'g>, Tensor<'g>)> {
    let (b, s) = (arch.ladder.base(), arch.ladder.lowest());
    if frame.shape() != [arch.in_channels, b, b] {
        return Err(shape_err(
            "policy_step",
            format!("frame {:?}", frame.shape()),
        ));
    }
    let low = frame
        .reshape(&[1, arch.in_channels, b, b])?
        .resample(s, s)?;
    let f = extract_features(&low, params, arch)?.reshape(&[arch.feature_dim()])?;
    let (z, next) = policy_update(&f, state, params, None)?;
    let decision = match mode {
        StepMode::Train { tau, rng } => {
            Decision::Sampled(GumbelSample::draw(&z.log_softmax(), tau, rng)?)
        }
        StepMode::Infer => Decision::Argmax(z.with_value(argmax)),
    };
    Ok((decision, next, f))
}
