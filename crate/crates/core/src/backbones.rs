//! Resolution-specific classifiers and the frame resize operator.
//!
//! Backbone `l` lives under the parameter prefix `backbone{l}` and reads
//! frames at the ladder's resolution `s_l`. The lowest level has no backbone
//! of its own: it is the policy feature extractor plus a linear head.

use rand::Rng;

use crate::arch::{ArchConfig, ResolutionLadder, PADDING, STRIDE};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{resample_plain, Tensor};

pub fn backbone_prefix(level: usize) -> String {
    format!("backbone{level}")
}

/// Resize `[N, C, s_0, s_0]` frames to level `level` of the ladder.
pub fn resize_frame<'g>(
    frames: &Tensor<'g>,
    ladder: &ResolutionLadder,
    level: usize,
) -> Result<Tensor<'g>> {
    let s = ladder.resolution(level)?;
    let shape = frames.shape();
    if shape.len() < 2 || shape[shape.len() - 2..] != [ladder.base(), ladder.base()] {
        return Err(shape_err(
            "resize_frame",
            format!("expected trailing {0}x{0}, got {shape:?}", ladder.base()),
        ));
    }
    if level == 0 {
        return Ok(*frames);
    }
    frames.resample(s, s)
}

/// Resize plain `[planes, s_0, s_0]` data to every ladder level.
pub fn resize_all_levels(data: &[f64], planes: usize, ladder: &ResolutionLadder) -> Vec<Vec<f64>> {
    let b = ladder.base();
    ladder
        .levels()
        .iter()
        .enumerate()
        .map(|(l, &s)| {
            if l == 0 {
                data.to_vec()
            } else {
                resample_plain(data, planes, (b, b), (s, s))
            }
        })
        .collect()
}

/// Conv → bias → ReLU for each layer under `prefix`, then global average
/// pooling: `[N, C, H, W] -> [N, width]`.
pub fn conv_features<'g>(
    x: &Tensor<'g>,
    params: &Bound<'g>,
    prefix: &str,
    layers: usize,
) -> Result<Tensor<'g>> {
    let mut h = *x;
    for i in 0..layers {
        let k = params.get(&format!("{prefix}.conv{i}.weight"))?;
        let b = params.get(&format!("{prefix}.conv{i}.bias"))?;
        h = h.conv2d(&k, STRIDE, PADDING)?.add_channel_bias(&b)?.relu();
    }
    h.global_avg_pool()
}

/// Initialize backbones `0..L-1` under their prefixes.
pub fn init_backbones<R: Rng + ?Sized>(
    params: &mut ParamSet,
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<()> {
    for level in 0..arch.levels() - 1 {
        params.init_convnet(&backbone_prefix(level), &arch.backbone(level)?, rng)?;
    }
    Ok(())
}

/// Pooled features of backbone `level` on `[N, C, s_l, s_l]` frames.
pub fn backbone_features<'g>(
    frames: &Tensor<'g>,
    level: usize,
    params: &Bound<'g>,
    arch: &ArchConfig,
) -> Result<Tensor<'g>> {
    if level + 1 >= arch.levels() {
        return Err(Error::InvalidArgument(format!(
            "level {level} has no standalone backbone; the lowest level is served by the policy features"
        )));
    }
    let spec = arch.backbone(level)?;
    let shape = frames.shape();
    let want = [
        spec.in_channels,
        spec.input_resolution,
        spec.input_resolution,
    ];
    if shape.len() != 4 || shape[1..] != want {
        return Err(shape_err(
            "backbone_predict",
            format!(
                "level {level} expects [N, {}, {s}, {s}], got {shape:?}",
                want[0],
                s = want[1]
            ),
        ));
    }
    conv_features(frames, params, &backbone_prefix(level), spec.widths.len())
}

/// Class logits `[N, C]` of backbone `level`.
pub fn backbone_predict<'g>(
    frames: &Tensor<'g>,
    level: usize,
    params: &Bound<'g>,
    arch: &ArchConfig,
) -> Result<Tensor<'g>> {
    let f = backbone_features(frames, level, params, arch)?;
    let p = backbone_prefix(level);
    f.linear(
        &params.get(&format!("{p}.fc.weight"))?,
        Some(&params.get(&format!("{p}.fc.bias"))?),
    )
}
