//! Per-channel offset and scaling of raw tactile streams.

use crate::error::{invalid, Result};

/// Target bound on the stationary window after scaling.
pub const STATIONARY_BOUND: f64 = 0.05;
/// Frames after grasping treated as stationary when not specified.
pub const DEFAULT_STATIONARY_WINDOW: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationProfile {
    /// Raw value of each channel at the grasp frame.
    pub offset: Vec<f64>,
    /// Multiplier applied after subtracting the offset; always positive.
    pub scale: Vec<f64>,
    /// Channels whose stationary window was flat; their scale is 1.
    pub flat_channels: Vec<usize>,
}

impl NormalizationProfile {
    /// Applies the profile to any frame sequence with matching width.
    pub fn apply(&self, raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        raw.iter()
            .map(|frame| {
                if frame.len() != self.offset.len() {
                    return Err(invalid(format!("frame has {} channels, profile {}", frame.len(), self.offset.len())));
                }
                Ok(frame
                    .iter()
                    .zip(self.offset.iter().zip(&self.scale))
                    .map(|(&x, (&o, &s))| ((x - o) * s).clamp(-1.0, 1.0))
                    .collect())
            })
            .collect()
    }
}

/// Offsets every channel by its value at `grasp_index`, scales it so that the
/// frames `grasp_index..grasp_index + stationary_window` stay within
/// ±[`STATIONARY_BOUND`], and clips everything to [-1, 1].
pub fn normalize(
    raw: &[Vec<f64>],
    grasp_index: usize,
    stationary_window: usize,
) -> Result<(Vec<Vec<f64>>, NormalizationProfile)> {
    if stationary_window == 0 {
        return Err(invalid("stationary window must be non-empty"));
    }
    if grasp_index + stationary_window > raw.len() {
        return Err(invalid(format!(
            "grasp index {grasp_index} + window {stationary_window} exceeds {} frames",
            raw.len()
        )));
    }
    let channels = raw[0].len();
    if raw.iter().any(|f| f.len() != channels) {
        return Err(invalid("frames have different channel counts"));
    }
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite raw value"));
    }
    let offset = raw[grasp_index].clone();
    let mut scale = vec![1.0; channels];
    let mut flat_channels = Vec::new();
    for c in 0..channels {
        let peak = raw[grasp_index..grasp_index + stationary_window]
            .iter()
            .map(|f| (f[c] - offset[c]).abs())
            .fold(0.0, f64::max);
        let s = STATIONARY_BOUND / peak;
        if peak > 0.0 && s.is_finite() {
            scale[c] = s;
        } else {
            flat_channels.push(c);
        }
    }
    let profile = NormalizationProfile {
        offset,
        scale,
        flat_channels,
    };
    Ok((profile.apply(raw)?, profile))
}
