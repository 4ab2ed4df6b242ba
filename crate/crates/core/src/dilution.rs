//! Mask and rescale coefficients for standard dropout, quantal synaptic
//! dilution, and the two single-heterogeneity ablations.
//!
//! For a layer of width `n` a draw produces, per unit `i`, a retain
//! probability `p_i`, a Boolean mask `m_i ~ Bernoulli(p_i)`, a rescaling size
//! `q_i`, and the coefficient `c_i = q_i * m_i` that multiplies the unit's
//! rectified output during training. At evaluation time the transform is the
//! identity.
//!
//! With drop rate `d` the mean retain probability is `p̄ = 1 - d`, and the
//! beta-distributed modes use `p ~ Beta(α, β)` with `β = α (1 - p̄) / p̄`, so
//! that `E[p] = p̄` for every homogeneity `α`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stochastics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilutionMode {
    /// No dilution at all.
    None,
    /// Inverted dropout: `m ~ Bernoulli(p̄)`, `q = 1/p̄`.
    Standard,
    /// Beta-distributed retain probabilities, fixed rescale `1/p̄`.
    DistP,
    /// Fixed retain probability `p̄`, beta-distributed rescale from an
    /// independent draw.
    DistQ,
    /// Quantal synaptic dilution: one beta draw feeds both the mask and the
    /// rescale `q = p / p̄²`.
    Qsd,
}

impl DilutionMode {
    pub const ALL: [DilutionMode; 5] = [
        DilutionMode::None,
        DilutionMode::Standard,
        DilutionMode::DistP,
        DilutionMode::DistQ,
        DilutionMode::Qsd,
    ];

    /// Whether the mode draws from a beta distribution and so needs `α`.
    pub fn uses_alpha(self) -> bool {
        matches!(
            self,
            DilutionMode::DistP | DilutionMode::DistQ | DilutionMode::Qsd
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DilutionMode::None => "none",
            DilutionMode::Standard => "standard",
            DilutionMode::DistP => "dist_p",
            DilutionMode::DistQ => "dist_q",
            DilutionMode::Qsd => "qsd",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            DilutionMode::None => 0,
            DilutionMode::Standard => 1,
            DilutionMode::DistP => 2,
            DilutionMode::DistQ => 3,
            DilutionMode::Qsd => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        DilutionMode::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for DilutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DilutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DilutionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown dilution mode `{s}` (expected one of none, standard, dist_p, dist_q, qsd)"
                ))
            })
    }
}

/// Whether one coefficient vector serves the whole mini-batch or each
/// example gets its own draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSharing {
    /// Independent coefficients per example and unit.
    #[default]
    PerExample,
    /// One coefficient per unit per forward pass, broadcast over the batch.
    PerBatch,
}

impl MaskSharing {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskSharing::PerExample => "per_example",
            MaskSharing::PerBatch => "per_batch",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            MaskSharing::PerExample => 0,
            MaskSharing::PerBatch => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MaskSharing::PerExample),
            1 => Some(MaskSharing::PerBatch),
            _ => None,
        }
    }
}

impl fmt::Display for MaskSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_example" => Ok(MaskSharing::PerExample),
            "per_batch" => Ok(MaskSharing::PerBatch),
            _ => Err(Error::Parameter(format!(
                "unknown mask sharing `{s}` (expected per_example or per_batch)"
            ))),
        }
    }
}

/// Mode, drop rate and homogeneity: everything that determines the law of a
/// coefficient draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilutionConfig {
    mode: DilutionMode,
    drop_rate: f64,
    alpha: f64,
}

impl DilutionConfig {
    /// Validates `0 <= drop_rate < 1` and, for beta modes, `alpha > 0`.
    /// `alpha` is ignored (and stored as 1) for modes that do not use it.
    pub fn new(mode: DilutionMode, drop_rate: f64, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_rate) {
            return Err(Error::Parameter(format!(
                "drop rate must lie in [0, 1), got {drop_rate}"
            )));
        }
        if mode.uses_alpha() && !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Parameter(format!(
                "homogeneity alpha must be positive and finite for {mode}, got {alpha}"
            )));
        }
        let alpha = if mode.uses_alpha() { alpha } else { 1.0 };
        Ok(DilutionConfig {
            mode,
            drop_rate,
            alpha,
        })
    }

    pub fn none() -> Self {
        DilutionConfig {
            mode: DilutionMode::None,
            drop_rate: 0.0,
            alpha: 1.0,
        }
    }

    pub fn standard(drop_rate: f64) -> Result<Self> {
        Self::new(DilutionMode::Standard, drop_rate, 1.0)
    }

    pub fn qsd(drop_rate: f64, alpha: f64) -> Result<Self> {
        Self::new(DilutionMode::Qsd, drop_rate, alpha)
    }

    pub fn mode(&self) -> DilutionMode {
        self.mode
    }

    pub fn drop_rate(&self) -> f64 {
        self.drop_rate
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Mean retain probability `1 - d`.
    pub fn mean_retain(&self) -> f64 {
        1.0 - self.drop_rate
    }

    /// True when training-time coefficients are all one, so no randomness
    /// is consumed.
    pub fn is_identity(&self) -> bool {
        self.mode == DilutionMode::None || self.drop_rate == 0.0
    }
}

/// `β = α (1 - p̄) / p̄` for mean retain probability `p̄ = 1 - drop_rate`.
pub fn derived_beta(alpha: f64, drop_rate: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    if !(drop_rate > 0.0 && drop_rate < 1.0) {
        return Err(Error::Parameter(format!(
            "derived beta needs a drop rate in (0, 1), got {drop_rate}"
        )));
    }
    let keep = 1.0 - drop_rate;
    Ok(alpha * (1.0 - keep) / keep)
}

/// Closed-form mean QSD coefficient, `E[c] = 1 + β / (α (α + β + 1))`.
///
/// Equals one at `drop_rate = 0` and exceeds one otherwise.
pub fn expected_coefficient(alpha: f64, drop_rate: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Parameter(format!(
            "drop rate must lie in [0, 1), got {drop_rate}"
        )));
    }
    if drop_rate == 0.0 {
        return Ok(1.0);
    }
    let beta = derived_beta(alpha, drop_rate)?;
    Ok(1.0 + beta / (alpha * (alpha + beta + 1.0)))
}

/// One draw of per-unit dilution coefficients for a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientBatch {
    retain_probs: Vec<f64>,
    masks: Vec<bool>,
    rescales: Vec<f64>,
    coefficients: Vec<f64>,
}

impl CoefficientBatch {
    /// All-pass coefficients (`p = m = q = c = 1`).
    pub fn identity(n: usize) -> Self {
        CoefficientBatch {
            retain_probs: vec![1.0; n],
            masks: vec![true; n],
            rescales: vec![1.0; n],
            coefficients: vec![1.0; n],
        }
    }

    /// Assembles a batch from explicit probabilities, masks and rescales;
    /// coefficients are derived as `q * m`.
    pub fn from_parts(
        retain_probs: Vec<f64>,
        masks: Vec<bool>,
        rescales: Vec<f64>,
    ) -> Result<Self> {
        let n = retain_probs.len();
        if masks.len() != n || rescales.len() != n {
            return Err(Error::Shape(format!(
                "coefficient parts disagree in length: {n}, {}, {}",
                masks.len(),
                rescales.len()
            )));
        }
        let coefficients = masks
            .iter()
            .zip(&rescales)
            .map(|(&m, &q)| if m { q } else { 0.0 })
            .collect();
        Ok(CoefficientBatch {
            retain_probs,
            masks,
            rescales,
            coefficients,
        })
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn retain_probs(&self) -> &[f64] {
        &self.retain_probs
    }

    pub fn masks(&self) -> &[bool] {
        &self.masks
    }

    pub fn rescales(&self) -> &[f64] {
        &self.rescales
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Elementwise `c ⊙ activations`.
    pub fn apply(&self, activations: &[f64]) -> Result<Vec<f64>> {
        if activations.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} activations for {} coefficients",
                activations.len(),
                self.len()
            )));
        }
        Ok(activations
            .iter()
            .zip(&self.coefficients)
            .map(|(a, c)| a * c)
            .collect())
    }
}

/// Draws one coefficient vector of length `n` under `config`.
///
/// Identity configurations (`None` mode or zero drop rate) return all-ones
/// without touching the stream.
pub fn sample_coefficients(
    config: &DilutionConfig,
    n: usize,
    stream: &mut RngStream,
) -> Result<CoefficientBatch> {
    if n == 0 {
        return Err(Error::Parameter("layer width must be at least 1".into()));
    }
    if config.is_identity() {
        return Ok(CoefficientBatch::identity(n));
    }

    let keep = config.mean_retain();
    let alpha = config.alpha();
    let mut retain_probs = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut rescales = Vec::with_capacity(n);

    match config.mode() {
        DilutionMode::None => unreachable!("identity handled above"),
        DilutionMode::Standard => {
            for _ in 0..n {
                retain_probs.push(keep);
                masks.push(stream.bernoulli(keep)?);
                rescales.push(1.0 / keep);
            }
        }
        DilutionMode::DistP => {
            let beta = derived_beta(alpha, config.drop_rate())?;
            for _ in 0..n {
                let p = stream.beta(alpha, beta)?;
                retain_probs.push(p);
                masks.push(stream.bernoulli(p)?);
                rescales.push(1.0 / keep);
            }
        }
        DilutionMode::DistQ => {
            let beta = derived_beta(alpha, config.drop_rate())?;
            for _ in 0..n {
                let rescale_draw = stream.beta(alpha, beta)?;
                retain_probs.push(keep);
                masks.push(stream.bernoulli(keep)?);
                rescales.push(rescale_draw / (keep * keep));
            }
        }
        DilutionMode::Qsd => {
            let beta = derived_beta(alpha, config.drop_rate())?;
            for _ in 0..n {
                let p = stream.beta(alpha, beta)?;
                retain_probs.push(p);
                masks.push(stream.bernoulli(p)?);
                rescales.push(p / (keep * keep));
            }
        }
    }
    CoefficientBatch::from_parts(retain_probs, masks, rescales)
}
