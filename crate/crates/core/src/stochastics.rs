//! Seeded random streams and the uniform, gamma, beta and Bernoulli samplers
//! behind the dilution masks, plus the log-gamma and beta density functions
//! used for goodness-of-fit checks.
//!
//! Every sampler draws only from an [`RngStream`], so a run is a pure
//! function of its seeds. Transcendental functions go through `libm` rather
//! than the platform math library so that sequences replay bit-for-bit on
//! any host.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// 2^-53, the spacing of the 53-bit uniform grid.
const UNIT_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Largest `f64` strictly below one.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// A deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto the cipher's stream
/// counter, so streams sharing a seed never overlap.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far. Two streams with the same
    /// identity and the same position produce the same future output.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform variate on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * UNIT_53
    }

    /// Uniform variate on the open interval `(0, 1)`.
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * UNIT_53
    }

    /// Uniform integer in `0..bound` by rejection (no modulo bias).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % bound;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Standard normal variate (Box-Muller, cosine branch only).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(std::f64::consts::TAU * u2)
    }

    /// Gamma(shape, 1) variate.
    ///
    /// Marsaglia-Tsang squeeze/rejection for `shape >= 1`; smaller shapes are
    /// boosted by sampling Gamma(shape + 1) and multiplying by `U^(1/shape)`.
    /// For very small shapes the result may underflow to exactly zero.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::Parameter(format!(
                "gamma shape must be positive and finite, got {shape}"
            )));
        }
        if shape < 1.0 {
            let boosted = self.gamma_at_least_one(shape + 1.0);
            let u = self.uniform_open();
            return Ok(boosted * libm::pow(u, 1.0 / shape));
        }
        Ok(self.gamma_at_least_one(shape))
    }

    fn gamma_at_least_one(&mut self, shape: f64) -> f64 {
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / libm::sqrt(9.0 * d);
        loop {
            let x = self.standard_normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform_open();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v;
            }
            if libm::log(u) < 0.5 * x2 + d * (1.0 - v + libm::log(v)) {
                return d * v;
            }
        }
    }

    /// Beta(alpha, beta) variate as `g / (g + l)` for independent
    /// `g ~ Gamma(alpha)` and `l ~ Gamma(beta)`.
    ///
    /// When both gamma draws underflow the pair is redrawn. The quotient is
    /// clamped into the open unit interval, since a true variate within one
    /// ulp of an endpoint rounds onto it.
    pub fn beta(&mut self, alpha: f64, beta: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "beta parameters must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        loop {
            let g = self.gamma(alpha)?;
            let l = self.gamma(beta)?;
            if g > 0.0 || l > 0.0 {
                return Ok(beta_from_gammas(g, l));
            }
        }
    }

    /// Returns `true` with probability `p`, by testing `uniform() < p`.
    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "Bernoulli probability must lie in [0, 1], got {p}"
            )));
        }
        Ok(self.uniform() < p)
    }
}

/// Combines two gamma draws into a beta variate, clamped into `(0, 1)`.
/// At least one of the inputs must be positive.
pub fn beta_from_gammas(gamma_draw: f64, lambda_draw: f64) -> f64 {
    debug_assert!(gamma_draw > 0.0 || lambda_draw > 0.0);
    let p = gamma_draw / (gamma_draw + lambda_draw);
    p.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7, n = 9,
/// with reflection below one half).
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Parameter(format!(
            "ln_gamma requires a positive finite argument, got {x}"
        )));
    }
    Ok(ln_gamma_unchecked(x))
}

fn ln_gamma_unchecked(x: f64) -> f64 {
    use std::f64::consts::PI;
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx)
        return libm::log(PI / libm::sin(PI * x)) - ln_gamma_unchecked(1.0 - x);
    }
    let z = x - 1.0;
    let mut series = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        series += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * libm::log(2.0 * PI) + (z + 0.5) * libm::log(t) - t + libm::log(series)
}

/// Log of the beta function B(a, b).
pub fn ln_beta(a: f64, b: f64) -> Result<f64> {
    Ok(ln_gamma(a)? + ln_gamma(b)? - ln_gamma(a + b)?)
}

/// Beta density at `p`, evaluated in log space.
pub fn beta_pdf(p: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!(
            "beta density is defined on (0, 1), got p = {p}"
        )));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Parameter(format!(
            "beta parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    let log_density =
        (alpha - 1.0) * libm::log(p) + (beta - 1.0) * libm::log1p(-p) - ln_beta(alpha, beta)?;
    Ok(libm::exp(log_density))
}
