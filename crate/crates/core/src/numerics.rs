//! Scalar machinery behind every bound: binary KL divergence and its
//! inverse, the ζ prior over compression-set sizes, and log-binomials.
//!
//! Everything here is a pure function. All bound arithmetic downstream is
//! carried out in log space through [`log_binomial`] and [`ln_zeta`], so
//! nothing overflows for training sets in the millions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute bisection tolerance on `p` for [`kl_inverse`].
pub const KL_INVERSE_TOLERANCE: f64 = 1e-10;

/// Right end of the open interval used to decide saturation of [`kl_inverse`].
const SATURATION_POINT: f64 = 1.0 - 1e-15;

/// Below this many factors `log_binomial` sums logs directly instead of
/// differencing log-gamma values.
const DIRECT_SUM_LIMIT: u64 = 64;

/// A real number in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub const ZERO: Probability = Probability(0.0);
    pub const ONE: Probability = Probability(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Probability(value))
        } else {
            Err(Error::Domain(format!("{value} is not a probability")))
        }
    }

    /// Fraction `count / total`; zero when `total` is zero.
    pub fn ratio(count: usize, total: usize) -> Self {
        if total == 0 {
            Probability(0.0)
        } else {
            Probability((count as f64 / total as f64).clamp(0.0, 1.0))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Probability::new(value)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

/// `x ln(x / y)` with the convention `0 ln 0 = 0`.
fn xlogx_over_y(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

/// Binary KL divergence `kl(q, p)` between Bernoulli(q) and Bernoulli(p).
///
/// Infinite when `p` sits on a boundary that `q` does not.
pub fn binary_kl(q: Probability, p: Probability) -> f64 {
    let (q, p) = (q.0, p.0);
    let kl = xlogx_over_y(q, p) + xlogx_over_y(1.0 - q, 1.0 - p);
    // rounding can push kl(q, q±tiny) a hair below zero
    kl.max(0.0)
}

/// Largest `p ∈ [q, 1]` with `kl(q, p) ≤ eps`.
///
/// Bisection on `[q, 1]` down to [`KL_INVERSE_TOLERANCE`]; the returned value
/// is the lower end of the final bracket, so `kl(q, p) ≤ eps` always holds.
/// Returns exactly `1.0` once `eps` reaches `kl(q, 1 - 1e-15)`.
pub fn kl_inverse(q: Probability, eps: f64) -> Result<Probability> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::Domain(format!("kl budget {eps} must be finite and >= 0")));
    }
    if eps == 0.0 {
        return Ok(q);
    }
    if q.0 >= SATURATION_POINT || eps >= binary_kl(q, Probability(SATURATION_POINT)) {
        return Ok(Probability::ONE);
    }

    let mut lo = q.0;
    let mut hi = 1.0;
    while hi - lo > KL_INVERSE_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if binary_kl(q, Probability(mid)) <= eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Probability(lo))
}

/// ζ prior over sizes and counts: `(6/π²)(k+1)^-2`.
pub fn zeta(k: u64) -> Probability {
    let k1 = k as f64 + 1.0;
    Probability(6.0 / (PI * PI) / (k1 * k1))
}

/// `ln ζ(k)`, computed without forming `ζ(k)` itself.
pub fn ln_zeta(k: u64) -> f64 {
    (6.0 / (PI * PI)).ln() - 2.0 * (k as f64 + 1.0).ln()
}

/// Lanczos approximation (g = 7, 9 terms) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEFFS: [f64; 9] = [
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

    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut series = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        series += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

/// `ln C(n, k)`.
pub fn log_binomial(n: u64, k: u64) -> Result<f64> {
    if k > n {
        return Err(Error::Domain(format!("binomial({n}, {k}) with k > n")));
    }
    let k = k.min(n - k);
    if k == 0 {
        return Ok(0.0);
    }
    if k <= DIRECT_SUM_LIMIT {
        let base = (n - k) as f64;
        let sum = (1..=k)
            .map(|i| ((base + i as f64) / i as f64).ln())
            .sum::<f64>();
        return Ok(sum);
    }
    let value = ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0);
    Ok(value.max(0.0))
}
