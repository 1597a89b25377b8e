//! Sinh-arcsinh-normal (SHASH) distribution.
//!
//! With `z = (y - mu) / sigma` and `u = tau * asinh(z) - gamma`, the variate
//! `S = sinh(u)` is standard normal. Positive `gamma` shifts mass to the
//! right (every quantile increases with `gamma`); `tau < 1` gives heavier
//! tails than the normal, `tau > 1` lighter ones. `gamma = 0, tau = 1`
//! reduces to `Normal(mu, sigma)`.

use std::f64::consts::{LN_2, PI, SQRT_2};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShashParams {
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl ShashParams {
    pub fn new(mu: f64, sigma: f64, gamma: f64, tau: f64) -> Result<Self> {
        let p = ShashParams { mu, sigma, gamma, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn normal(mu: f64, sigma: f64) -> Result<Self> {
        Self::new(mu, sigma, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu, self.sigma, self.gamma, self.tau].iter().all(|v| v.is_finite());
        if !finite || self.sigma <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Domain(format!(
                "invalid SHASH parameters (mu={}, sigma={}, gamma={}, tau={}): need finite values with sigma > 0 and tau > 0",
                self.mu, self.sigma, self.gamma, self.tau
            )));
        }
        Ok(())
    }

    #[inline]
    fn arg(&self, y: f64) -> (f64, f64) {
        let z = (y - self.mu) / self.sigma;
        (z, self.tau * z.asinh() - self.gamma)
    }

    /// Log-density, evaluated without forming the density first.
    pub fn log_pdf(&self, y: f64) -> f64 {
        let (z, u) = self.arg(y);
        let s = u.sinh();
        self.tau.ln() - self.sigma.ln() - LN_SQRT_2PI + ln_cosh(u) - z.hypot(1.0).ln() - 0.5 * s * s
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.log_pdf(y).exp()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let (_, u) = self.arg(y);
        std_normal_cdf(u.sinh())
    }

    /// Upper-tail probability `P(Y > y)`, accurate where `cdf` rounds to 1.
    pub fn sf(&self, y: f64) -> f64 {
        let (_, u) = self.arg(y);
        std_normal_cdf(-u.sinh())
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} must lie in (0, 1)")));
        }
        Ok(self.from_standard_normal(std_normal_quantile(p)))
    }

    pub fn median(&self) -> f64 {
        self.mu + self.sigma * (self.gamma / self.tau).sinh()
    }

    /// Maps a standard-normal draw onto this distribution.
    #[inline]
    pub fn from_standard_normal(&self, z: f64) -> f64 {
        self.mu + self.sigma * ((z.asinh() + self.gamma) / self.tau).sinh()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.from_standard_normal(z)
    }

    /// Gradient of `log_pdf(y)` with respect to `(mu, sigma, gamma, tau)`.
    ///
    /// Only meaningful where the density is representable; callers that
    /// weight by the density should skip pixels where it underflows.
    pub fn grad_log_pdf(&self, y: f64) -> [f64; 4] {
        let (z, u) = self.arg(y);
        let s = u.sinh();
        let c = u.cosh();
        // d logpdf / du
        let dl_du = u.tanh() - s * c;
        let one_z2 = z.mul_add(z, 1.0);
        let dl_dz = dl_du * self.tau / one_z2.sqrt() - z / one_z2;
        [-dl_dz / self.sigma, -(1.0 + z * dl_dz) / self.sigma, -dl_du, 1.0 / self.tau + dl_du * z.asinh()]
    }
}

/// `ln(cosh(u))` without overflow for large `|u|`.
#[inline]
pub(crate) fn ln_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse standard normal CDF (Wichura, AS 241 / PPND16), accurate to
/// about 1e-16 relative over the open unit interval.
pub fn std_normal_quantile(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[inline]
fn poly(coef: &[f64; 8], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc.mul_add(x, c))
}

const A: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_7e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];
