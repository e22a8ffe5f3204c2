//! Diagonal Gaussians, reparameterized sampling and KL terms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 4.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagonalGaussian {
    /// Builds a Gaussian, clamping `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::shape(format!(
                "mean has {} entries, log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        if mean.is_empty() {
            return Err(Error::shape("empty Gaussian"));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("Gaussian parameters"));
        }
        let log_std = log_std
            .into_iter()
            .map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(DiagonalGaussian { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((m, s), xi)| {
                let z = (xi - m) / s.exp();
                -0.5 * (z * z + LN_2PI) - s
            })
            .sum()
    }

    /// Closed-form `KL(self ‖ N(mean, I))` for a unit-variance target.
    pub fn kl_to_unit(&self, target_mean: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(target_mean)
            .map(|((m, s), t)| 0.5 * ((2.0 * s).exp() + (m - t) * (m - t) - 1.0 - 2.0 * s))
            .sum()
    }
}

/// Standard-normal draw used to reparameterize one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector(pub Vec<f64>);

impl NoiseVector {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Self {
        NoiseVector((0..len).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn zeros(len: usize) -> Self {
        NoiseVector(vec![0.0; len])
    }
}

/// `μ + σ ⊙ ε`.
pub fn reparameterize(g: &DiagonalGaussian, eps: &NoiseVector) -> Result<Vec<f64>> {
    if eps.0.len() != g.dim() {
        return Err(Error::shape(format!(
            "noise length {} for Gaussian of dim {}",
            eps.0.len(),
            g.dim()
        )));
    }
    Ok(g.mean
        .iter()
        .zip(&g.log_std)
        .zip(&eps.0)
        .map(|((m, s), e)| m + s.exp() * e)
        .collect())
}

/// Tape form of [`reparameterize`] over a batch; `eps` is a constant leaf.
pub fn reparameterize_var(tape: &mut Tape, mean: Var, log_std: Var, eps: Var) -> Var {
    let std = tape.exp(log_std);
    let scaled = tape.mul(std, eps);
    tape.add(mean, scaled)
}

/// `Σ_l (μ_l² + σ_l² − log σ_l² − 1)`.
///
/// This is twice the usual `KL(N(μ, σ²) ‖ N(0, I))`; the loss weight absorbs
/// the factor.
pub fn kl_standard_paper(g: &DiagonalGaussian) -> f64 {
    g.mean
        .iter()
        .zip(&g.log_std)
        .map(|(m, s)| m * m + (2.0 * s).exp() - 2.0 * s - 1.0)
        .sum()
}

/// Per-row tape form of [`kl_standard_paper`], `n×L → n×1`.
pub fn kl_standard_paper_rows(tape: &mut Tape, mean: Var, log_std: Var) -> Var {
    let m2 = tape.square(mean);
    let two_s = tape.scale(log_std, 2.0);
    let var = tape.exp(two_s);
    let a = tape.add(m2, var);
    let b = tape.sub(a, two_s);
    let c = tape.add_scalar(b, -1.0);
    tape.row_sum(c)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `(1/n) Σ [log q(z_i) − log p(z_i)]` over reparameterized draws from `q`.
pub fn mc_kl<F>(q: &DiagonalGaussian, log_density_p: F, n: usize, seed: u64) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64,
{
    if n == 0 {
        return Err(Error::invalid("mc_kl needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = q.std();
    let mut z = vec![0.0; q.dim()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut log_q = 0.0;
        for (l, zl) in z.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *zl = q.mean[l] + std[l] * e;
            log_q += -0.5 * (e * e + LN_2PI) - q.log_std[l];
        }
        let log_p = log_density_p(&z);
        let r = log_q - log_p;
        if !r.is_finite() {
            return Err(Error::non_finite("density ratio in mc_kl"));
        }
        sum += r;
        sum_sq += r * r;
    }
    let nf = n as f64;
    let value = sum / nf;
    let var = if n > 1 {
        ((sum_sq - nf * value * value) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        value,
        std_error: (var / nf).sqrt(),
    })
}

/// Log density of `N(0, I)`.
pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    x.iter().map(|v| -0.5 * (v * v + LN_2PI)).sum()
}
