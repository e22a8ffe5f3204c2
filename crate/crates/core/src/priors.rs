//! Mixture-of-Gaussians prior over identity-discriminable codes.
//!
//! Component `y` is `N(μ_y, I)` with uniform class weights. The prior
//! contributes two training terms: [`gmm_term`] aligns a posterior with its
//! labeled component, and [`almc_loss`] is the adaptive large-margin softmax
//! that disperses components. [`entropy_regularizer`] and
//! [`verify_decomposition`] exist for verification only.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::distributions::{mc_kl, DiagonalGaussian, McEstimate};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const MEAN_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MoGPrior {
    means: Tensor,
    margins: Vec<f64>,
}

impl MoGPrior {
    /// `means` is `N_y × D`; margins are projected onto `[0, ∞)`.
    pub fn new(means: Tensor, margins: Vec<f64>) -> Result<Self> {
        if means.shape().len() != 2 {
            return Err(Error::shape("prior means must be a matrix"));
        }
        if margins.len() != means.rows() {
            return Err(Error::shape(format!(
                "{} margins for {} components",
                margins.len(),
                means.rows()
            )));
        }
        if !means.all_finite() || margins.iter().any(|a| !a.is_finite()) {
            return Err(Error::non_finite("prior parameters"));
        }
        let margins = margins.into_iter().map(|a| a.max(0.0)).collect();
        Ok(MoGPrior { means, margins })
    }

    /// Means from `N(0, 0.1² I)`, zero margins.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, n_identities: usize, dim: usize) -> Self {
        let data = (0..n_identities * dim)
            .map(|_| MEAN_INIT_STD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        MoGPrior {
            means: Tensor::matrix(n_identities, dim, data).expect("prior shape"),
            margins: vec![0.0; n_identities],
        }
    }

    pub fn n_identities(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn mean_of(&self, y: usize) -> &[f64] {
        self.means.row(y)
    }

    pub fn margins(&self) -> &[f64] {
        &self.margins
    }

    pub fn log_class_prior(&self) -> f64 {
        -(self.n_identities() as f64).ln()
    }

    pub fn component(&self, y: usize) -> DiagonalGaussian {
        DiagonalGaussian::new(self.mean_of(y).to_vec(), vec![0.0; self.dim()])
            .expect("finite prior component")
    }

    fn check_identity(&self, y: usize) -> Result<()> {
        if y >= self.n_identities() {
            return Err(Error::invalid(format!(
                "identity {y} out of range for {} components",
                self.n_identities()
            )));
        }
        Ok(())
    }
}

/// `q(y|d)`: a distribution over identities.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorAssignment(Vec<f64>);

impl PosteriorAssignment {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::invalid("empty assignment"));
        }
        if probabilities.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("assignment probabilities must be nonnegative"));
        }
        let s: f64 = probabilities.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("assignment sums to {s}")));
        }
        Ok(PosteriorAssignment(probabilities))
    }

    pub fn one_hot(y: usize, n: usize) -> Self {
        let mut p = vec![0.0; n];
        p[y] = 1.0;
        PosteriorAssignment(p)
    }

    pub fn uniform(n: usize) -> Self {
        PosteriorAssignment(vec![1.0 / n as f64; n])
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }
}

/// Per-row `Σ_i log σ_i + ½‖d − μ_y‖²`, `n×1`. `selected_means` holds `μ_y`
/// for each row.
pub fn gmm_rows(tape: &mut Tape, d: Var, log_std: Var, selected_means: Var) -> Var {
    let log_det = tape.row_sum(log_std);
    let diff = tape.sub(d, selected_means);
    let sq = tape.row_sq_norm(diff);
    let half = tape.scale(sq, 0.5);
    tape.add(log_det, half)
}

/// Per-row squared Mahalanobis distance to the posterior mean minus the
/// labeled margin, `n×1`. Covariance is `diag(σ²)`.
pub fn mahalanobis_rows(tape: &mut Tape, d: Var, mean: Var, log_std: Var, selected_margins: Var) -> Var {
    let diff = tape.sub(d, mean);
    let sq = tape.square(diff);
    let neg2 = tape.scale(log_std, -2.0);
    let inv_var = tape.exp(neg2);
    let w = tape.mul(sq, inv_var);
    let q = tape.row_sum(w);
    tape.sub(q, selected_margins)
}

/// Per-row adaptive large-margin loss, `n×1`.
///
/// The labeled class logit is `−D_M`; every competitor `c ≠ y` uses
/// `−‖d − μ_c‖²` (competitor margins are not subtracted).
pub fn almc_rows(
    tape: &mut Tape,
    d: Var,
    posterior_mean: Var,
    posterior_log_std: Var,
    labels: &[usize],
    means: Var,
    margins: Var,
) -> Result<Var> {
    let n_classes = tape.value(means).rows();
    if n_classes < 2 {
        return Err(Error::invalid("adaptive margin loss needs at least two identities"));
    }
    if labels.iter().any(|&y| y >= n_classes) {
        return Err(Error::invalid("identity out of range"));
    }
    let n = labels.len();
    let mut one_hot = vec![0.0; n * n_classes];
    let mut others = vec![1.0; n * n_classes];
    for (i, &y) in labels.iter().enumerate() {
        one_hot[i * n_classes + y] = 1.0;
        others[i * n_classes + y] = 0.0;
    }
    let one_hot = tape.leaf(Tensor::matrix(n, n_classes, one_hot)?);
    let others = tape.leaf(Tensor::matrix(n, n_classes, others)?);

    let sel_margin = tape.select_rows(margins, labels);
    let dm = mahalanobis_rows(tape, d, posterior_mean, posterior_log_std, sel_margin);
    let dist = tape.pairwise_sq_dist(d, means);
    let comp = tape.mul(dist, others);
    let own = tape.scale_rows(one_hot, dm);
    let pos = tape.add(comp, own);
    let logits = tape.neg(pos);
    Ok(tape.softmax_cross_entropy(logits, labels))
}

fn row(tape: &mut Tape, v: &[f64]) -> Var {
    tape.leaf(Tensor::vector(v.to_vec()))
}

/// `ln det(diag σ_φ) + ½‖d − μ_y‖²` for one code.
pub fn gmm_term(d: &[f64], sigma_phi: &[f64], y: usize, prior: &MoGPrior) -> Result<f64> {
    prior.check_identity(y)?;
    if d.len() != prior.dim() || sigma_phi.len() != prior.dim() {
        return Err(Error::shape("code, std and prior dimensions differ"));
    }
    if sigma_phi.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("std must be positive"));
    }
    let mut t = Tape::new();
    let dv = row(&mut t, d);
    let ls: Vec<f64> = sigma_phi.iter().map(|s| s.ln()).collect();
    let lv = row(&mut t, &ls);
    let mv = row(&mut t, prior.mean_of(y));
    let out = gmm_rows(&mut t, dv, lv, mv);
    Ok(t.value(out).item())
}

/// `(d − μ_φ)ᵀ diag(σ_φ²)⁻¹ (d − μ_φ) − α_y`.
pub fn mahalanobis_margin(d: &[f64], posterior: &DiagonalGaussian, alpha_y: f64) -> Result<f64> {
    if d.len() != posterior.dim() {
        return Err(Error::shape("code and posterior dimensions differ"));
    }
    if !(alpha_y >= 0.0) {
        return Err(Error::invalid("margin must be nonnegative"));
    }
    let mut t = Tape::new();
    let dv = row(&mut t, d);
    let mv = row(&mut t, posterior.mean());
    let lv = row(&mut t, posterior.log_std());
    let av = t.leaf(Tensor::scalar(alpha_y));
    let out = mahalanobis_rows(&mut t, dv, mv, lv, av);
    Ok(t.value(out).item())
}

/// Adaptive large-margin loss for one code.
pub fn almc_loss(d: &[f64], y: usize, posterior: &DiagonalGaussian, prior: &MoGPrior) -> Result<f64> {
    prior.check_identity(y)?;
    if d.len() != prior.dim() || posterior.dim() != prior.dim() {
        return Err(Error::shape("code, posterior and prior dimensions differ"));
    }
    let mut t = Tape::new();
    let dv = t.leaf(Tensor::matrix(1, d.len(), d.to_vec())?);
    let mv = t.leaf(Tensor::matrix(1, d.len(), posterior.mean().to_vec())?);
    let lv = t.leaf(Tensor::matrix(1, d.len(), posterior.log_std().to_vec())?);
    let means = t.leaf(prior.means().clone());
    let margins = t.leaf(Tensor::matrix(prior.n_identities(), 1, prior.margins().to_vec())?);
    let out = almc_rows(&mut t, dv, mv, lv, &[y], means, margins)?;
    Ok(t.value(out).item())
}

/// `KL(q(y|d) ‖ Cat(1/N))`; `0·log 0 = 0`.
pub fn entropy_regularizer(assignment: &PosteriorAssignment) -> f64 {
    let n = assignment.0.len() as f64;
    assignment
        .0
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * n).ln())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompositionCheck {
    /// Monte-Carlo `KL(q_φ(d) q(y) ‖ p(d, y))`.
    pub joint: McEstimate,
    /// `Σ_y q(y) KL(q_φ ‖ N(μ_y, I)) + KL(q(y) ‖ π)`, closed form.
    pub decomposed: f64,
    pub residual: f64,
}

/// Compares the joint KL against its two-term decomposition.
pub fn verify_decomposition(
    posterior: &DiagonalGaussian,
    assignment: &PosteriorAssignment,
    prior: &MoGPrior,
    n: usize,
    seed: u64,
) -> Result<DecompositionCheck> {
    let probs = assignment.probabilities();
    if probs.len() != prior.n_identities() {
        return Err(Error::shape("assignment length differs from prior size"));
    }
    if posterior.dim() != prior.dim() {
        return Err(Error::shape("posterior and prior dimensions differ"));
    }
    let log_pi = prior.log_class_prior();
    let comps: Vec<DiagonalGaussian> = (0..prior.n_identities()).map(|y| prior.component(y)).collect();
    let support: Vec<usize> = (0..probs.len()).filter(|&y| probs[y] > 0.0).collect();

    // log q(d) − [Σ_y q(y)(log p(d|y) + log π_y − log q(y))]; mc_kl subtracts
    // the bracket from log q(d).
    let joint = mc_kl(
        posterior,
        |z| {
            support
                .iter()
                .map(|&y| probs[y] * (comps[y].log_density(z) + log_pi - probs[y].ln()))
                .sum()
        },
        n,
        seed,
    )?;

    let decomposed = support
        .iter()
        .map(|&y| probs[y] * posterior.kl_to_unit(prior.mean_of(y)))
        .sum::<f64>()
        + entropy_regularizer(assignment);

    Ok(DecompositionCheck {
        joint,
        decomposed,
        residual: (joint.value - decomposed).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients_multi, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn prior(rows: &[Vec<f64>], margins: &[f64]) -> MoGPrior {
        MoGPrior::new(Tensor::from_rows(rows).unwrap(), margins.to_vec()).unwrap()
    }

    #[test]
    fn gmm_term_examples() {
        let p = prior(&[vec![0.5, -0.5], vec![1.0, 1.0]], &[0.0, 0.0]);
        assert_eq!(gmm_term(&[0.5, -0.5], &[1.0, 1.0], 0, &p).unwrap(), 0.0);
        // ‖d − μ‖² = 2 → ½·2 = 1
        let v = gmm_term(&[2.0, 2.0], &[1.0, 1.0], 1, &p).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let v = gmm_term(&[0.5, -0.5], &[2.0, 2.0], 0, &p).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!(gmm_term(&[0.0, 0.0], &[1.0, 1.0], 2, &p).is_err());
    }

    #[test]
    fn gmm_gradient_vanishes_at_component_mean() {
        let means = Tensor::vector(vec![0.3, -0.8]);
        let mut t = Tape::new();
        let d = t.leaf(means.clone());
        let ls = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let mu = t.param(0, means);
        let out = gmm_rows(&mut t, d, ls, mu);
        let out = t.sum(out);
        assert_eq!(t.value(out).item(), 0.0);
        let g = t.backward(out).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn mahalanobis_examples() {
        let q = DiagonalGaussian::new(vec![0.2, -0.1], vec![0.0, 0.0]).unwrap();
        assert_eq!(mahalanobis_margin(&[0.2, -0.1], &q, 0.0).unwrap(), 0.0);
        let v = mahalanobis_margin(&[1.2, 0.9], &q, 0.5).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        let q2 = DiagonalGaussian::new(vec![0.2, -0.1], vec![2f64.ln(), 2f64.ln()]).unwrap();
        let v2 = mahalanobis_margin(&[1.2, 0.9], &q2, 0.0).unwrap();
        assert!((v2 - 2.0 / 4.0).abs() < 1e-12);
        assert!(mahalanobis_margin(&[1.0, 1.0], &q, -0.1).is_err());
    }

    #[test]
    fn almc_examples() {
        let q = DiagonalGaussian::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        // D_M = 0, competitor at squared distance 100.
        let p = prior(&[vec![0.0, 0.0], vec![10.0, 0.0]], &[0.0, 0.0]);
        let v = almc_loss(&[0.0, 0.0], 0, &q, &p).unwrap();
        assert!((0.0..=1e-40).contains(&v), "{v}");
        // D_M = 0, competitor at distance 0 → ln 2.
        let p = prior(&[vec![5.0, 5.0], vec![0.0, 0.0]], &[0.0, 0.0]);
        let v = almc_loss(&[0.0, 0.0], 0, &q, &p).unwrap();
        assert!((v - LN_2).abs() < 1e-12);
        // D_M = 1 and competitor distance 1 → ln 2.
        let p = prior(&[vec![5.0, 5.0], vec![0.0, 0.0]], &[0.0, 0.0]);
        let v = almc_loss(&[0.0, 1.0], 0, &q, &p).unwrap();
        assert!((v - LN_2).abs() < 1e-12);
        let single = prior(&[vec![0.0, 0.0]], &[0.0]);
        assert!(almc_loss(&[0.0, 0.0], 0, &q, &single).is_err());
    }

    fn random_instance(seed: u64, n_classes: usize, dim: usize) -> (Vec<f64>, DiagonalGaussian, MoGPrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let d: Vec<f64> = (0..dim).map(|_| u(-2.0, 2.0)).collect();
        let q = DiagonalGaussian::new(
            (0..dim).map(|_| u(-2.0, 2.0)).collect(),
            (0..dim).map(|_| u(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let means = (0..n_classes * dim).map(|_| u(-2.0, 2.0)).collect();
        let margins = (0..n_classes).map(|_| u(0.0, 1.0)).collect();
        let p = MoGPrior::new(Tensor::matrix(n_classes, dim, means).unwrap(), margins).unwrap();
        (d, q, p)
    }

    #[test]
    fn almc_is_nonnegative_and_monotone_in_competitor_distance() {
        for seed in 0..50 {
            let (d, q, p) = random_instance(seed, 4, 3);
            let base = almc_loss(&d, 1, &q, &p).unwrap();
            assert!(base >= 0.0);
            // Push every competitor further from d along its own direction.
            let mut rows = Vec::new();
            for c in 0..4 {
                let m = p.mean_of(c);
                rows.push(if c == 1 {
                    m.to_vec()
                } else {
                    m.iter().zip(&d).map(|(mi, di)| di + 1.5 * (mi - di)).collect()
                });
            }
            let far = MoGPrior::new(Tensor::from_rows(&rows).unwrap(), p.margins().to_vec()).unwrap();
            assert!(almc_loss(&d, 1, &q, &far).unwrap() < base);
        }
    }

    #[test]
    fn margin_moves_loss_through_mahalanobis_term() {
        // ∂L/∂D_M > 0 and ∂D_M/∂α = −1, so L falls as α grows.
        for seed in 0..20 {
            let (d, q, p) = random_instance(100 + seed, 3, 2);
            let loss_at = |alpha: f64| {
                let mut m = p.margins().to_vec();
                m[0] = alpha;
                let pp = MoGPrior::new(p.means().clone(), m).unwrap();
                almc_loss(&d, 0, &q, &pp).unwrap()
            };
            let dm_at = |alpha: f64| mahalanobis_margin(&d, &q, alpha).unwrap();
            assert!(dm_at(0.5) < dm_at(0.2));
            assert!(loss_at(0.5) < loss_at(0.2));
        }
    }

    #[test]
    fn almc_rows_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
        let pts = vec![
            Tensor::matrix(3, 4, r(12, -2.0, 2.0)).unwrap(),
            Tensor::matrix(3, 4, r(12, -2.0, 2.0)).unwrap(),
            Tensor::matrix(3, 4, r(12, -1.0, 1.0)).unwrap(),
            Tensor::matrix(5, 4, r(20, -2.0, 2.0)).unwrap(),
            Tensor::matrix(5, 1, r(5, 0.0, 1.0)).unwrap(),
        ];
        let labels = [4, 0, 2];
        let err = check_gradients_multi(
            |t, v| {
                let l = almc_rows(t, v[0], v[1], v[2], &labels, v[3], v[4])?;
                Ok(t.mean(l))
            },
            &pts,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn entropy_regularizer_examples() {
        assert!(entropy_regularizer(&PosteriorAssignment::uniform(5)).abs() < 1e-15);
        let v = entropy_regularizer(&PosteriorAssignment::one_hot(2, 4));
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let a = PosteriorAssignment::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let h: f64 = -a.probabilities().iter().map(|p| p * p.ln()).sum::<f64>();
        let v = entropy_regularizer(&a);
        assert!((v - (4f64.ln() - h)).abs() < 1e-15);
        assert!(v >= 0.0 && v <= 4f64.ln());
        assert!(PosteriorAssignment::new(vec![0.5, 0.6]).is_err());
        assert!(PosteriorAssignment::new(vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn decomposition_at_labeled_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MoGPrior::init(&mut rng, 4, 3);
        let q = p.component(2);
        let check = verify_decomposition(&q, &PosteriorAssignment::one_hot(2, 4), &p, 200_000, 1).unwrap();
        assert!((check.decomposed - 4f64.ln()).abs() < 1e-12);
        assert!(check.residual < 3.0 * check.joint.std_error + 1e-12);
    }

    #[test]
    fn decomposition_with_single_component() {
        let p = prior(&[vec![0.4, -0.3]], &[0.0]);
        let q = DiagonalGaussian::new(vec![0.1, 0.2], vec![0.3, -0.2]).unwrap();
        let check = verify_decomposition(&q, &PosteriorAssignment::one_hot(0, 1), &p, 200_000, 2).unwrap();
        assert!((check.decomposed - q.kl_to_unit(&[0.4, -0.3])).abs() < 1e-15);
        assert!(check.residual < 3.0 * check.joint.std_error, "{check:?}");
    }

    #[test]
    fn prior_projects_margins() {
        let p = prior(&[vec![0.0], vec![1.0]], &[-0.3, 0.2]);
        assert_eq!(p.margins(), &[0.0, 0.2]);
    }
}
