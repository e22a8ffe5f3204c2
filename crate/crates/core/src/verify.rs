//! Self-checks of the closed forms, gradients and retrieval metrics.
//!
//! Each check reports its measured residual next to the tolerance it was
//! held to, so a report shows how close a pass was.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Member, Modality, Triplet, TripletBatch};
use crate::distributions::{kl_standard_paper, mc_kl, standard_normal_log_density, DiagonalGaussian};
use crate::error::Result;
use crate::eval::{cmc, mean_ap, DistanceMatrix};
use crate::model::{Posterior, ReconEntry, ReconKind, ReconstructionBundle};
use crate::numerics::{check_gradients_multi, Tape, Tensor, Var, DEFAULT_STEP};
use crate::objectives::{
    ambi_loss, cmtl_loss, cyc_loss, gmm_loss, id_loss, idc_loss, lmc_loss, rec_loss, LossTerm,
};
use crate::priors::{verify_decomposition, MoGPrior, PosteriorAssignment};

pub const KL_INSTANCES: usize = 20;
pub const KL_MAX_STD_ERRORS: f64 = 3.0;
pub const DECOMPOSITION_INSTANCES: usize = 10;
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-2;
pub const DECOMPOSITION_COMPONENTS: usize = 4;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const METRIC_INSTANCES: usize = 100;
pub const MC_SAMPLES: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn below(name: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            passed: residual < tolerance,
            residual,
            tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub mc_samples: usize,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub mc_samples: usize,
    /// Multiplies the closed-form divergences before comparison. Anything
    /// other than 1 should make the suite fail.
    pub kl_scale: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            mc_samples: MC_SAMPLES,
            kl_scale: 1.0,
        }
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Result<DiagonalGaussian> {
    let mean = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let log_std = (0..dim).map(|_| rng.gen_range(-1.0..0.5)).collect();
    DiagonalGaussian::new(mean, log_std)
}

/// Closed-form divergence against twice the Monte-Carlo estimate, in
/// standard errors of the latter; the worst instance is reported.
pub fn kl_check(seed: u64, options: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..KL_INSTANCES {
        let dim = rng.gen_range(1..=6);
        let q = random_gaussian(&mut rng, dim)?;
        let closed = options.kl_scale * kl_standard_paper(&q);
        let mc = mc_kl(&q, standard_normal_log_density, options.mc_samples, seed.wrapping_add(i as u64))?;
        worst = worst.max((closed - 2.0 * mc.value).abs() / (2.0 * mc.std_error));
    }
    Ok(CheckResult::below("kl_closed_form_vs_monte_carlo", worst, KL_MAX_STD_ERRORS))
}

/// Joint divergence against its decomposition, worst absolute residual.
pub fn decomposition_check(seed: u64, options: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0);
    let mut worst = 0.0f64;
    for i in 0..DECOMPOSITION_INSTANCES {
        let dim = rng.gen_range(2..=4);
        let q = random_gaussian(&mut rng, dim)?;
        let prior = MoGPrior::init(&mut rng, DECOMPOSITION_COMPONENTS, dim);
        let y = rng.gen_range(0..DECOMPOSITION_COMPONENTS);
        let assignment = PosteriorAssignment::one_hot(y, DECOMPOSITION_COMPONENTS);
        let check = verify_decomposition(&q, &assignment, &prior, options.mc_samples, seed.wrapping_add(100 + i as u64))?;
        let residual = (options.kl_scale * check.decomposed - check.joint.value).abs();
        worst = worst.max(residual);
    }
    Ok(CheckResult::below("kl_decomposition", worst, DECOMPOSITION_TOLERANCE))
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Three members (anchor, positive, negative) and their nine decodings.
fn swap_entries() -> Vec<ReconEntry> {
    let mut out = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let (kind, target) = if i == j {
                (ReconKind::SelfRecon, Some(i))
            } else if i < 2 && j < 2 {
                (ReconKind::DSwap, Some(i))
            } else {
                (ReconKind::NegativeSwap, None)
            };
            out.push(ReconEntry {
                d_source: j,
                a_source: i,
                target,
                kind,
            });
        }
    }
    out
}

/// A small decoder/encoder/classifier chain built from leaves so that
/// every reconstruction term depends on them smoothly.
struct SwapInstance {
    points: Vec<Tensor>,
    entries: Vec<ReconEntry>,
    labels: Vec<usize>,
}

const D: usize = 3;
const A: usize = 2;
const F: usize = 4;

impl SwapInstance {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        SwapInstance {
            points: vec![
                random(rng, 3, D, -1.0, 1.0),     // d codes
                random(rng, 3, A, -1.0, 1.0),     // a codes
                random(rng, 3, F, -1.0, 1.0),     // features
                random(rng, D + A, F, -0.8, 0.8), // decoder weight
                random(rng, 1, F, -0.2, 0.2),     // decoder bias
                random(rng, F, D, -0.8, 0.8),     // d re-encoder
                random(rng, F, A, -0.8, 0.8),     // a re-encoder
                random(rng, D, 3, -1.0, 1.0),     // classifier
            ],
            entries: swap_entries(),
            labels: vec![0, 0, 2],
        }
    }

    fn bundle(&self, tape: &mut Tape, v: &[Var]) -> ReconstructionBundle {
        let d_src: Vec<usize> = self.entries.iter().map(|e| e.d_source).collect();
        let a_src: Vec<usize> = self.entries.iter().map(|e| e.a_source).collect();
        let d = tape.select_rows(v[0], &d_src);
        let a = tape.select_rows(v[1], &a_src);
        let da = tape.concat_cols(d, a);
        let h = tape.affine(da, v[3], v[4]);
        let recon = tape.tanh(h);
        ReconstructionBundle {
            entries: self.entries.clone(),
            recon,
            d_codes: d,
            a_codes: a,
        }
    }

    fn recoded(&self, tape: &mut Tape, v: &[Var], b: &ReconstructionBundle) -> (Var, Var) {
        let zd = tape.leaf(Tensor::zeros(&[D]));
        let za = tape.leaf(Tensor::zeros(&[A]));
        let d = tape.affine(b.recon, v[5], zd);
        let a = tape.affine(b.recon, v[6], za);
        (d, a)
    }
}

fn gradient_check(term: LossTerm, rng: &mut ChaCha8Rng) -> Result<f64> {
    match term {
        LossTerm::Rec | LossTerm::Cyc | LossTerm::Idc => {
            let inst = SwapInstance::new(rng);
            check_gradients_multi(
                |t, v| {
                    let b = inst.bundle(t, v);
                    match term {
                        LossTerm::Rec => rec_loss(t, &b, v[2]),
                        LossTerm::Cyc => {
                            let (d, a) = inst.recoded(t, v, &b);
                            cyc_loss(t, &b, d, a)
                        }
                        _ => {
                            let (d, _) = inst.recoded(t, v, &b);
                            let zb = t.leaf(Tensor::zeros(&[3]));
                            let logits = t.affine(d, v[7], zb);
                            idc_loss(t, &b, logits, &inst.labels)
                        }
                    }
                },
                &inst.points,
                DEFAULT_STEP,
            )
        }
        LossTerm::Gmm | LossTerm::Lmc | LossTerm::Ambi => {
            let labels = [0, 2, 1, 2];
            let points = vec![
                random(rng, 4, 3, -1.0, 1.0),
                random(rng, 4, 3, -1.0, 1.0),
                random(rng, 3, 3, -1.0, 1.0),
                random(rng, 3, 1, 0.0, 1.0),
            ];
            check_gradients_multi(
                |t, v| {
                    let post = Posterior {
                        mean: v[0],
                        log_std: v[1],
                    };
                    match term {
                        LossTerm::Gmm => gmm_loss(t, v[0], v[1], &labels, v[2]),
                        LossTerm::Lmc => lmc_loss(t, v[0], post, &labels, v[2], v[3]),
                        _ => Ok(ambi_loss(t, post)),
                    }
                },
                &points,
                DEFAULT_STEP,
            )
        }
        LossTerm::Id => {
            let labels = [1, 0, 2, 1];
            let points = vec![random(rng, 4, 3, -2.0, 2.0), random(rng, 4, 3, -2.0, 2.0)];
            check_gradients_multi(|t, v| id_loss(t, v[0], Some(v[1]), &labels, 0.1), &points, DEFAULT_STEP)
        }
        LossTerm::Cmtl => {
            let mk = |identity, modality| Member {
                sample: 0,
                identity,
                modality,
            };
            let batch = TripletBatch {
                members: vec![
                    mk(0, Modality::Visible),
                    mk(0, Modality::Infrared),
                    mk(1, Modality::Visible),
                    mk(1, Modality::Infrared),
                ],
            };
            let trips = [
                Triplet { anchor: 0, positive: 1, negative: 3 },
                Triplet { anchor: 1, positive: 0, negative: 2 },
                Triplet { anchor: 2, positive: 3, negative: 1 },
                Triplet { anchor: 3, positive: 2, negative: 0 },
            ];
            // A large margin keeps every hinge active, away from its kink.
            let points = vec![random(rng, 4, 3, -1.0, 1.0), random(rng, 4, 3, -1.0, 1.0)];
            check_gradients_multi(
                |t, v| cmtl_loss(t, &batch, &trips, v[0], Some(v[1]), 5.0, 0.1),
                &points,
                DEFAULT_STEP,
            )
        }
    }
}

/// Finite-difference agreement for every loss term.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9bad);
    LossTerm::ALL
        .iter()
        .map(|&term| {
            let err = gradient_check(term, &mut rng)?;
            Ok(CheckResult::below(format!("gradient_{}", term.name()), err, GRADIENT_TOLERANCE))
        })
        .collect()
}

/// Counts ranks directly instead of sorting; ties go to the lower index.
fn brute_force_metrics(values: &[f64], ng: usize, ql: &[usize], gl: &[usize], k: usize) -> (f64, f64) {
    let nq = ql.len();
    let (mut hits, mut ap_sum) = (0.0, 0.0);
    for q in 0..nq {
        let row = &values[q * ng..(q + 1) * ng];
        let rank = |g: usize| (0..ng).filter(|&h| row[h] < row[g] || (row[h] == row[g] && h < g)).count() + 1;
        let mut relevant: Vec<usize> = (0..ng).filter(|&g| gl[g] == ql[q]).map(rank).collect();
        relevant.sort_unstable();
        if relevant[0] <= k {
            hits += 1.0;
        }
        let mut ap = 0.0;
        for (i, &r) in relevant.iter().enumerate() {
            ap += (i + 1) as f64 / r as f64;
        }
        ap_sum += ap / relevant.len() as f64;
    }
    (hits / nq as f64, ap_sum / nq as f64)
}

/// CMC and mAP against the brute-force oracle; the residual is the
/// largest absolute disagreement and must be exactly zero.
pub fn metric_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e7);
    let mut worst = 0.0f64;
    for _ in 0..METRIC_INSTANCES {
        let nq = rng.gen_range(1..=8);
        let ng = rng.gen_range(1..=8);
        let n_ids = rng.gen_range(1..=4);
        let gl: Vec<usize> = (0..ng).map(|_| rng.gen_range(0..n_ids)).collect();
        let ql: Vec<usize> = (0..nq).map(|_| gl[rng.gen_range(0..ng)]).collect();
        let values: Vec<f64> = (0..nq * ng).map(|_| rng.gen_range(0..6) as f64 * 0.2).collect();
        let d = DistanceMatrix::new(nq, ng, values.clone())?;
        let map = mean_ap(&d, &ql, &gl)?;
        for k in 1..=ng {
            let (o_cmc, o_map) = brute_force_metrics(&values, ng, &ql, &gl, k);
            worst = worst.max((cmc(&d, &ql, &gl, k)? - o_cmc).abs());
            worst = worst.max((map - o_map).abs());
        }
    }
    Ok(CheckResult {
        name: "retrieval_metrics_vs_oracle".into(),
        passed: worst == 0.0,
        residual: worst,
        tolerance: 0.0,
    })
}

/// Average precision on the hand-worked relevance patterns (1, 0, 1) and
/// (0, 1).
pub fn worked_metric_check() -> Result<CheckResult> {
    let d = DistanceMatrix::new(1, 3, vec![0.1, 0.2, 0.3])?;
    let a = (mean_ap(&d, &[7], &[7, 1, 7])? - 5.0 / 6.0).abs();
    let d = DistanceMatrix::new(1, 2, vec![0.1, 0.2])?;
    let b = (mean_ap(&d, &[1], &[0, 1])? - 0.5).abs();
    Ok(CheckResult::below("retrieval_metrics_worked_values", a.max(b), 1e-15))
}

/// Runs every check.
pub fn run(seed: u64, options: &VerifyOptions) -> Result<VerifyReport> {
    run_parallel(seed, options, 1)
}

type Job<'a> = Box<dyn Fn() -> Result<Vec<CheckResult>> + Send + Sync + 'a>;

/// Runs every check, spreading independent checks over up to `threads`
/// workers. The report order does not depend on the thread count.
pub fn run_parallel(seed: u64, options: &VerifyOptions, threads: usize) -> Result<VerifyReport> {
    let jobs: Vec<Job> = vec![
        Box::new(move || Ok(vec![kl_check(seed, options)?])),
        Box::new(move || Ok(vec![decomposition_check(seed, options)?])),
        Box::new(move || gradient_checks(seed)),
        Box::new(move || Ok(vec![metric_check(seed)?, worked_metric_check()?])),
    ];
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<CheckResult>>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                *slots[i].lock().expect("verify worker panicked") = Some(job());
            });
        }
    });
    let mut checks = Vec::new();
    for slot in slots {
        checks.extend(slot.into_inner().expect("verify worker panicked").expect("every job ran")?);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        seed,
        mc_samples: options.mc_samples,
        checks,
        passed,
    })
}
