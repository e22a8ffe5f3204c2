//! Loss terms and their stage-dependent weighted total.
//!
//! Every term is built on a [`Tape`] so the trainer can differentiate the
//! weighted sum. L1 distances are averaged over elements, so weights do not
//! depend on code or feature widths.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Modality, Triplet, TripletBatch};
use crate::distributions::kl_standard_paper_rows;
use crate::error::{Error, Result};
use crate::model::{Posterior, ReconstructionBundle};
use crate::numerics::{Tape, Tensor, Var};
use crate::priors::{almc_rows, gmm_rows};

/// Norms below this are treated as zero when normalizing embeddings.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn index(self) -> usize {
        self.number() as usize - 1
    }
}

impl TryFrom<u32> for Stage {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::invalid(format!("unknown stage {n}"))),
        }
    }
}

impl From<Stage> for u32 {
    fn from(s: Stage) -> u32 {
        s.number()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Id,
    Cmtl,
    Gmm,
    Lmc,
    Rec,
    Cyc,
    Idc,
    Ambi,
}

impl LossTerm {
    pub const ALL: [LossTerm; 8] = [
        LossTerm::Id,
        LossTerm::Cmtl,
        LossTerm::Gmm,
        LossTerm::Lmc,
        LossTerm::Rec,
        LossTerm::Cyc,
        LossTerm::Idc,
        LossTerm::Ambi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Id => "id",
            LossTerm::Cmtl => "cmtl",
            LossTerm::Gmm => "gmm",
            LossTerm::Lmc => "lmc",
            LossTerm::Rec => "rec",
            LossTerm::Cyc => "cyc",
            LossTerm::Idc => "idc",
            LossTerm::Ambi => "ambi",
        }
    }
}

/// Terms that can be switched off individually.
pub const ABLATABLE: [LossTerm; 6] = [
    LossTerm::Gmm,
    LossTerm::Lmc,
    LossTerm::Rec,
    LossTerm::Idc,
    LossTerm::Cyc,
    LossTerm::Ambi,
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub gmm: f64,
    pub lmc: f64,
    pub disc: f64,
    pub ambi_stage2: f64,
    pub ambi_stage3: f64,
    pub idc: f64,
    pub cyc: f64,
    pub rec: f64,
    pub tsr: f64,
    pub id: f64,
    pub cmtl: f64,
    /// Weight of the sampled-code auxiliary terms inside the id and
    /// triplet losses.
    pub aux: f64,
    /// Triplet margin.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gmm: 1.0,
            lmc: 0.1,
            disc: 0.2,
            ambi_stage2: 0.001,
            ambi_stage3: 0.01,
            idc: 0.5,
            cyc: 0.5,
            rec: 0.5,
            tsr: 1.0,
            id: 1.0,
            cmtl: 1.0,
            aux: 0.1,
            margin: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gmm", self.gmm),
            ("lmc", self.lmc),
            ("disc", self.disc),
            ("ambi_stage2", self.ambi_stage2),
            ("ambi_stage3", self.ambi_stage3),
            ("idc", self.idc),
            ("cyc", self.cyc),
            ("rec", self.rec),
            ("tsr", self.tsr),
            ("id", self.id),
            ("cmtl", self.cmtl),
            ("aux", self.aux),
            ("margin", self.margin),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("weight {name} must be a nonnegative finite number")));
            }
        }
        Ok(())
    }

    /// Coefficient of `term` in the stage's objective.
    pub fn effective(&self, term: LossTerm, stage: Stage) -> f64 {
        use LossTerm::*;
        let task = matches!(stage, Stage::One | Stage::Three);
        let tsr = matches!(stage, Stage::Two | Stage::Three);
        match term {
            Id if task => self.id,
            Cmtl if task => self.cmtl,
            Gmm if task => self.disc * self.gmm,
            Lmc if task => self.disc * self.lmc,
            Rec if tsr => self.tsr * self.rec,
            Cyc if tsr => self.tsr * self.cyc,
            Idc if tsr => self.tsr * self.idc,
            Ambi if stage == Stage::Two => self.ambi_stage2,
            Ambi if stage == Stage::Three => self.ambi_stage3,
            _ => 0.0,
        }
    }

    /// Weights with `terms` switched off. Switching off all six optional
    /// terms yields the plain baseline, which also drops the sampled-code
    /// auxiliary terms.
    pub fn with_ablations(&self, terms: &[LossTerm]) -> Result<LossWeights> {
        let mut w = *self;
        for &t in terms {
            w.ablate(t)?;
        }
        if ABLATABLE.iter().all(|t| terms.contains(t)) {
            w.aux = 0.0;
        }
        Ok(w)
    }

    /// Zeroes the weight of one ablatable term.
    pub fn ablate(&mut self, term: LossTerm) -> Result<()> {
        match term {
            LossTerm::Gmm => self.gmm = 0.0,
            LossTerm::Lmc => self.lmc = 0.0,
            LossTerm::Rec => self.rec = 0.0,
            LossTerm::Idc => self.idc = 0.0,
            LossTerm::Cyc => self.cyc = 0.0,
            LossTerm::Ambi => {
                self.ambi_stage2 = 0.0;
                self.ambi_stage3 = 0.0;
            }
            LossTerm::Id | LossTerm::Cmtl => {
                return Err(Error::Config(format!("{} cannot be ablated", term.name())))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub term: LossTerm,
    /// `None` when the term was not evaluated because its weight is zero.
    pub value: Option<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub terms: Vec<TermValue>,
    pub total: f64,
}

impl LossReport {
    pub fn value(&self, term: LossTerm) -> Option<f64> {
        self.terms.iter().find(|t| t.term == term).and_then(|t| t.value)
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        self.terms
            .iter()
            .find(|t| t.term == term)
            .map_or(0.0, |t| t.weight)
    }
}

/// Weighted total for `stage` from evaluated term values.
///
/// Every term with a nonzero stage weight must be present.
pub fn total_loss(stage: Stage, values: &[(LossTerm, f64)], weights: &LossWeights) -> Result<LossReport> {
    let mut terms = Vec::with_capacity(LossTerm::ALL.len());
    let mut total = 0.0;
    for term in LossTerm::ALL {
        let weight = weights.effective(term, stage);
        let value = values.iter().find(|(t, _)| *t == term).map(|&(_, v)| v);
        match value {
            Some(v) if !v.is_finite() => {
                return Err(Error::non_finite(format!("{} loss", term.name())));
            }
            Some(v) => total += weight * v,
            None if weight != 0.0 => {
                return Err(Error::invalid(format!(
                    "{} has weight {weight} in stage {stage} but was not evaluated",
                    term.name()
                )));
            }
            None => {}
        }
        terms.push(TermValue { term, value, weight });
    }
    Ok(LossReport { stage, terms, total })
}

/// Self- and d-swap reconstruction error against the original features:
/// mean absolute error over elements, then over targeted pairings.
pub fn rec_loss(tape: &mut Tape, bundle: &ReconstructionBundle, features: Var) -> Result<Var> {
    let targeted = bundle.targeted();
    if targeted.is_empty() {
        return Err(Error::invalid("reconstruction bundle has no targets"));
    }
    let rows: Vec<usize> = targeted.iter().map(|&(r, _)| r).collect();
    let members: Vec<usize> = targeted.iter().map(|&(_, t)| t).collect();
    let recon = tape.select_rows(bundle.recon, &rows);
    let target = tape.select_rows(features, &members);
    Ok(mean_abs_diff(tape, recon, target))
}

fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Var {
    let diff = tape.sub(a, b);
    let abs = tape.abs(diff);
    tape.mean(abs)
}

/// `mean|E^A(recon) − a_source| + mean|E^D(recon) − d_source|` over every
/// bundle entry. `d_recoded` and `a_recoded` are the re-encoded means.
pub fn cyc_loss(tape: &mut Tape, bundle: &ReconstructionBundle, d_recoded: Var, a_recoded: Var) -> Result<Var> {
    for (v, codes, what) in [(d_recoded, bundle.d_codes, "IDI"), (a_recoded, bundle.a_codes, "IAI")] {
        if tape.value(v).shape() != tape.value(codes).shape() {
            return Err(Error::shape(format!(
                "re-encoded {what} codes {:?} do not match the swap enumeration {:?}",
                tape.value(v).shape(),
                tape.value(codes).shape()
            )));
        }
    }
    let a_term = mean_abs_diff(tape, a_recoded, bundle.a_codes);
    let d_term = mean_abs_diff(tape, d_recoded, bundle.d_codes);
    Ok(tape.add(a_term, d_term))
}

/// Mean cross-entropy of the classifier on re-encoded reconstructions,
/// labeled by the identity of each entry's d-code source.
pub fn idc_loss(tape: &mut Tape, bundle: &ReconstructionBundle, logits: Var, labels: &[usize]) -> Result<Var> {
    let targets = bundle.d_source_labels(labels)?;
    if tape.value(logits).rows() != targets.len() {
        return Err(Error::shape("one logit row per reconstruction expected"));
    }
    mean_cross_entropy(tape, logits, &targets)
}

pub fn mean_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let n_classes = tape.value(logits).cols();
    if let Some(y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::invalid(format!("label {y} out of range for {n_classes} classes")));
    }
    let ce = tape.softmax_cross_entropy(logits, labels);
    Ok(tape.mean(ce))
}

/// Rows scaled to unit L2 norm; zero rows are an error.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    for r in 0..xv.rows() {
        let n2: f64 = xv.row(r).iter().map(|v| v * v).sum();
        if n2.sqrt() < MIN_NORM {
            return Err(Error::invalid(format!("cannot normalize zero embedding in row {r}")));
        }
    }
    let sq = tape.row_sq_norm(x);
    let log = tape.log(sq);
    let half = tape.scale(log, -0.5);
    let inv = tape.exp(half);
    Ok(tape.scale_rows(x, inv))
}

/// Per-triplet `[D(a, p) − D(a, n) + m]_+` on normalized rows of `emb`,
/// returned as `n×1`.
pub fn triplet_rows(tape: &mut Tape, emb: Var, triplets: &[Triplet], margin: f64) -> Result<Var> {
    if triplets.is_empty() {
        return Err(Error::invalid("no triplets"));
    }
    let unit = normalize_rows(tape, emb)?;
    let pick = |tape: &mut Tape, f: fn(&Triplet) -> usize| {
        let idx: Vec<usize> = triplets.iter().map(f).collect();
        tape.select_rows(unit, &idx)
    };
    let a = pick(tape, |t| t.anchor);
    let p = pick(tape, |t| t.positive);
    let n = pick(tape, |t| t.negative);
    let dap = l2_rows(tape, a, p);
    let dan = l2_rows(tape, a, n);
    let gap = tape.sub(dap, dan);
    let shifted = tape.add_scalar(gap, margin);
    Ok(tape.relu(shifted))
}

fn l2_rows(tape: &mut Tape, a: Var, b: Var) -> Var {
    let diff = tape.sub(a, b);
    let sq = tape.row_sq_norm(diff);
    tape.sqrt(sq)
}

/// Value form of one triplet hinge.
pub fn triplet_term(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::shape("triplet members differ in length"));
    }
    let unit = |x: &[f64]| -> Result<Vec<f64>> {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < MIN_NORM {
            return Err(Error::invalid("cannot normalize zero embedding"));
        }
        Ok(x.iter().map(|v| v / n).collect())
    };
    let (a, p, n) = (unit(anchor)?, unit(positive)?, unit(negative)?);
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    Ok((dist(&a, &p) - dist(&a, &n) + margin).max(0.0))
}

/// `mean[CE(μ) + aux·CE(d)]`. `sample_logits` may be omitted when `aux = 0`.
pub fn id_loss(
    tape: &mut Tape,
    mean_logits: Var,
    sample_logits: Option<Var>,
    labels: &[usize],
    aux: f64,
) -> Result<Var> {
    let base = mean_cross_entropy(tape, mean_logits, labels)?;
    aux_combine(tape, base, sample_logits, aux, |tape, s| mean_cross_entropy(tape, s, labels))
}

fn aux_combine(
    tape: &mut Tape,
    base: Var,
    sample: Option<Var>,
    aux: f64,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    if aux == 0.0 {
        return Ok(base);
    }
    let sample = sample.ok_or_else(|| Error::invalid("sampled codes required when aux > 0"))?;
    let extra = f(tape, sample)?;
    let extra = tape.scale(extra, aux);
    Ok(tape.add(base, extra))
}

/// Cross-modality triplet loss in both directions: for visible- and
/// infrared-anchored triplets separately, the mean hinge on `μ` plus `aux`
/// times the mean hinge on sampled codes, summed over the two directions.
pub fn cmtl_loss(
    tape: &mut Tape,
    batch: &TripletBatch,
    triplets: &[Triplet],
    means: Var,
    samples: Option<Var>,
    margin: f64,
    aux: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for m in [Modality::Visible, Modality::Infrared] {
        let dir: Vec<Triplet> = triplets
            .iter()
            .filter(|t| batch.members.get(t.anchor).map(|a| a.modality) == Some(m))
            .copied()
            .collect();
        if dir.is_empty() {
            continue;
        }
        let h = triplet_rows(tape, means, &dir, margin)?;
        let base = tape.mean(h);
        let term = aux_combine(tape, base, samples, aux, |tape, s| {
            let h = triplet_rows(tape, s, &dir, margin)?;
            Ok(tape.mean(h))
        })?;
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("no triplets"))
}

/// Batch mean of `Σ_l (μ² + σ² − log σ² − 1)` over IAI posteriors.
pub fn ambi_loss(tape: &mut Tape, a: Posterior) -> Var {
    let rows = kl_standard_paper_rows(tape, a.mean, a.log_std);
    tape.mean(rows)
}

/// Batch mean of `Σ log σ_φ + ½‖d − μ_y‖²`.
pub fn gmm_loss(tape: &mut Tape, d: Var, d_log_std: Var, labels: &[usize], prior_means: Var) -> Result<Var> {
    check_labels(tape, prior_means, labels)?;
    let selected = tape.select_rows(prior_means, labels);
    let rows = gmm_rows(tape, d, d_log_std, selected);
    Ok(tape.mean(rows))
}

/// Batch mean of the adaptive large-margin loss.
pub fn lmc_loss(
    tape: &mut Tape,
    d: Var,
    posterior: Posterior,
    labels: &[usize],
    prior_means: Var,
    prior_margins: Var,
) -> Result<Var> {
    let rows = almc_rows(tape, d, posterior.mean, posterior.log_std, labels, prior_means, prior_margins)?;
    Ok(tape.mean(rows))
}

fn check_labels(tape: &Tape, means: Var, labels: &[usize]) -> Result<()> {
    let n = tape.value(means).rows();
    if labels.is_empty() {
        return Err(Error::invalid("empty label list"));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::invalid(format!("identity {y} out of range for {n} components")));
    }
    Ok(())
}

/// Weighted sum of tape terms; terms with zero weight are skipped.
pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let s = tape.scale(v, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.leaf(Tensor::scalar(0.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Member, Modality};
    use crate::model::{ReconEntry, ReconKind};
    use crate::numerics::{check_gradients_multi, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.value(v).item()
    }

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn bundle(t: &mut Tape, entries: Vec<ReconEntry>, recon: Tensor, d: Tensor, a: Tensor) -> ReconstructionBundle {
        ReconstructionBundle {
            entries,
            recon: t.leaf(recon),
            d_codes: t.leaf(d),
            a_codes: t.leaf(a),
        }
    }

    fn entry(d: usize, a: usize, target: Option<usize>) -> ReconEntry {
        let kind = match (target, d == a) {
            (None, _) => ReconKind::NegativeSwap,
            (Some(_), true) => ReconKind::SelfRecon,
            (Some(_), false) => ReconKind::DSwap,
        };
        ReconEntry {
            d_source: d,
            a_source: a,
            target,
            kind,
        }
    }

    #[test]
    fn stage_parsing() {
        assert_eq!(Stage::try_from(2).unwrap(), Stage::Two);
        assert!(Stage::try_from(4).is_err());
        assert!(Stage::try_from(0).is_err());
    }

    #[test]
    fn stage_weights() {
        let w = LossWeights::default();
        for t in [LossTerm::Rec, LossTerm::Cyc, LossTerm::Idc, LossTerm::Ambi] {
            assert_eq!(w.effective(t, Stage::One), 0.0);
        }
        for t in [LossTerm::Id, LossTerm::Cmtl, LossTerm::Gmm, LossTerm::Lmc] {
            assert_eq!(w.effective(t, Stage::Two), 0.0);
        }
        assert_eq!(w.effective(LossTerm::Ambi, Stage::Two), 0.001);
        assert_eq!(w.effective(LossTerm::Ambi, Stage::Three), 0.01);
        assert_eq!(w.effective(LossTerm::Gmm, Stage::Three), 0.2);
        assert!((w.effective(LossTerm::Lmc, Stage::One) - 0.02).abs() < 1e-15);
        assert_eq!(w.effective(LossTerm::Rec, Stage::Three), 0.5);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let vals: Vec<(LossTerm, f64)> = LossTerm::ALL
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, 0.37 * (i + 1) as f64))
            .collect();
        for stage in Stage::ALL {
            let r = total_loss(stage, &vals, &w).unwrap();
            let expect: f64 = vals.iter().map(|&(t, v)| w.effective(t, stage) * v).sum();
            assert!((r.total - expect).abs() < 1e-12);
        }
        let r = total_loss(Stage::One, &vals[..4], &w).unwrap();
        assert_eq!(r.weight(LossTerm::Rec), 0.0);
        assert_eq!(r.value(LossTerm::Rec), None);
        assert!(total_loss(Stage::Three, &vals[..4], &w).is_err());
    }

    #[test]
    fn ablation_zeroes_weights() {
        let mut w = LossWeights::default();
        w.ablate(LossTerm::Ambi).unwrap();
        assert_eq!(w.effective(LossTerm::Ambi, Stage::Three), 0.0);
        assert!(w.ablate(LossTerm::Id).is_err());
        let partial = LossWeights::default().with_ablations(&[LossTerm::Gmm, LossTerm::Lmc]).unwrap();
        assert_eq!(partial.aux, 0.1);
        assert_eq!(partial.effective(LossTerm::Lmc, Stage::One), 0.0);
        let base = LossWeights::default().with_ablations(&ABLATABLE).unwrap();
        assert_eq!(base.aux, 0.0);
        for stage in Stage::ALL {
            for t in ABLATABLE {
                assert_eq!(base.effective(t, stage), 0.0);
            }
        }
    }

    #[test]
    fn rec_loss_examples() {
        let entries = vec![entry(0, 0, Some(0)), entry(1, 0, Some(0)), entry(2, 0, None)];
        let feats = mat(&[vec![0.5, -0.5], vec![0.1, 0.2], vec![0.0, 0.0]]);
        let perfect = mat(&[vec![0.5, -0.5], vec![0.5, -0.5], vec![9.0, 9.0]]);
        let codes = Tensor::zeros(&[3, 1]);
        let v = value(|t| {
            let b = bundle(t, entries.clone(), perfect.clone(), codes.clone(), codes.clone());
            let f = t.leaf(feats.clone());
            rec_loss(t, &b, f)
        });
        assert_eq!(v, 0.0);
        let offset = perfect.map(|x| x + 0.25);
        let v = value(|t| {
            let b = bundle(t, entries.clone(), offset, codes.clone(), codes.clone());
            let f = t.leaf(feats.clone());
            rec_loss(t, &b, f)
        });
        assert!((v - 0.25).abs() < 1e-15);
        // (|0.6-0.5| + |0.3+0.5|)/2 = 0.45 and (|0.5-0.5| + |-1+0.5|)/2 = 0.25
        let hand = mat(&[vec![0.6, 0.3], vec![0.5, -1.0], vec![0.0, 0.0]]);
        let v = value(|t| {
            let b = bundle(t, entries.clone(), hand, codes.clone(), codes.clone());
            let f = t.leaf(feats.clone());
            rec_loss(t, &b, f)
        });
        assert!((v - 0.35).abs() < 1e-15);
        let mut t = Tape::new();
        let b = bundle(&mut t, vec![entry(2, 0, None)], mat(&[vec![0.0]]), Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]));
        let f = t.leaf(mat(&[vec![0.0]]));
        assert!(rec_loss(&mut t, &b, f).is_err());
    }

    #[test]
    fn cyc_loss_examples() {
        let entries = vec![entry(0, 1, Some(1)), entry(1, 1, Some(1))];
        let d = mat(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let a = mat(&[vec![1.0], vec![-1.0]]);
        let recon = Tensor::zeros(&[2, 3]);
        let eval = |dre: Tensor, are: Tensor| {
            value(|t| {
                let b = bundle(t, entries.clone(), recon.clone(), d.clone(), a.clone());
                let dv = t.leaf(dre);
                let av = t.leaf(are);
                cyc_loss(t, &b, dv, av)
            })
        };
        assert_eq!(eval(d.clone(), a.clone()), 0.0);
        assert!((eval(d.clone(), a.map(|x| x - 0.3)) - 0.3).abs() < 1e-15);
        // d-term: (0.1 + 0 + 0 + 0.2)/4 = 0.075; a-term: (0.5 + 0.5)/2 = 0.5
        let dre = mat(&[vec![0.2, 0.2], vec![0.3, 0.6]]);
        let are = mat(&[vec![0.5], vec![-0.5]]);
        assert!((eval(dre, are) - 0.575).abs() < 1e-15);
        let mut t = Tape::new();
        let b = bundle(&mut t, entries.clone(), recon.clone(), d.clone(), a.clone());
        let short = t.leaf(Tensor::zeros(&[1, 2]));
        let av = t.leaf(a.clone());
        assert!(cyc_loss(&mut t, &b, short, av).is_err());
    }

    #[test]
    fn idc_loss_examples() {
        // Member 0 has identity 3, member 1 identity 1.
        let labels = [3, 1];
        let entries = vec![entry(0, 1, Some(1)), entry(1, 0, Some(0))];
        let codes = Tensor::zeros(&[2, 1]);
        let recon = Tensor::zeros(&[2, 1]);
        let eval = |logits: Tensor| {
            value(|t| {
                let b = bundle(t, entries.clone(), recon.clone(), codes.clone(), codes.clone());
                let l = t.leaf(logits);
                idc_loss(t, &b, l, &labels)
            })
        };
        let uniform = Tensor::zeros(&[2, 4]);
        assert!((eval(uniform) - 4f64.ln()).abs() < 1e-12);
        let confident = mat(&[vec![-1e3, -1e3, -1e3, 0.0], vec![-1e3, 0.0, -1e3, -1e3]]);
        assert!(eval(confident.clone()).abs() < 1e-12);
        // Labeled by a-source instead, the same logits are badly wrong.
        let swapped = mat(&[vec![-1e3, 0.0, -1e3, -1e3], vec![-1e3, -1e3, -1e3, 0.0]]);
        assert!(eval(swapped) > 100.0);
        let mut t = Tape::new();
        let b = bundle(&mut t, vec![entry(5, 0, None)], recon.clone(), codes.clone(), codes.clone());
        let l = t.leaf(Tensor::zeros(&[1, 4]));
        assert!(idc_loss(&mut t, &b, l, &labels).is_err());
    }

    /// Unit vectors at angle θ from `e1` in the plane; chord length is
    /// `2 sin(θ/2)`.
    fn at_distance(dist: f64) -> Vec<f64> {
        let theta = 2.0 * (dist / 2.0).asin();
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn triplet_term_examples() {
        let a = vec![1.0, 0.0];
        let p = at_distance(0.3);
        let n = at_distance(0.5);
        assert_eq!(triplet_term(&a, &p, &n, 0.1).unwrap(), 0.0);
        let p = at_distance(0.9);
        let n = at_distance(0.2);
        assert!((triplet_term(&a, &p, &n, 0.1).unwrap() - 0.8).abs() < 1e-12);
        let n = at_distance(0.05);
        assert!((triplet_term(&a, &a, &n, 0.1).unwrap() - 0.05).abs() < 1e-12);
        assert!(triplet_term(&a, &[0.0, 0.0], &n, 0.1).is_err());
    }

    #[test]
    fn triplet_term_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let base = triplet_term(&v[0], &v[1], &v[2], 0.5).unwrap();
            for c in [0.125, 4.0, 1024.0] {
                let s: Vec<Vec<f64>> = v.iter().map(|x| x.iter().map(|y| y * c).collect()).collect();
                assert_eq!(triplet_term(&s[0], &s[1], &s[2], 0.5).unwrap(), base);
            }
            let c = rng.gen_range(0.01..100.0);
            let s: Vec<Vec<f64>> = v.iter().map(|x| x.iter().map(|y| y * c).collect()).collect();
            assert!((triplet_term(&s[0], &s[1], &s[2], 0.5).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_triplets_match_value_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let trips = [
            Triplet { anchor: 0, positive: 1, negative: 2 },
            Triplet { anchor: 3, positive: 4, negative: 5 },
            Triplet { anchor: 0, positive: 0, negative: 5 },
        ];
        let mut t = Tape::new();
        let e = t.leaf(mat(&rows));
        let h = triplet_rows(&mut t, e, &trips, 0.3).unwrap();
        for (i, tr) in trips.iter().enumerate() {
            let v = triplet_term(&rows[tr.anchor], &rows[tr.positive], &rows[tr.negative], 0.3).unwrap();
            assert!((t.value(h).data()[i] - v).abs() < 1e-12);
        }
        let z = t.leaf(Tensor::zeros(&[6, 3]));
        assert!(triplet_rows(&mut t, z, &trips, 0.3).is_err());
    }

    fn two_id_batch() -> (TripletBatch, Vec<Triplet>) {
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
        let trips = vec![
            Triplet { anchor: 0, positive: 1, negative: 3 },
            Triplet { anchor: 1, positive: 0, negative: 2 },
        ];
        (batch, trips)
    }

    #[test]
    fn cmtl_examples() {
        let (batch, trips) = two_id_batch();
        let collapsed = Tensor::full(&[4, 2], 0.7);
        let v = value(|t| {
            let m = t.leaf(collapsed.clone());
            cmtl_loss(t, &batch, &trips, m, Some(m), 0.1, 0.0)
        });
        assert!((v - 0.2).abs() < 1e-12);
        let v = value(|t| {
            let m = t.leaf(collapsed.clone());
            cmtl_loss(t, &batch, &trips, m, Some(m), 0.1, 0.5)
        });
        assert!((v - 0.3).abs() < 1e-12);
        let separated = mat(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        let v = value(|t| {
            let m = t.leaf(separated.clone());
            cmtl_loss(t, &batch, &trips, m, Some(m), 0.1, 0.1)
        });
        assert_eq!(v, 0.0);
        // One visible-anchored triplet: D(a,p) = 0.9, D(a,n) = 0.2.
        let hand = Tensor::from_rows(&[vec![1.0, 0.0], at_distance(0.9), vec![0.0, 1.0], at_distance(0.2)]).unwrap();
        let v = value(|t| {
            let m = t.leaf(hand.clone());
            cmtl_loss(t, &batch, &trips[..1], m, None, 0.1, 0.0)
        });
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn id_loss_examples() {
        let labels = [0, 1];
        let mu = mat(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
        let d = mat(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let ce = |z: &[f64], y: usize| (z[0].exp() + z[1].exp()).ln() - z[y];
        let plain = (ce(&[2.0, 0.0], 0) + ce(&[0.0, 1.0], 1)) / 2.0;
        let v = value(|t| {
            let m = t.leaf(mu.clone());
            id_loss(t, m, None, &labels, 0.0)
        });
        assert!((v - plain).abs() < 1e-12);
        let aux = (ce(&[0.0, 0.0], 0) + ce(&[1.0, 0.0], 1)) / 2.0;
        let v = value(|t| {
            let m = t.leaf(mu.clone());
            let s = t.leaf(d.clone());
            id_loss(t, m, Some(s), &labels, 0.1)
        });
        assert!((v - (plain + 0.1 * aux)).abs() < 1e-12);
        let perfect = mat(&[vec![1e3, 0.0], vec![0.0, 1e3]]);
        let v = value(|t| {
            let m = t.leaf(perfect.clone());
            id_loss(t, m, Some(m), &labels, 0.1)
        });
        assert!(v.abs() < 1e-12);
        let mut t = Tape::new();
        let m = t.leaf(mu.clone());
        assert!(id_loss(&mut t, m, None, &labels, 0.1).is_err());
    }

    #[test]
    fn ambi_is_zero_at_standard_normal() {
        let v = value(|t| {
            let m = t.leaf(Tensor::zeros(&[3, 4]));
            let s = t.leaf(Tensor::zeros(&[3, 4]));
            Ok(ambi_loss(t, Posterior { mean: m, log_std: s }))
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn gmm_and_lmc_reject_bad_labels() {
        let mut t = Tape::new();
        let d = t.leaf(Tensor::zeros(&[2, 3]));
        let means = t.leaf(Tensor::zeros(&[2, 3]));
        assert!(gmm_loss(&mut t, d, d, &[0, 2], means).is_err());
        let margins = t.leaf(Tensor::zeros(&[2, 1]));
        let p = Posterior { mean: d, log_std: d };
        assert!(lmc_loss(&mut t, d, p, &[0, 5], means, margins).is_err());
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels = [0, 2, 1, 2];
        let pts = vec![
            random(&mut rng, 4, 3, -1.0, 1.0),
            random(&mut rng, 4, 3, -1.0, 1.0),
            random(&mut rng, 3, 3, -1.0, 1.0),
            random(&mut rng, 3, 1, 0.0, 1.0),
        ];
        let err = check_gradients_multi(
            |t, v| {
                let post = Posterior { mean: v[0], log_std: v[1] };
                let a = gmm_loss(t, v[0], v[1], &labels, v[2])?;
                let b = lmc_loss(t, v[0], post, &labels, v[2], v[3])?;
                let c = ambi_loss(t, post);
                weighted_sum(t, &[(a, 1.0), (b, 0.7), (c, 0.3)])
            },
            &pts,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn weighted_sum_of_nothing_is_zero() {
        let v = value(|t| {
            let x = t.leaf(Tensor::scalar(3.0));
            weighted_sum(t, &[(x, 0.0)])
        });
        assert_eq!(v, 0.0);
    }
}
