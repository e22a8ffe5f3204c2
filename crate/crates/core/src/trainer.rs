//! Three-stage optimization with checkpointing.
//!
//! Stage 1 trains the extractors, IDI encoder, classifier and prior on the
//! task and prior terms. Stage 2 freezes all of those and trains the IAI
//! encoder and decoder on the swap-reconstruction terms. Stage 3 trains
//! everything on the full objective. The classifier uses momentum SGD;
//! everything else uses Adam. Optimizer buffers restart at each stage.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_triplets, sample_batch, Dataset, Modality};
use crate::error::{Error, Result};
use crate::model::{noise, pair_triplets, Graph, Model, ModelConfig, ModelDims, ParamGroup};
use crate::numerics::{Tensor, Var};
use crate::objectives::{
    ambi_loss, cmtl_loss, cyc_loss, gmm_loss, id_loss, idc_loss, lmc_loss, rec_loss, total_loss, weighted_sum,
    LossReport, LossTerm, LossWeights, Stage,
};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MOMENTUM: f64 = 0.9;

const CKPT_MAGIC: &[u8; 4] = b"VICK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: [usize; 3],
    pub learning_rates: [f64; 3],
    /// Momentum-SGD rates for the classifier, per stage.
    pub classifier_learning_rates: [f64; 3],
    pub batches_per_epoch: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: [30, 15, 30],
            learning_rates: [1e-3, 1e-3, 1e-4],
            classifier_learning_rates: [1e-2, 1e-2, 1e-3],
            batches_per_epoch: 30,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 {
            return Err(Error::Config("batches_per_epoch must be positive".into()));
        }
        for lr in self.learning_rates.iter().chain(&self.classifier_learning_rates) {
            if !(*lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config("learning rates must be nonnegative and finite".into()));
            }
        }
        Ok(())
    }
}

/// Parameter groups updated in `stage`.
pub fn trainable(stage: Stage, group: ParamGroup) -> bool {
    use ParamGroup::*;
    match stage {
        Stage::One => matches!(group, VisibleExtractor | InfraredExtractor | IdiEncoder | Classifier | Prior),
        Stage::Two => matches!(group, IaiEncoder | Decoder),
        Stage::Three => true,
    }
}

fn check_update(param: &Tensor, grad: &Tensor, buffers: &[&Tensor]) -> Result<()> {
    if grad.shape() != param.shape() || buffers.iter().any(|b| b.shape() != param.shape()) {
        return Err(Error::shape("optimizer buffers do not match parameter shape"));
    }
    if !grad.all_finite() {
        return Err(Error::non_finite("gradient"));
    }
    Ok(())
}

/// Bias-corrected Adam update; `t` is the 1-based step count.
pub fn adaptive_moment_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
) -> Result<()> {
    check_update(param, grad, &[m, v])?;
    if t == 0 {
        return Err(Error::invalid("Adam step count starts at 1"));
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    let (p, g) = (param.data_mut(), grad.data());
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Classical momentum: `v ← 0.9 v + g`, `p ← p − lr v`.
pub fn momentum_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64) -> Result<()> {
    check_update(param, grad, &[velocity])?;
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = MOMENTUM * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Per-parameter Adam moments and momentum velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub velocity: Vec<Tensor>,
    pub adam_steps: u64,
}

impl OptimizerState {
    pub fn zeros(model: &Model) -> Self {
        let z: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        OptimizerState {
            m: z.clone(),
            v: z.clone(),
            velocity: z,
            adam_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optim: OptimizerState,
    pub stage: Stage,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh parameters drawn from the run's random stream.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(dims, &mut rng)?;
        let optim = OptimizerState::zeros(&model);
        Ok(TrainState {
            model,
            optim,
            stage: Stage::One,
            epoch: 0,
            step: 0,
            seed,
            rng,
        })
    }

    pub fn is_finished(&self, config: &StageConfig) -> bool {
        self.stage == Stage::Three && self.epoch >= config.epochs[2]
    }

    fn advance_stage(&mut self) {
        if let Some(&next) = Stage::ALL.get(self.stage.index() + 1) {
            self.stage = next;
            self.epoch = 0;
            self.optim = OptimizerState::zeros(&self.model);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        let d = self.model.dims();
        for v in [d.raw_dim, d.feature_dim, d.hidden_dim, d.idi_dim, d.iai_dim, d.pool, d.n_identities] {
            put_u32(&mut b, v as u32);
        }
        put_u32(&mut b, self.stage.number());
        put_u64(&mut b, self.epoch as u64);
        put_u64(&mut b, self.step);
        put_u64(&mut b, self.optim.adam_steps);
        put_u64(&mut b, self.seed);
        b.extend_from_slice(&self.rng.get_seed());
        put_u64(&mut b, self.rng.get_stream());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let params = self.model.params();
        put_u32(&mut b, params.len() as u32);
        for (i, p) in params.iter().enumerate() {
            put_u32(&mut b, p.name.len() as u32);
            b.extend_from_slice(p.name.as_bytes());
            put_u32(&mut b, p.value.shape().len() as u32);
            for &s in p.value.shape() {
                put_u32(&mut b, s as u32);
            }
            for t in [&p.value, &self.optim.m[i], &self.optim.v[i], &self.optim.velocity[i]] {
                for x in t.data() {
                    b.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut dim = || r.u32().map(|v| v as usize);
        let dims = ModelDims {
            raw_dim: dim()?,
            feature_dim: dim()?,
            hidden_dim: dim()?,
            idi_dim: dim()?,
            iai_dim: dim()?,
            pool: dim()?,
            n_identities: dim()?,
        };
        let stage = Stage::try_from(r.u32()?).map_err(|e| e.to_string())?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let adam_steps = r.u64()?;
        let seed = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        let (mut m, mut v, mut velocity) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "parameter name is not UTF-8")?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 2 {
                return Err(format!("parameter {name} has rank {rank}"));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|s| s as usize)).collect::<std::result::Result<_, _>>()?;
            let count: usize = shape.iter().product();
            let read = |r: &mut Reader| -> std::result::Result<Tensor, String> {
                let data = (0..count).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
                Tensor::new(shape.clone(), data).map_err(|e| e.to_string())
            };
            params.push((name, read(&mut r)?));
            m.push(read(&mut r)?);
            v.push(read(&mut r)?);
            velocity.push(read(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        let model = Model::from_params(dims, params).map_err(|e| e.to_string())?;
        Ok(TrainState {
            model,
            optim: OptimizerState {
                m,
                v,
                velocity,
                adam_steps,
            },
            stage,
            epoch,
            step,
            seed,
            rng,
        })
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err("truncated checkpoint".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &state.to_bytes())
}

pub fn restore(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    TrainState::from_bytes(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

/// Epoch-averaged loss values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub terms: Vec<(LossTerm, Option<f64>)>,
}

impl EpochRecord {
    fn from_reports(stage: Stage, epoch: usize, step: u64, reports: &[LossReport]) -> Self {
        let n = reports.len() as f64;
        let total = reports.iter().map(|r| r.total).sum::<f64>() / n;
        let terms = LossTerm::ALL
            .iter()
            .map(|&t| {
                let vals: Vec<f64> = reports.iter().filter_map(|r| r.value(t)).collect();
                let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                (t, mean)
            })
            .collect();
        EpochRecord {
            stage,
            epoch,
            step,
            total,
            terms,
        }
    }
}

pub enum Event<'e> {
    Epoch(&'e EpochRecord),
    /// The stage finished; the state has already moved to the next stage.
    StageDone(Stage),
}

/// Binds a dataset's training identities, a schedule and loss weights.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    train_ids: Vec<usize>,
    class_of: Vec<Option<usize>>,
    config: StageConfig,
    weights: LossWeights,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: StageConfig, weights: LossWeights) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let train_ids = dataset.split().train;
        let mut class_of = vec![None; dataset.config().n_identities];
        for (c, &y) in train_ids.iter().enumerate() {
            class_of[y] = Some(c);
        }
        Ok(Trainer {
            dataset,
            train_ids,
            class_of,
            config,
            weights,
        })
    }

    pub fn config(&self) -> &StageConfig {
        &self.config
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn dims(&self, model: &ModelConfig) -> ModelDims {
        model.dims(self.dataset.raw_dim(), self.train_ids.len())
    }

    pub fn init_state(&self, model: &ModelConfig, seed: u64) -> Result<TrainState> {
        TrainState::new(self.dims(model), seed)
    }

    fn stage_has_objective(&self, stage: Stage) -> bool {
        LossTerm::ALL.iter().any(|&t| self.weights.effective(t, stage) > 0.0)
    }

    /// One mini-batch update in the state's current stage.
    pub fn step(&self, state: &mut TrainState) -> Result<LossReport> {
        let stage = state.stage;
        let w = self.weights;
        let eff = |t: LossTerm| w.effective(t, stage);
        let batch = sample_batch(self.dataset, &self.train_ids, &mut state.rng)?;
        let triplets = build_triplets(&batch, &mut state.rng)?;
        let labels = batch
            .members
            .iter()
            .map(|m| self.class_of[m.identity])
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| Error::invalid("batch contains a non-training identity"))?;
        let dims = *state.model.dims();
        let n = batch.len();
        let eps_d = noise(&mut state.rng, n, dims.idi_dim);
        let eps_a = (stage != Stage::One).then(|| noise(&mut state.rng, n, dims.iai_dim));

        let obs = self.dataset.observations();
        let inputs: Vec<(&[f64], Modality)> = batch
            .members
            .iter()
            .map(|m| (obs[m.sample].raw.as_slice(), m.modality))
            .collect();

        let mut g = Graph::new(&state.model, |grp| trainable(stage, grp));
        let f = g.features(&inputs)?;
        let dp = g.encode_idi(f);
        let d = g.sample(dp, eps_d);
        let mut terms: Vec<(LossTerm, Var)> = Vec::new();
        if eff(LossTerm::Id) > 0.0 {
            let lm = g.classify(dp.mean);
            let ls = (w.aux > 0.0).then(|| g.classify(d));
            terms.push((LossTerm::Id, id_loss(&mut g.tape, lm, ls, &labels, w.aux)?));
        }
        if eff(LossTerm::Cmtl) > 0.0 {
            let v = cmtl_loss(&mut g.tape, &batch, &triplets, dp.mean, Some(d), w.margin, w.aux)?;
            terms.push((LossTerm::Cmtl, v));
        }
        if eff(LossTerm::Gmm) > 0.0 {
            let means = g.prior_means();
            terms.push((LossTerm::Gmm, gmm_loss(&mut g.tape, d, dp.log_std, &labels, means)?));
        }
        if eff(LossTerm::Lmc) > 0.0 {
            let (means, margins) = (g.prior_means(), g.prior_margins());
            terms.push((LossTerm::Lmc, lmc_loss(&mut g.tape, d, dp, &labels, means, margins)?));
        }
        if let Some(eps_a) = eps_a {
            let ap = g.encode_iai(f);
            if eff(LossTerm::Ambi) > 0.0 {
                terms.push((LossTerm::Ambi, ambi_loss(&mut g.tape, ap)));
            }
            let (rec, cyc, idc) = (eff(LossTerm::Rec) > 0.0, eff(LossTerm::Cyc) > 0.0, eff(LossTerm::Idc) > 0.0);
            if rec || cyc || idc {
                let a = g.sample(ap, eps_a);
                let pairs = pair_triplets(&batch, &triplets)?;
                let bundle = g.tsr_forward(&batch, &pairs, d, a)?;
                if rec {
                    terms.push((LossTerm::Rec, rec_loss(&mut g.tape, &bundle, f)?));
                }
                if cyc || idc {
                    let dre = g.encode_idi(bundle.recon);
                    if cyc {
                        let are = g.encode_iai(bundle.recon);
                        terms.push((LossTerm::Cyc, cyc_loss(&mut g.tape, &bundle, dre.mean, are.mean)?));
                    }
                    if idc {
                        let logits = g.classify(dre.mean);
                        terms.push((LossTerm::Idc, idc_loss(&mut g.tape, &bundle, logits, &labels)?));
                    }
                }
            }
        }

        let values: Vec<(LossTerm, f64)> = terms.iter().map(|&(t, v)| (t, g.tape.value(v).item())).collect();
        let report = total_loss(stage, &values, &w)?;
        let weighted: Vec<(Var, f64)> = terms.iter().map(|&(t, v)| (v, eff(t))).collect();
        let total = weighted_sum(&mut g.tape, &weighted)?;
        let grads = g.tape.backward(total)?.into_params();
        drop(g);

        if let Some((id, _)) = grads.iter().find(|(_, gr)| !gr.all_finite()) {
            return Err(Error::non_finite(format!(
                "gradient of {} at step {}",
                state.model.params()[*id].name,
                state.step
            )));
        }
        let i = stage.index();
        let (lr, clr) = (self.config.learning_rates[i], self.config.classifier_learning_rates[i]);
        if grads.keys().any(|&id| state.model.params()[id].group != ParamGroup::Classifier) {
            state.optim.adam_steps += 1;
        }
        let t = state.optim.adam_steps;
        let optim = &mut state.optim;
        for (id, grad) in grads {
            let p = &mut state.model.params_mut()[id];
            if p.group == ParamGroup::Classifier {
                momentum_step(&mut p.value, &grad, &mut optim.velocity[id], clr)?;
            } else {
                adaptive_moment_step(&mut p.value, &grad, &mut optim.m[id], &mut optim.v[id], t, lr)?;
            }
        }
        state.model.project_margins();
        state.step += 1;
        Ok(report)
    }

    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochRecord> {
        let mut reports = Vec::with_capacity(self.config.batches_per_epoch);
        for _ in 0..self.config.batches_per_epoch {
            reports.push(self.step(state)?);
        }
        state.epoch += 1;
        Ok(EpochRecord::from_reports(state.stage, state.epoch, state.step, &reports))
    }

    /// Runs the remaining epochs of the current stage, then moves the
    /// state to the next stage. Returns `false` if the observer asked to
    /// stop. A stage whose every term has zero weight runs no steps.
    pub fn run_stage(
        &self,
        state: &mut TrainState,
        observer: &mut dyn FnMut(Event, &TrainState) -> Result<bool>,
    ) -> Result<bool> {
        let stage = state.stage;
        let epochs = self.config.epochs[stage.index()];
        if self.stage_has_objective(stage) {
            while state.epoch < epochs {
                let record = self.run_epoch(state)?;
                if !observer(Event::Epoch(&record), state)? {
                    return Ok(false);
                }
            }
        } else {
            state.epoch = epochs;
        }
        if stage != Stage::Three {
            state.advance_stage();
        }
        observer(Event::StageDone(stage), state)
    }

    /// Continues from wherever `state` is until stage 3 completes.
    pub fn run(&self, state: &mut TrainState, observer: &mut dyn FnMut(Event, &TrainState) -> Result<bool>) -> Result<()> {
        while !self.is_done(state) {
            if !self.run_stage(state, observer)? {
                return Ok(());
            }
        }
        Ok(())
    }

    fn is_done(&self, state: &TrainState) -> bool {
        state.is_finished(&self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};

    fn tiny_config() -> StageConfig {
        StageConfig {
            epochs: [2, 1, 1],
            batches_per_epoch: 2,
            ..Default::default()
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let before = p.clone();
        let (mut m, mut v) = (Tensor::zeros(&[2]), Tensor::zeros(&[2]));
        adaptive_moment_step(&mut p, &Tensor::zeros(&[2]), &mut m, &mut v, 1, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut p = Tensor::vector(vec![0.0]);
            let (mut m, mut v) = (Tensor::zeros(&[1]), Tensor::zeros(&[1]));
            adaptive_moment_step(&mut p, &Tensor::vector(vec![g]), &mut m, &mut v, 1, 0.01).unwrap();
            // m̂ = g, v̂ = g², step = lr·g/(|g| + ε)
            let expect = -0.01 * g / (g.abs() + ADAM_EPS);
            assert!((p.data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Tensor::vector(vec![0.0]);
        let (mut m, mut v) = (Tensor::zeros(&[1]), Tensor::zeros(&[1]));
        let g = Tensor::vector(vec![f64::NAN]);
        assert!(adaptive_moment_step(&mut p, &g, &mut m, &mut v, 1, 0.01).is_err());
    }

    #[test]
    fn momentum_velocity_converges_geometrically() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut vel = Tensor::zeros(&[1]);
        momentum_step(&mut p, &Tensor::zeros(&[1]), &mut vel, 0.1).unwrap();
        assert_eq!(p.data()[0], 0.0);
        let g = 2.0;
        for t in 1..=100 {
            momentum_step(&mut p, &Tensor::vector(vec![g]), &mut vel, 0.1).unwrap();
            let closed = g * (1.0 - MOMENTUM.powi(t)) / (1.0 - MOMENTUM);
            assert!((vel.data()[0] - closed).abs() < 1e-12);
        }
        assert!((vel.data()[0] - g / (1.0 - MOMENTUM)).abs() < 0.01);
    }

    #[test]
    fn masks_follow_stages() {
        assert!(trainable(Stage::One, ParamGroup::IdiEncoder));
        assert!(!trainable(Stage::One, ParamGroup::Decoder));
        assert!(!trainable(Stage::Two, ParamGroup::IdiEncoder));
        assert!(!trainable(Stage::Two, ParamGroup::Classifier));
        assert!(trainable(Stage::Two, ParamGroup::IaiEncoder));
        assert!(ParamGroup::ALL.iter().all(|&g| trainable(Stage::Three, g)));
        let c = StageConfig::default();
        assert!((c.learning_rates[2] - c.learning_rates[0] / 10.0).abs() < 1e-18);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let ds = generate(&SyntheticConfig::default(), 1).unwrap();
        let trainer = Trainer::new(&ds, tiny_config(), LossWeights::default()).unwrap();
        let mut state = trainer.init_state(&ModelConfig::default(), 9).unwrap();
        trainer.step(&mut state).unwrap();
        let bytes = state.to_bytes();
        let back = TrainState::from_bytes(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(back.to_bytes(), bytes);
        assert!(TrainState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(TrainState::from_bytes(&wrong).unwrap_err().contains("version"));
    }

    #[test]
    fn stage_two_changes_only_its_groups() {
        let ds = generate(&SyntheticConfig::default(), 2).unwrap();
        let trainer = Trainer::new(&ds, tiny_config(), LossWeights::default()).unwrap();
        let mut state = trainer.init_state(&ModelConfig::default(), 3).unwrap();
        state.stage = Stage::Two;
        let before = state.model.clone();
        for _ in 0..3 {
            let r = trainer.step(&mut state).unwrap();
            assert!(r.total.is_finite());
        }
        for (a, b) in before.params().iter().zip(state.model.params()) {
            if trainable(Stage::Two, a.group) {
                assert_ne!(a.value, b.value, "{}", a.name);
            } else {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn full_schedule_runs_and_reports_stages() {
        let ds = generate(&SyntheticConfig::default(), 4).unwrap();
        let trainer = Trainer::new(&ds, tiny_config(), LossWeights::default()).unwrap();
        let mut state = trainer.init_state(&ModelConfig::default(), 5).unwrap();
        let mut epochs = Vec::new();
        let mut stages = Vec::new();
        trainer
            .run(&mut state, &mut |e, _| {
                match e {
                    Event::Epoch(r) => epochs.push((r.stage, r.epoch, r.total)),
                    Event::StageDone(s) => stages.push(s),
                }
                Ok(true)
            })
            .unwrap();
        assert_eq!(stages, Stage::ALL.to_vec());
        assert_eq!(epochs.len(), 4);
        assert!(epochs.iter().all(|e| e.2.is_finite()));
        assert_eq!(state.step, 8);
        assert!(state.is_finished(trainer.config()));
        assert!(state.model.prior().margins().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn baseline_skips_the_reconstruction_stage() {
        let ds = generate(&SyntheticConfig::default(), 4).unwrap();
        let w = LossWeights::default().with_ablations(&crate::objectives::ABLATABLE).unwrap();
        let trainer = Trainer::new(&ds, tiny_config(), w).unwrap();
        let mut state = trainer.init_state(&ModelConfig::default(), 5).unwrap();
        trainer.run(&mut state, &mut |_, _| Ok(true)).unwrap();
        assert_eq!(state.step, 6);
    }
}
