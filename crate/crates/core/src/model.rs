//! Network roles: two modality-specific extractors, shared identity
//! (IDI) and identity-ambiguous (IAI) encoders, a decoder over `[d | a]`,
//! a single-layer code classifier, and the mixture prior's parameters.
//!
//! [`Model`] owns every parameter in one flat list so optimizers and
//! checkpoints can treat them uniformly. [`Graph`] binds the parameters to a
//! fresh [`Tape`] for one forward/backward pass.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{Modality, TripletBatch, Triplet};
use crate::distributions::{reparameterize_var, DiagonalGaussian, LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::priors::MoGPrior;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub raw_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub idi_dim: usize,
    pub iai_dim: usize,
    /// Width of the max/mean reduction applied by the encoder heads.
    pub pool: usize,
    pub n_identities: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            raw_dim: 32,
            feature_dim: 64,
            hidden_dim: 64,
            idi_dim: 32,
            iai_dim: 8,
            pool: 2,
            n_identities: 8,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.raw_dim,
            self.feature_dim,
            self.hidden_dim,
            self.idi_dim,
            self.iai_dim,
            self.pool,
        ];
        if all.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.iai_dim >= self.idi_dim {
            return Err(Error::Config("iai_dim must be smaller than idi_dim".into()));
        }
        if self.n_identities < 2 {
            return Err(Error::Config("need at least two training identities".into()));
        }
        Ok(())
    }
}

/// Configurable widths; input width and identity count come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub idi_dim: usize,
    pub iai_dim: usize,
    pub pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelConfig {
            feature_dim: d.feature_dim,
            hidden_dim: d.hidden_dim,
            idi_dim: d.idi_dim,
            iai_dim: d.iai_dim,
            pool: d.pool,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, raw_dim: usize, n_identities: usize) -> ModelDims {
        ModelDims {
            raw_dim,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            idi_dim: self.idi_dim,
            iai_dim: self.iai_dim,
            pool: self.pool,
            n_identities,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    VisibleExtractor,
    InfraredExtractor,
    IdiEncoder,
    IaiEncoder,
    Decoder,
    Classifier,
    Prior,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::VisibleExtractor,
        ParamGroup::InfraredExtractor,
        ParamGroup::IdiEncoder,
        ParamGroup::IaiEncoder,
        ParamGroup::Decoder,
        ParamGroup::Classifier,
        ParamGroup::Prior,
    ];

    pub fn extractor(m: Modality) -> Self {
        match m {
            Modality::Visible => ParamGroup::VisibleExtractor,
            Modality::Infrared => ParamGroup::InfraredExtractor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Encoder {
    trunk: [Linear; 2],
    mean: Linear,
    log_std: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    extractors: [[Linear; 2]; 2],
    idi: Encoder,
    iai: Encoder,
    decoder: [Linear; 2],
    classifier: Linear,
    prior_means: usize,
    prior_margins: usize,
}

struct Builder<'r, R: Rng + ?Sized> {
    params: Vec<Param>,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn push(&mut self, name: String, group: ParamGroup, value: Tensor) -> usize {
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let b = (0..fan_out).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Linear {
            w: self.push(format!("{name}.w"), group, Tensor::matrix(fan_in, fan_out, w).expect("weight")),
            b: self.push(format!("{name}.b"), group, Tensor::vector(b)),
        }
    }

    fn encoder(&mut self, name: &str, group: ParamGroup, dims: &ModelDims, out: usize) -> Encoder {
        let (f, h, p) = (dims.feature_dim, dims.hidden_dim, dims.pool);
        Encoder {
            trunk: [
                self.linear(&format!("{name}.trunk0"), group, f, h),
                self.linear(&format!("{name}.trunk1"), group, h, h),
            ],
            mean: self.linear(&format!("{name}.mean"), group, h, out * p),
            log_std: self.linear(&format!("{name}.log_std"), group, h, out * p),
        }
    }
}

/// All parameters plus their roles.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    dims: ModelDims,
    params: Vec<Param>,
    layout: Layout,
}

impl Model {
    /// Weights and biases uniform in `±1/√fan_in`; prior means from
    /// `N(0, 0.1² I)`; margins zero.
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let (r, f, h) = (dims.raw_dim, dims.feature_dim, dims.hidden_dim);
        let extractor = |b: &mut Builder<R>, m: Modality| {
            let g = ParamGroup::extractor(m);
            let name = format!("extractor.{}", m.name());
            [b.linear(&format!("{name}.l0"), g, r, h), b.linear(&format!("{name}.l1"), g, h, f)]
        };
        let extractors = [extractor(&mut b, Modality::Visible), extractor(&mut b, Modality::Infrared)];
        let idi = b.encoder("idi", ParamGroup::IdiEncoder, &dims, dims.idi_dim);
        let iai = b.encoder("iai", ParamGroup::IaiEncoder, &dims, dims.iai_dim);
        let decoder = [
            b.linear("decoder.l0", ParamGroup::Decoder, dims.idi_dim + dims.iai_dim, h),
            b.linear("decoder.l1", ParamGroup::Decoder, h, f),
        ];
        let classifier = b.linear("classifier", ParamGroup::Classifier, dims.idi_dim, dims.n_identities);
        let prior = MoGPrior::init(b.rng, dims.n_identities, dims.idi_dim);
        let prior_means = b.push("prior.means".into(), ParamGroup::Prior, prior.means().clone());
        let margins = Tensor::matrix(dims.n_identities, 1, prior.margins().to_vec())?;
        let prior_margins = b.push("prior.margins".into(), ParamGroup::Prior, margins);
        Ok(Model {
            dims,
            params: b.params,
            layout: Layout {
                extractors,
                idi,
                iai,
                decoder,
                classifier,
                prior_means,
                prior_margins,
            },
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(dims: ModelDims, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut template = Model::new(dims, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if params.len() != template.params.len() {
            return Err(Error::shape(format!(
                "{} parameter blocks, model expects {}",
                params.len(),
                template.params.len()
            )));
        }
        for (slot, (name, value)) in template.params.iter_mut().zip(params) {
            if slot.name != name || slot.value.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            if !value.all_finite() {
                return Err(Error::non_finite(format!("parameter {name}")));
            }
            slot.value = value;
        }
        Ok(template)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_ids(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].group == group).collect()
    }

    pub fn prior(&self) -> MoGPrior {
        let margins = self.params[self.layout.prior_margins].value.data().to_vec();
        MoGPrior::new(self.params[self.layout.prior_means].value.clone(), margins)
            .expect("prior parameters stay finite")
    }

    /// Clamps the margins onto `[0, ∞)`.
    pub fn project_margins(&mut self) {
        for a in self.params[self.layout.prior_margins].value.data_mut() {
            *a = a.max(0.0);
        }
    }

    pub fn extract(&self, x: &[f64], modality: Modality) -> Result<Vec<f64>> {
        let mut g = Graph::frozen(self);
        let xv = g.input(&[x])?;
        let f = g.extract(xv, modality);
        Ok(g.tape.value(f).data().to_vec())
    }

    pub fn encode_idi(&self, f: &[f64]) -> Result<DiagonalGaussian> {
        self.encode_with(f, true)
    }

    pub fn encode_iai(&self, f: &[f64]) -> Result<DiagonalGaussian> {
        self.encode_with(f, false)
    }

    fn encode_with(&self, f: &[f64], idi: bool) -> Result<DiagonalGaussian> {
        self.check_len(f.len(), self.dims.feature_dim, "feature")?;
        let mut g = Graph::frozen(self);
        let fv = g.input(&[f])?;
        let p = if idi { g.encode_idi(fv) } else { g.encode_iai(fv) };
        DiagonalGaussian::new(
            g.tape.value(p.mean).data().to_vec(),
            g.tape.value(p.log_std).data().to_vec(),
        )
    }

    /// Decodes `[d | a]` to a feature vector in `(−1, 1)`.
    pub fn decode(&self, d: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_len(d.len(), self.dims.idi_dim, "IDI code")?;
        self.check_len(a.len(), self.dims.iai_dim, "IAI code")?;
        let mut g = Graph::frozen(self);
        let dv = g.input(&[d])?;
        let av = g.input(&[a])?;
        let out = g.decode(dv, av);
        Ok(g.tape.value(out).data().to_vec())
    }

    pub fn classify(&self, code: &[f64]) -> Result<Vec<f64>> {
        self.check_len(code.len(), self.dims.idi_dim, "IDI code")?;
        let mut g = Graph::frozen(self);
        let cv = g.input(&[code])?;
        let out = g.classify(cv);
        Ok(g.tape.value(out).data().to_vec())
    }

    /// Posterior parameters for a batch of raw samples, in input order.
    pub fn encode_batch(&self, inputs: &[(&[f64], Modality)]) -> Result<EncodedBatch> {
        let mut g = Graph::frozen(self);
        let f = g.features(inputs)?;
        let d = g.encode_idi(f);
        let a = g.encode_iai(f);
        let t = &g.tape;
        Ok(EncodedBatch {
            features: t.value(f).clone(),
            d_mean: t.value(d.mean).clone(),
            d_log_std: t.value(d.log_std).clone(),
            a_mean: t.value(a.mean).clone(),
            a_log_std: t.value(a.log_std).clone(),
        })
    }

    fn check_len(&self, got: usize, want: usize, what: &str) -> Result<()> {
        if got != want {
            return Err(Error::shape(format!("{what} has length {got}, expected {want}")));
        }
        Ok(())
    }
}

/// Rows align with the inputs passed to [`Model::encode_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub features: Tensor,
    pub d_mean: Tensor,
    pub d_log_std: Tensor,
    pub a_mean: Tensor,
    pub a_log_std: Tensor,
}

/// Mean and log-std rows of a diagonal Gaussian posterior on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mean: Var,
    pub log_std: Var,
}

/// Which member's code fed a reconstruction, and what it should match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconKind {
    /// `G(d_i ⊙ a_i)`, target `f_i`.
    SelfRecon,
    /// `G(d_j ⊙ a_i)` for anchor/positive `i ≠ j`, target `f_i`.
    DSwap,
    /// Any pairing with the negative; no reconstruction target.
    NegativeSwap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconEntry {
    pub d_source: usize,
    pub a_source: usize,
    /// Member whose features are the L1 target, if any.
    pub target: Option<usize>,
    pub kind: ReconKind,
}

/// Outputs of the swap-decoding graph. Row `r` of `recon`, `d_codes` and
/// `a_codes` belongs to `entries[r]`.
#[derive(Clone, Debug)]
pub struct ReconstructionBundle {
    pub entries: Vec<ReconEntry>,
    pub recon: Var,
    pub d_codes: Var,
    pub a_codes: Var,
}

impl ReconstructionBundle {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: ReconKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    /// `(row, target member)` for every entry with an L1 target.
    pub fn targeted(&self) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(r, e)| e.target.map(|t| (r, t)))
            .collect()
    }

    /// Identity of each entry's d-code source.
    pub fn d_source_labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| {
                labels
                    .get(e.d_source)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("no identity for member {}", e.d_source)))
            })
            .collect()
    }
}

/// A visible-anchored triplet and an infrared-anchored triplet decoded together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TsrPair {
    pub visible_anchor: Triplet,
    pub infrared_anchor: Triplet,
}

/// Pairs the k-th visible-anchored triplet with the k-th infrared-anchored one.
pub fn pair_triplets(batch: &TripletBatch, triplets: &[Triplet]) -> Result<Vec<TsrPair>> {
    let by = |m: Modality| -> Vec<Triplet> {
        triplets
            .iter()
            .filter(|t| batch.members[t.anchor].modality == m)
            .copied()
            .collect()
    };
    let (v, i) = (by(Modality::Visible), by(Modality::Infrared));
    if v.len() != i.len() {
        return Err(Error::invalid("unequal numbers of visible- and infrared-anchored triplets"));
    }
    Ok(v.into_iter()
        .zip(i)
        .map(|(visible_anchor, infrared_anchor)| TsrPair {
            visible_anchor,
            infrared_anchor,
        })
        .collect())
}

/// Parameters bound to one tape.
pub struct Graph<'m> {
    model: &'m Model,
    pub tape: Tape,
    vars: Vec<Var>,
}

impl<'m> Graph<'m> {
    /// Parameters in groups where `trainable` holds are recorded as tape
    /// parameters; the rest are constants and receive no gradient.
    pub fn new(model: &'m Model, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .iter()
            .enumerate()
            .map(|(id, p)| {
                if trainable(p.group) {
                    tape.param(id, p.value.clone())
                } else {
                    tape.leaf(p.value.clone())
                }
            })
            .collect();
        Graph { model, tape, vars }
    }

    pub fn frozen(model: &'m Model) -> Self {
        Graph::new(model, |_| false)
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn input(&mut self, rows: &[&[f64]]) -> Result<Var> {
        let owned: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Ok(self.tape.leaf(Tensor::from_rows(&owned)?))
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        self.tape.affine(x, self.vars[l.w], self.vars[l.b])
    }

    pub fn extract(&mut self, x: Var, modality: Modality) -> Var {
        let [l0, l1] = self.model.layout.extractors[modality.index()];
        let h = self.linear(x, l0);
        let h = self.tape.leaky_relu(h, LEAKY_SLOPE);
        let f = self.linear(h, l1);
        self.tape.tanh(f)
    }

    /// Features for mixed-modality inputs, rows in input order.
    pub fn features(&mut self, inputs: &[(&[f64], Modality)]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("empty input batch"));
        }
        let raw_dim = self.model.dims.raw_dim;
        if let Some((x, _)) = inputs.iter().find(|(x, _)| x.len() != raw_dim) {
            return Err(Error::shape(format!("raw sample of length {}, expected {raw_dim}", x.len())));
        }
        let mut parts = Vec::new();
        let mut order = vec![0; inputs.len()];
        let mut offset = 0;
        for m in [Modality::Visible, Modality::Infrared] {
            let idx: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].1 == m).collect();
            if idx.is_empty() {
                continue;
            }
            for (k, &i) in idx.iter().enumerate() {
                order[i] = offset + k;
            }
            offset += idx.len();
            let rows: Vec<&[f64]> = idx.iter().map(|&i| inputs[i].0).collect();
            let x = self.input(&rows)?;
            parts.push(self.extract(x, m));
        }
        let stacked = match parts[..] {
            [one] => one,
            [a, b] => self.tape.concat_rows(a, b),
            _ => unreachable!("two modalities"),
        };
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return Ok(stacked);
        }
        Ok(self.tape.select_rows(stacked, &order))
    }

    fn encode(&mut self, f: Var, enc: Encoder, max_pool: bool) -> Posterior {
        let pool = self.model.dims.pool;
        let mut h = f;
        for l in enc.trunk {
            h = self.linear(h, l);
            h = self.tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let m = self.linear(h, enc.mean);
        let s = self.linear(h, enc.log_std);
        let (m, s) = if max_pool {
            (self.tape.group_max(m, pool), self.tape.group_max(s, pool))
        } else {
            (self.tape.group_mean(m, pool), self.tape.group_mean(s, pool))
        };
        Posterior {
            mean: m,
            log_std: self.bound_log_std(s),
        }
    }

    /// Smoothly maps a raw head output into `(LOG_STD_MIN, LOG_STD_MAX)`.
    fn bound_log_std(&mut self, s: Var) -> Var {
        let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
        let mid = 0.5 * (LOG_STD_MAX + LOG_STD_MIN);
        let t = self.tape.tanh(s);
        let t = self.tape.scale(t, half);
        self.tape.add_scalar(t, mid)
    }

    /// Shared across modalities; heads reduce by max over groups.
    pub fn encode_idi(&mut self, f: Var) -> Posterior {
        let enc = self.model.layout.idi;
        self.encode(f, enc, true)
    }

    /// Shared across modalities; heads reduce by mean over groups.
    pub fn encode_iai(&mut self, f: Var) -> Posterior {
        let enc = self.model.layout.iai;
        self.encode(f, enc, false)
    }

    /// `μ + σ ⊙ ε` with `ε` a constant.
    pub fn sample(&mut self, p: Posterior, eps: Tensor) -> Var {
        let e = self.tape.leaf(eps);
        reparameterize_var(&mut self.tape, p.mean, p.log_std, e)
    }

    pub fn decode(&mut self, d: Var, a: Var) -> Var {
        let [l0, l1] = self.model.layout.decoder;
        let z = self.tape.concat_cols(d, a);
        let h = self.linear(z, l0);
        let h = self.tape.leaky_relu(h, LEAKY_SLOPE);
        let out = self.linear(h, l1);
        self.tape.tanh(out)
    }

    pub fn classify(&mut self, code: Var) -> Var {
        let l = self.model.layout.classifier;
        self.linear(code, l)
    }

    pub fn prior_means(&self) -> Var {
        self.vars[self.model.layout.prior_means]
    }

    pub fn prior_margins(&self) -> Var {
        self.vars[self.model.layout.prior_margins]
    }

    /// Decodes every `(d_source, a_source)` pairing within each triplet of
    /// each pair: three self-reconstructions, two anchor/positive d-swaps
    /// and four negative pairings per direction.
    ///
    /// `d_codes` and `a_codes` hold one row per batch member.
    pub fn tsr_forward(
        &mut self,
        batch: &TripletBatch,
        pairs: &[TsrPair],
        d_codes: Var,
        a_codes: Var,
    ) -> Result<ReconstructionBundle> {
        if pairs.is_empty() {
            return Err(Error::invalid("no triplets to reconstruct"));
        }
        let mut entries = Vec::with_capacity(pairs.len() * 18);
        for pair in pairs {
            for (t, m) in [
                (pair.visible_anchor, Modality::Visible),
                (pair.infrared_anchor, Modality::Infrared),
            ] {
                batch.check_triplet(&t)?;
                if batch.members[t.anchor].modality != m {
                    return Err(Error::invalid("pair must hold one triplet per anchor modality"));
                }
                entries.extend(enumerate_swaps(&t));
            }
        }
        let d_src: Vec<usize> = entries.iter().map(|e| e.d_source).collect();
        let a_src: Vec<usize> = entries.iter().map(|e| e.a_source).collect();
        let d = self.tape.select_rows(d_codes, &d_src);
        let a = self.tape.select_rows(a_codes, &a_src);
        let recon = self.decode(d, a);
        Ok(ReconstructionBundle {
            entries,
            recon,
            d_codes: d,
            a_codes: a,
        })
    }
}

fn enumerate_swaps(t: &Triplet) -> Vec<ReconEntry> {
    let roles = [t.anchor, t.positive, t.negative];
    let mut out = Vec::with_capacity(9);
    for (ri, &i) in roles.iter().enumerate() {
        for (rj, &j) in roles.iter().enumerate() {
            let (kind, target) = if ri == rj {
                (ReconKind::SelfRecon, Some(i))
            } else if ri < 2 && rj < 2 {
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

/// Standard-normal noise rows for reparameterized sampling.
pub fn noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("noise shape")
}
