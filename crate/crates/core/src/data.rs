//! Synthetic two-modality identity data and mini-batch/triplet organization.
//!
//! Each identity owns a shared factor `s_y`. A sample of modality `m` is
//!
//! ```text
//! raw = tanh(T_m (s_y + jitter)) + nuisance_scale · tanh(U_m n) + noise
//! ```
//!
//! with fixed random maps `T_m`, `U_m` per modality and a per-sample
//! nuisance factor `n`. Ground-truth factors are kept apart from the
//! observations handed to training code.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VRDS";
pub const FORMAT_VERSION: u32 = 1;
const JITTER_STD: f64 = 0.05;

/// Identities per mini-batch.
pub const BATCH_IDENTITIES: usize = 4;
/// Visible/infrared pairs per identity in a mini-batch.
pub const PAIRS_PER_IDENTITY: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Visible),
            1 => Some(Modality::Infrared),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub samples_per_identity_per_modality: usize,
    pub identity_dim: usize,
    pub nuisance_dim: usize,
    pub raw_dim: usize,
    pub nuisance_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_identities: 16,
            samples_per_identity_per_modality: 12,
            identity_dim: 8,
            nuisance_dim: 4,
            raw_dim: 32,
            nuisance_scale: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_identities", self.n_identities),
            ("samples_per_identity_per_modality", self.samples_per_identity_per_modality),
            ("identity_dim", self.identity_dim),
            ("nuisance_dim", self.nuisance_dim),
            ("raw_dim", self.raw_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_identities < 2 {
            return Err(Error::Config("need at least two identities for a train/test split".into()));
        }
        for (name, v) in [("nuisance_scale", self.nuisance_scale), ("noise_std", self.noise_std)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative finite number")));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_identities * self.samples_per_identity_per_modality * 2
    }
}

/// What the model sees for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub identity: usize,
    pub modality: Modality,
    pub raw: Vec<f64>,
}

/// Generating factors for one sample; read only by evaluation probes.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub shared: Vec<f64>,
    pub jitter: Vec<f64>,
    pub nuisance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    config: SyntheticConfig,
    observations: Vec<Observation>,
    truth: Vec<GroundTruth>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn mat_vec_tanh<'a>(m: &'a [f64], cols: usize, v: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    m.chunks(cols)
        .map(move |row| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().tanh())
}

/// Builds the dataset for `config`, seeded by `seed`.
pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut config = config.clone();
    config.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, k, q) = (config.raw_dim, config.identity_dim, config.nuisance_dim);
    let shared_maps = [gaussian_matrix(&mut rng, r, k), gaussian_matrix(&mut rng, r, k)];
    let nuisance_maps = [gaussian_matrix(&mut rng, r, q), gaussian_matrix(&mut rng, r, q)];
    let factors: Vec<Vec<f64>> = (0..config.n_identities)
        .map(|_| gaussian_vec(&mut rng, k, 1.0))
        .collect();

    let mut observations = Vec::with_capacity(config.n_samples());
    let mut truth = Vec::with_capacity(config.n_samples());
    for (identity, s) in factors.iter().enumerate() {
        for modality in [Modality::Visible, Modality::Infrared] {
            let m = modality.index();
            for _ in 0..config.samples_per_identity_per_modality {
                let jitter = gaussian_vec(&mut rng, k, JITTER_STD);
                let nuisance = gaussian_vec(&mut rng, q, 1.0);
                let content: Vec<f64> = s.iter().zip(&jitter).map(|(a, b)| a + b).collect();
                let raw: Vec<f64> = mat_vec_tanh(&shared_maps[m], k, &content)
                    .zip(mat_vec_tanh(&nuisance_maps[m], q, &nuisance))
                    .map(|(a, b)| a + config.nuisance_scale * b)
                    .map(|v| v + config.noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                observations.push(Observation {
                    identity,
                    modality,
                    raw,
                });
                truth.push(GroundTruth {
                    shared: s.clone(),
                    jitter,
                    nuisance,
                });
            }
        }
    }
    Ok(Dataset {
        config,
        observations,
        truth,
    })
}

impl Dataset {
    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn ground_truth(&self) -> &[GroundTruth] {
        &self.truth
    }

    pub fn raw_dim(&self) -> usize {
        self.config.raw_dim
    }

    /// Identities `[0, n/2)` train; the rest are held out.
    pub fn split(&self) -> IdentitySplit {
        let n = self.config.n_identities;
        let n_train = n / 2;
        IdentitySplit {
            train: (0..n_train).collect(),
            test: (n_train..n).collect(),
        }
    }

    pub fn indices_of(&self, identities: &[usize]) -> Vec<usize> {
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, o)| identities.contains(&o.identity))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        let file = fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            c.n_identities,
            c.samples_per_identity_per_modality,
            c.identity_dim,
            c.nuisance_dim,
            c.raw_dim,
        ] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.extend_from_slice(&c.nuisance_scale.to_le_bytes());
        b.extend_from_slice(&c.noise_std.to_le_bytes());
        b.extend_from_slice(&c.seed.to_le_bytes());
        b.extend_from_slice(&(self.observations.len() as u32).to_le_bytes());
        for (o, t) in self.observations.iter().zip(&self.truth) {
            b.extend_from_slice(&(o.identity as u32).to_le_bytes());
            b.push(o.modality.index() as u8);
            for v in o.raw.iter().chain(&t.shared).chain(&t.jitter).chain(&t.nuisance) {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a dataset file".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported dataset version {version}"));
        }
        let config = SyntheticConfig {
            n_identities: r.u32()? as usize,
            samples_per_identity_per_modality: r.u32()? as usize,
            identity_dim: r.u32()? as usize,
            nuisance_dim: r.u32()? as usize,
            raw_dim: r.u32()? as usize,
            nuisance_scale: r.f64()?,
            noise_std: r.f64()?,
            seed: r.u64()?,
        };
        config.validate().map_err(|e| e.to_string())?;
        let n = r.u32()? as usize;
        if n != config.n_samples() {
            return Err(format!("header declares {n} samples, config implies {}", config.n_samples()));
        }
        let mut observations = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        for _ in 0..n {
            let identity = r.u32()? as usize;
            if identity >= config.n_identities {
                return Err(format!("identity {identity} out of range"));
            }
            let modality = Modality::from_byte(r.take(1)?[0]).ok_or("bad modality byte")?;
            let raw = r.f64s(config.raw_dim)?;
            let shared = r.f64s(config.identity_dim)?;
            let jitter = r.f64s(config.identity_dim)?;
            let nuisance = r.f64s(config.nuisance_dim)?;
            observations.push(Observation {
                identity,
                modality,
                raw,
            });
            truth.push(GroundTruth {
                shared,
                jitter,
                nuisance,
            });
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after last record".into());
        }
        Ok(Dataset {
            config,
            observations,
            truth,
        })
    }

    /// CSV with columns `id, modality, f_0..f_{raw_dim-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        let header: Vec<String> = ["id".to_string(), "modality".to_string()]
            .into_iter()
            .chain((0..self.config.raw_dim).map(|i| format!("f_{i}")))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for o in &self.observations {
            let vals: Vec<String> = o.raw.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{},{},{}", o.identity, o.modality.name(), vals.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err("truncated file".into());
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

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentitySplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One member of a mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Member {
    /// Index into the dataset's observations.
    pub sample: usize,
    pub identity: usize,
    pub modality: Modality,
}

/// `P` identities × `K` visible/infrared pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub members: Vec<Member>,
}

/// Indices into [`TripletBatch::members`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.identity).collect()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.members.iter().filter(|m| m.modality == modality).count()
    }

    /// Checks the cross-modality role rules for one triplet.
    pub fn check_triplet(&self, t: &Triplet) -> Result<()> {
        let get = |i: usize| {
            self.members
                .get(i)
                .ok_or_else(|| Error::invalid(format!("member {i} out of range")))
        };
        let (a, p, n) = (get(t.anchor)?, get(t.positive)?, get(t.negative)?);
        if a.identity != p.identity || a.modality == p.modality {
            return Err(Error::invalid("positive must share identity and differ in modality"));
        }
        if a.identity == n.identity || a.modality == n.modality {
            return Err(Error::invalid("negative must differ in identity and modality"));
        }
        Ok(())
    }
}

/// Draws `P = 4` identities and `K = 4` samples per modality for each from
/// `identities`.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, identities: &[usize], rng: &mut R) -> Result<TripletBatch> {
    if identities.len() < BATCH_IDENTITIES {
        return Err(Error::invalid(format!(
            "need {BATCH_IDENTITIES} identities, have {}",
            identities.len()
        )));
    }
    let mut by_key: std::collections::BTreeMap<(usize, Modality), Vec<usize>> = Default::default();
    for (i, o) in dataset.observations().iter().enumerate() {
        by_key.entry((o.identity, o.modality)).or_default().push(i);
    }
    let chosen: Vec<usize> = identities
        .choose_multiple(rng, BATCH_IDENTITIES)
        .copied()
        .collect();
    let mut members = Vec::with_capacity(BATCH_IDENTITIES * PAIRS_PER_IDENTITY * 2);
    for &y in &chosen {
        for modality in [Modality::Visible, Modality::Infrared] {
            let pool = by_key.get(&(y, modality)).map(Vec::as_slice).unwrap_or(&[]);
            if pool.len() < PAIRS_PER_IDENTITY {
                return Err(Error::invalid(format!(
                    "identity {y} has {} {} samples, need {PAIRS_PER_IDENTITY}",
                    pool.len(),
                    modality.name()
                )));
            }
            for &sample in pool.choose_multiple(rng, PAIRS_PER_IDENTITY) {
                members.push(Member {
                    sample,
                    identity: y,
                    modality,
                });
            }
        }
    }
    Ok(TripletBatch { members })
}

/// Seeded form of [`sample_batch`].
pub fn sample_batch_seeded(dataset: &Dataset, identities: &[usize], seed: u64) -> Result<TripletBatch> {
    sample_batch(dataset, identities, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One triplet per member: the member anchors, with a uniformly drawn
/// same-identity positive and different-identity negative from the other
/// modality.
pub fn build_triplets<R: Rng + ?Sized>(batch: &TripletBatch, rng: &mut R) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(batch.len());
    for (ai, a) in batch.members.iter().enumerate() {
        let other = a.modality.other();
        let positives: Vec<usize> = (0..batch.len())
            .filter(|&j| batch.members[j].modality == other && batch.members[j].identity == a.identity)
            .collect();
        let negatives: Vec<usize> = (0..batch.len())
            .filter(|&j| batch.members[j].modality == other && batch.members[j].identity != a.identity)
            .collect();
        let (Some(&positive), Some(&negative)) = (positives.choose(rng), negatives.choose(rng)) else {
            return Err(Error::invalid(format!("member {ai} has no valid positive or negative")));
        };
        out.push(Triplet {
            anchor: ai,
            positive,
            negative,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate(&SyntheticConfig::default(), 17).unwrap()
    }

    #[test]
    fn default_sample_count() {
        let ds = small();
        assert_eq!(ds.len(), 384);
        assert_eq!(ds.config().seed, 17);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SyntheticConfig {
            raw_dim: 0,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::Config(_))));
        let cfg = SyntheticConfig {
            noise_std: -1.0,
            ..Default::default()
        };
        assert!(generate(&cfg, 1).is_err());
    }

    #[test]
    fn noiseless_pairs_share_content() {
        let cfg = SyntheticConfig {
            nuisance_scale: 0.0,
            noise_std: 0.0,
            ..Default::default()
        };
        let ds = generate(&cfg, 3).unwrap();
        let obs = ds.observations();
        let truth = ds.ground_truth();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if obs[i].identity == obs[j].identity && obs[i].modality != obs[j].modality {
                    assert_eq!(truth[i].shared, truth[j].shared);
                }
            }
        }
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let ds = small();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn split_is_disjoint() {
        let s = small().split();
        assert_eq!(s.train.len() + s.test.len(), 16);
        assert!(s.train.iter().all(|y| !s.test.contains(y)));
    }

    #[test]
    fn batch_composition() {
        let ds = small();
        let train = ds.split().train;
        let b = sample_batch_seeded(&ds, &train, 5).unwrap();
        assert_eq!(b.len(), 32);
        assert_eq!(b.count(Modality::Visible), 16);
        assert_eq!(b.count(Modality::Infrared), 16);
        let mut ids = b.labels();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|y| train.contains(y)));
        assert_eq!(b, sample_batch_seeded(&ds, &train, 5).unwrap());
        assert!(sample_batch_seeded(&ds, &train[..3], 5).is_err());
    }

    #[test]
    fn triplets_follow_role_rules() {
        let ds = small();
        let train = ds.split().train;
        let b = sample_batch_seeded(&ds, &train, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = build_triplets(&b, &mut rng).unwrap();
        assert_eq!(t.len(), 32);
        for tr in &t {
            b.check_triplet(tr).unwrap();
        }
        let again = build_triplets(&b, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn triplets_need_a_negative() {
        let ds = small();
        let b = sample_batch_seeded(&ds, &ds.split().train, 2).unwrap();
        let single = TripletBatch {
            members: b.members.iter().filter(|m| m.identity == b.members[0].identity).copied().collect(),
        };
        assert!(build_triplets(&single, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
