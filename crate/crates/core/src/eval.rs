//! Cross-modality retrieval metrics, distance statistics, linear probes and
//! collapse diagnostics.
//!
//! Retrieval features are L2-normalized IDI posterior means. Rankings sort
//! by ascending distance with ties broken by gallery index.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality};
use crate::distributions::kl_standard_paper;
use crate::distributions::DiagonalGaussian;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Tape, Tensor};
use crate::priors::MoGPrior;
use crate::trainer::write_atomic;

pub const HISTOGRAM_BINS: usize = 64;
pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.1;
pub const GALLERY_DRAWS: usize = 10;
pub const COLLAPSE_MIN_DISTANCE: f64 = 1e-3;
pub const COLLAPSE_MIN_NEAREST: f64 = 0.5;

/// Rows are queries, columns gallery items.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n_query: usize,
    n_gallery: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n_query: usize, n_gallery: usize, values: Vec<f64>) -> Result<Self> {
        if n_query == 0 || n_gallery == 0 || values.len() != n_query * n_gallery {
            return Err(Error::shape(format!(
                "{} distances for a {n_query}×{n_gallery} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("distances must be finite and nonnegative"));
        }
        Ok(DistanceMatrix {
            n_query,
            n_gallery,
            values,
        })
    }

    /// L2 distances between normalized rows.
    pub fn between(query: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Self> {
        let q = normalized(query)?;
        let g = normalized(gallery)?;
        let values = q
            .iter()
            .flat_map(|a| g.iter().map(move |b| l2(a, b)))
            .collect();
        DistanceMatrix::new(q.len(), g.len(), values)
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_gallery(&self) -> usize {
        self.n_gallery
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.n_gallery..(q + 1) * self.n_gallery]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        DistanceMatrix::new(self.n_query, self.n_gallery, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Gallery indices for query `q`, nearest first.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut idx: Vec<usize> = (0..self.n_gallery).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        idx
    }

    /// Relevance flags in ranked order for each query.
    fn relevance(&self, query_labels: &[usize], gallery_labels: &[usize]) -> Result<Vec<Vec<bool>>> {
        if query_labels.len() != self.n_query || gallery_labels.len() != self.n_gallery {
            return Err(Error::shape("label counts do not match the distance matrix"));
        }
        (0..self.n_query)
            .map(|q| {
                let rel: Vec<bool> = self
                    .ranking(q)
                    .into_iter()
                    .map(|g| gallery_labels[g] == query_labels[q])
                    .collect();
                if !rel.contains(&true) {
                    return Err(Error::invalid(format!("query {q} has no match in the gallery")));
                }
                Ok(rel)
            })
            .collect()
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn normalized(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::invalid("cannot normalize a zero or non-finite embedding"));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Fraction of queries with a true match among the `k` nearest items.
pub fn cmc(dist: &DistanceMatrix, query_labels: &[usize], gallery_labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    let rel = dist.relevance(query_labels, gallery_labels)?;
    let hits = rel.iter().filter(|r| r.iter().take(k).any(|&x| x)).count();
    Ok(hits as f64 / rel.len() as f64)
}

/// Mean over queries of average precision.
pub fn mean_ap(dist: &DistanceMatrix, query_labels: &[usize], gallery_labels: &[usize]) -> Result<f64> {
    let rel = dist.relevance(query_labels, gallery_labels)?;
    let total: f64 = rel.iter().map(|r| average_precision(r)).sum();
    Ok(total / rel.len() as f64)
}

fn average_precision(ranked: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in ranked.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / hits as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_left: Vec<f64>,
    pub intra: Vec<u64>,
    pub inter: Vec<u64>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,count_intra,count_inter\n");
        for i in 0..self.bin_left.len() {
            let _ = writeln!(s, "{},{},{}", self.bin_left[i], self.intra[i], self.inter[i]);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub intra_mean: f64,
    pub intra_std: f64,
    pub inter_mean: f64,
    pub inter_std: f64,
    /// `inter_mean − intra_mean`.
    pub gap: f64,
    pub n_intra: usize,
    pub n_inter: usize,
    pub histogram: Histogram,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Statistics of normalized L2 distances over all visible/infrared pairs,
/// split by whether the identities agree.
pub fn distance_stats(embeddings: &[Vec<f64>], labels: &[usize], modalities: &[Modality]) -> Result<DistanceStats> {
    if embeddings.len() != labels.len() || labels.len() != modalities.len() {
        return Err(Error::shape("embeddings, labels and modalities differ in length"));
    }
    let unit = normalized(embeddings)?;
    let vis: Vec<usize> = (0..unit.len()).filter(|&i| modalities[i] == Modality::Visible).collect();
    let ir: Vec<usize> = (0..unit.len()).filter(|&i| modalities[i] == Modality::Infrared).collect();
    let width = 2.0 / HISTOGRAM_BINS as f64;
    let mut histogram = Histogram {
        bin_left: (0..HISTOGRAM_BINS).map(|b| b as f64 * width).collect(),
        intra: vec![0; HISTOGRAM_BINS],
        inter: vec![0; HISTOGRAM_BINS],
    };
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for &i in &vis {
        for &j in &ir {
            let d = l2(&unit[i], &unit[j]);
            let bin = ((d / width) as usize).min(HISTOGRAM_BINS - 1);
            if labels[i] == labels[j] {
                intra.push(d);
                histogram.intra[bin] += 1;
            } else {
                inter.push(d);
                histogram.inter[bin] += 1;
            }
        }
    }
    if intra.is_empty() || inter.is_empty() {
        return Err(Error::invalid("need both same-identity and different-identity cross-modality pairs"));
    }
    let (intra_mean, intra_std) = mean_std(&intra);
    let (inter_mean, inter_std) = mean_std(&inter);
    Ok(DistanceStats {
        intra_mean,
        intra_std,
        inter_mean,
        inter_std,
        gap: inter_mean - intra_mean,
        n_intra: intra.len(),
        n_inter: inter.len(),
        histogram,
    })
}

/// Held-out accuracy of a softmax-regression probe trained by full-batch
/// gradient descent on standardized features.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::shape("probe inputs and labels must be non-empty and aligned"));
    }
    let mut classes: Vec<usize> = train_y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    let class_index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = train_x[0].len();
    let n = train_x.len() as f64;
    let mut mu = vec![0.0; k];
    for x in train_x {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; k];
    for x in train_x {
        for ((s, v), m) in sd.iter_mut().zip(x).zip(&mu) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|s| if *s > 1e-24 { s.sqrt() } else { 1.0 }).collect();
    let standardize = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let z: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        Tensor::from_rows(&z)
    };
    let xtr = standardize(train_x)?;
    let ytr: Vec<usize> = train_y.iter().map(|y| class_index[y]).collect();
    let c = classes.len();
    let mut w = Tensor::zeros(&[k, c]);
    let mut b = Tensor::zeros(&[c]);
    for _ in 0..PROBE_STEPS {
        let mut t = Tape::new();
        let x = t.leaf(xtr.clone());
        let wv = t.param(0, w.clone());
        let bv = t.param(1, b.clone());
        let logits = t.affine(x, wv, bv);
        let ce = t.softmax_cross_entropy(logits, &ytr);
        let loss = t.mean(ce);
        let g = t.backward(loss)?;
        for (p, id) in [(&mut w, 0), (&mut b, 1)] {
            let grad = g.param(id).expect("probe parameter");
            for (pv, gv) in p.data_mut().iter_mut().zip(grad.data()) {
                *pv -= PROBE_LR * gv;
            }
        }
    }
    let xte = standardize(test_x)?;
    let mut correct = 0;
    for (i, y) in test_y.iter().enumerate() {
        let row = xte.row(i);
        let scores: Vec<f64> = (0..c)
            .map(|j| b.data()[j] + (0..k).map(|p| row[p] * w.data()[p * c + j]).sum::<f64>())
            .collect();
        let best = (0..c).fold(0, |bi, j| if scores[j] > scores[bi] { j } else { bi });
        if classes[best] == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_y.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub idi_accuracy: f64,
    pub iai_accuracy: f64,
    pub chance: f64,
}

/// Within each identity, samples alternate between probe-training and
/// held-out sets. Returns (train, held-out, number of identities).
fn alternate_split(identities: &[usize]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &y) in identities.iter().enumerate() {
        let k = seen.entry(y).or_insert(0);
        if *k % 2 == 0 {
            train.push(i);
        } else {
            test.push(i);
        }
        *k += 1;
    }
    if seen.len() < 2 {
        return Err(Error::invalid("probe needs at least two identities"));
    }
    Ok((train, test, seen.len()))
}

fn split_probe(x: &[Vec<f64>], identities: &[usize], train: &[usize], test: &[usize]) -> Result<f64> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| x[i].clone()).collect::<Vec<_>>();
    let labels = |idx: &[usize]| idx.iter().map(|&i| identities[i]).collect::<Vec<_>>();
    linear_probe(&pick(train), &labels(train), &pick(test), &labels(test))
}

/// Probes both code types for identity on an alternating split.
pub fn disentanglement_probe(d_means: &[Vec<f64>], a_means: &[Vec<f64>], identities: &[usize]) -> Result<ProbeResult> {
    if d_means.len() != identities.len() || a_means.len() != identities.len() {
        return Err(Error::shape("codes and identities differ in length"));
    }
    let (train, test, n) = alternate_split(identities)?;
    Ok(ProbeResult {
        idi_accuracy: split_probe(d_means, identities, &train, &test)?,
        iai_accuracy: split_probe(a_means, identities, &train, &test)?,
        chance: 1.0 / n as f64,
    })
}

/// How much identity a linear probe recovers from a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationProbe {
    /// Probe on the observed raw vectors.
    pub raw_accuracy: f64,
    /// Probe on the pre-map shared content `s + jitter`.
    pub shared_accuracy: f64,
    pub chance: f64,
}

/// Identity probes over every sample of a dataset, on raw vectors and on
/// the ground-truth shared content.
pub fn generation_probe(dataset: &Dataset) -> Result<GenerationProbe> {
    let identities: Vec<usize> = dataset.observations().iter().map(|o| o.identity).collect();
    let raw: Vec<Vec<f64>> = dataset.observations().iter().map(|o| o.raw.clone()).collect();
    let shared: Vec<Vec<f64>> = dataset
        .ground_truth()
        .iter()
        .map(|g| g.shared.iter().zip(&g.jitter).map(|(s, j)| s + j).collect())
        .collect();
    let (train, test, n) = alternate_split(&identities)?;
    Ok(GenerationProbe {
        raw_accuracy: split_probe(&raw, &identities, &train, &test)?,
        shared_accuracy: split_probe(&shared, &identities, &train, &test)?,
        chance: 1.0 / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub min_mean_distance: f64,
    /// Mean over posteriors and dimensions of the IAI divergence from the
    /// standard normal.
    pub iai_kl_per_dim: f64,
    /// Fraction of identities whose posterior-mean centroid is nearest to
    /// their own prior mean.
    pub nearest_mean_fraction: f64,
    pub collapsed: bool,
}

/// `classes[i]` is the prior component of `d_means[i]`.
pub fn collapse_diagnostic(
    prior: &MoGPrior,
    d_means: &[Vec<f64>],
    classes: &[usize],
    iai: &[DiagonalGaussian],
) -> Result<CollapseReport> {
    if d_means.len() != classes.len() {
        return Err(Error::shape("codes and classes differ in length"));
    }
    let n = prior.n_identities();
    let mut min_mean_distance = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            min_mean_distance = min_mean_distance.min(l2(prior.mean_of(i), prior.mean_of(j)));
        }
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (d, &c) in d_means.iter().zip(classes) {
        if c >= n {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        let e = sums.entry(c).or_insert_with(|| (vec![0.0; d.len()], 0));
        for (s, v) in e.0.iter_mut().zip(d) {
            *s += v;
        }
        e.1 += 1;
    }
    let nearest_ok = sums
        .iter()
        .filter(|(&c, (s, k))| {
            let centroid: Vec<f64> = s.iter().map(|v| v / *k as f64).collect();
            let best = (0..n).fold(0, |b, j| {
                if l2(&centroid, prior.mean_of(j)) < l2(&centroid, prior.mean_of(b)) {
                    j
                } else {
                    b
                }
            });
            best == c
        })
        .count();
    let nearest_mean_fraction = if sums.is_empty() {
        0.0
    } else {
        nearest_ok as f64 / sums.len() as f64
    };
    let dims: usize = iai.iter().map(|g| g.dim()).sum();
    let iai_kl_per_dim = if dims == 0 {
        0.0
    } else {
        iai.iter().map(kl_standard_paper).sum::<f64>() / dims as f64
    };
    Ok(CollapseReport {
        min_mean_distance,
        iai_kl_per_dim,
        nearest_mean_fraction,
        collapsed: min_mean_distance < COLLAPSE_MIN_DISTANCE || nearest_mean_fraction < COLLAPSE_MIN_NEAREST,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub rank1: f64,
    pub rank10: f64,
    pub map: f64,
    pub draws: usize,
    pub n_query: usize,
    pub n_gallery: usize,
}

/// Infrared queries against a one-visible-per-identity gallery, averaged
/// over [`GALLERY_DRAWS`] random galleries.
pub fn single_shot_protocol(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    modalities: &[Modality],
    seed: u64,
) -> Result<RetrievalReport> {
    let queries: Vec<usize> = (0..labels.len()).filter(|&i| modalities[i] == Modality::Infrared).collect();
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in (0..labels.len()).filter(|&i| modalities[i] == Modality::Visible) {
        pools.entry(labels[i]).or_default().push(i);
    }
    if queries.is_empty() || pools.is_empty() {
        return Err(Error::invalid("protocol needs infrared queries and a visible gallery"));
    }
    let q_emb: Vec<Vec<f64>> = queries.iter().map(|&i| embeddings[i].clone()).collect();
    let q_lab: Vec<usize> = queries.iter().map(|&i| labels[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut r1, mut r10, mut map) = (0.0, 0.0, 0.0);
    for _ in 0..GALLERY_DRAWS {
        let gallery: Vec<usize> = pools.values().map(|p| *p.choose(&mut rng).expect("non-empty pool")).collect();
        let g_emb: Vec<Vec<f64>> = gallery.iter().map(|&i| embeddings[i].clone()).collect();
        let g_lab: Vec<usize> = gallery.iter().map(|&i| labels[i]).collect();
        let dist = DistanceMatrix::between(&q_emb, &g_emb)?;
        r1 += cmc(&dist, &q_lab, &g_lab, 1)?;
        r10 += cmc(&dist, &q_lab, &g_lab, 10)?;
        map += mean_ap(&dist, &q_lab, &g_lab)?;
    }
    let n = GALLERY_DRAWS as f64;
    Ok(RetrievalReport {
        rank1: r1 / n,
        rank10: r10 / n,
        map: map / n,
        draws: GALLERY_DRAWS,
        n_query: queries.len(),
        n_gallery: pools.len(),
    })
}

/// Fraction of cross-identity swaps `G(d_j ⊙ a_i)` that the classifier,
/// applied to the re-encoded IDI mean, assigns to `d_j`'s identity.
/// `samples` pairs each feature vector with its classifier class.
pub fn swap_consistency(model: &Model, samples: &[(Vec<f64>, usize)], max_pairs: usize) -> Result<f64> {
    let codes: Vec<(Vec<f64>, Vec<f64>, usize)> = samples
        .iter()
        .map(|(f, c)| Ok((model.encode_idi(f)?.mean().to_vec(), model.encode_iai(f)?.mean().to_vec(), *c)))
        .collect::<Result<_>>()?;
    let mut total = 0usize;
    let mut agree = 0usize;
    'outer: for (i, (_, a_i, c_i)) in codes.iter().enumerate() {
        for (j, (d_j, _, c_j)) in codes.iter().enumerate() {
            if i == j || c_i == c_j {
                continue;
            }
            if total >= max_pairs {
                break 'outer;
            }
            let recon = model.decode(d_j, a_i)?;
            let logits = model.classify(model.encode_idi(&recon)?.mean())?;
            let pred = (0..logits.len()).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
            total += 1;
            if pred == *c_j {
                agree += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no cross-identity pairs for the swap check"));
    }
    Ok(agree as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalReport,
    pub distance_stats: DistanceStats,
    pub probe: ProbeResult,
    pub collapse: CollapseReport,
    pub swap_consistency: f64,
}

/// One row per held-out sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub identities: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub d_means: Vec<Vec<f64>>,
    pub a_means: Vec<Vec<f64>>,
}

impl Embeddings {
    pub fn to_csv(&self) -> String {
        let dim = self.d_means.first().map_or(0, Vec::len);
        let mut s = String::from("id,modality");
        for i in 0..dim {
            let _ = write!(s, ",d_{i}");
        }
        s.push('\n');
        for ((y, m), d) in self.identities.iter().zip(&self.modalities).zip(&self.d_means) {
            let _ = write!(s, "{y},{}", m.name());
            for v in d {
                let _ = write!(s, ",{v:.17e}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn embed(model: &Model, dataset: &Dataset, identities: &[usize]) -> Result<Embeddings> {
    let idx = dataset.indices_of(identities);
    let obs = dataset.observations();
    let inputs: Vec<(&[f64], Modality)> = idx.iter().map(|&i| (obs[i].raw.as_slice(), obs[i].modality)).collect();
    let enc = model.encode_batch(&inputs)?;
    let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    Ok(Embeddings {
        identities: idx.iter().map(|&i| obs[i].identity).collect(),
        modalities: idx.iter().map(|&i| obs[i].modality).collect(),
        d_means: rows(&enc.d_mean),
        a_means: rows(&enc.a_mean),
    })
}

/// Pairs examined by the swap-consistency check.
pub const SWAP_PAIRS: usize = 2000;

/// Full evaluation: retrieval, distances and probes on held-out
/// identities; collapse and swap checks on training identities.
pub fn evaluate(model: &Model, dataset: &Dataset, seed: u64) -> Result<(EvalReport, Embeddings)> {
    let split = dataset.split();
    if split.train.len() != model.dims().n_identities {
        return Err(Error::invalid(format!(
            "model has {} identity classes, dataset trains on {}",
            model.dims().n_identities,
            split.train.len()
        )));
    }
    if dataset.raw_dim() != model.dims().raw_dim {
        return Err(Error::invalid("dataset and model disagree on the input width"));
    }
    let test = embed(model, dataset, &split.test)?;
    let retrieval = single_shot_protocol(&test.d_means, &test.identities, &test.modalities, seed)?;
    let distance_stats = distance_stats(&test.d_means, &test.identities, &test.modalities)?;
    let probe = disentanglement_probe(&test.d_means, &test.a_means, &test.identities)?;

    let idx = dataset.indices_of(&split.train);
    let obs = dataset.observations();
    let inputs: Vec<(&[f64], Modality)> = idx.iter().map(|&i| (obs[i].raw.as_slice(), obs[i].modality)).collect();
    let enc = model.encode_batch(&inputs)?;
    let class_of = |y: usize| split.train.iter().position(|&t| t == y).expect("training identity");
    let classes: Vec<usize> = idx.iter().map(|&i| class_of(obs[i].identity)).collect();
    let d_means: Vec<Vec<f64>> = (0..idx.len()).map(|r| enc.d_mean.row(r).to_vec()).collect();
    let iai: Vec<DiagonalGaussian> = (0..idx.len())
        .map(|r| DiagonalGaussian::new(enc.a_mean.row(r).to_vec(), enc.a_log_std.row(r).to_vec()))
        .collect::<Result<_>>()?;
    let collapse = collapse_diagnostic(&model.prior(), &d_means, &classes, &iai)?;
    let features: Vec<(Vec<f64>, usize)> = (0..idx.len())
        .map(|r| (enc.features.row(r).to_vec(), classes[r]))
        .collect();
    let mut shuffled = features;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let swap_consistency = swap_consistency(model, &shuffled[..shuffled.len().min(64)], SWAP_PAIRS)?;
    Ok((
        EvalReport {
            retrieval,
            distance_stats,
            probe,
            collapse,
            swap_consistency,
        },
        test,
    ))
}

/// Writes `metrics.json`, `histogram.csv` and `embeddings.csv` into `dir`.
pub fn write_reports(dir: &Path, report: &EvalReport, embeddings: &Embeddings) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join("metrics.json"), json.as_bytes())?;
    write_atomic(&dir.join("histogram.csv"), report.distance_stats.histogram.to_csv().as_bytes())?;
    write_atomic(&dir.join("embeddings.csv"), embeddings.to_csv().as_bytes())
}
