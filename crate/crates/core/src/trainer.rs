//! Cluster-contrastive training of a linear projection against a
//! momentum-updated memory bank holding one unit vector per pseudo-label.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("label {label} is not in the memory bank ({size} entries)")]
    UnknownLabel { label: usize, size: usize },
    #[error("pseudo-label {0} has a zero mean embedding")]
    ZeroMean(usize),
    #[error("no clusters to build a memory bank from")]
    EmptyBank,
    #[error("embedding of sample {0} has zero norm")]
    ZeroEmbedding(usize),
    #[error("invalid hyper-parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = TrainerError> = std::result::Result<T, E>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    vectors: Vec<Vec<f64>>,
    momentum: f64,
    temperature: f64,
}

impl MemoryBank {
    pub fn new(vectors: Vec<Vec<f64>>, momentum: f64, temperature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(TrainerError::InvalidParameter(
                "momentum must lie in [0, 1]",
            ));
        }
        if !(temperature > 0.0) {
            return Err(TrainerError::InvalidParameter(
                "temperature must be positive",
            ));
        }
        let vectors = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| normalized(v).ok_or(TrainerError::ZeroMean(i)))
            .collect::<Result<_>>()?;
        Ok(MemoryBank {
            vectors,
            momentum,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, label: usize) -> Option<&[f64]> {
        self.vectors.get(label).map(Vec::as_slice)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    fn check(&self, label: usize) -> Result<()> {
        if label >= self.vectors.len() {
            return Err(TrainerError::UnknownLabel {
                label,
                size: self.vectors.len(),
            });
        }
        Ok(())
    }
}

/// Bank entry `j` is the normalized mean embedding of samples labelled `j`.
pub fn init_memory(
    labels: &[Option<usize>],
    embeddings: &[Vec<f64>],
    momentum: f64,
    temperature: f64,
) -> Result<MemoryBank> {
    let num = labels.iter().flatten().max().map_or(0, |m| m + 1);
    if num == 0 {
        return Err(TrainerError::EmptyBank);
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; num];
    for (l, e) in labels.iter().zip(embeddings) {
        if let Some(l) = l {
            sums[*l].iter_mut().zip(e).for_each(|(s, x)| *s += x);
        }
    }
    MemoryBank::new(sums, momentum, temperature)
}

/// Softmax over `f · bank_j / τ`, stabilized by subtracting the max logit.
fn softmax(f: &[f64], bank: &MemoryBank) -> Vec<f64> {
    let logits: Vec<f64> = bank
        .vectors
        .iter()
        .map(|v| dot(f, v) / bank.temperature)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn cluster_nce_loss(f: &[f64], label: usize, bank: &MemoryBank) -> Result<f64> {
    bank.check(label)?;
    let logits: Vec<f64> = bank
        .vectors
        .iter()
        .map(|v| dot(f, v) / bank.temperature)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((log_z - logits[label]).max(0.0))
}

/// `∂L/∂f = (1/τ) Σ_j (softmax_j − 1[j = label]) f^j`.
pub fn loss_gradient(f: &[f64], label: usize, bank: &MemoryBank) -> Result<Vec<f64>> {
    bank.check(label)?;
    let p = softmax(f, bank);
    let mut grad = vec![0.0; f.len()];
    for (j, (pj, v)) in p.iter().zip(&bank.vectors).enumerate() {
        let coeff = (pj - if j == label { 1.0 } else { 0.0 }) / bank.temperature;
        grad.iter_mut().zip(v).for_each(|(g, x)| *g += coeff * x);
    }
    Ok(grad)
}

pub fn momentum_update(bank: &mut MemoryBank, f: &[f64], label: usize) -> Result<()> {
    bank.check(label)?;
    let m = bank.momentum;
    let mixed: Vec<f64> = bank.vectors[label]
        .iter()
        .zip(f)
        .map(|(b, x)| m * b + (1.0 - m) * x)
        .collect();
    if let Some(v) = normalized(mixed) {
        bank.vectors[label] = v;
    } else if let Some(v) = normalized(f.to_vec()) {
        bank.vectors[label] = v;
    }
    Ok(())
}

/// Row-major `d_base x d_emb` linear map; embeddings are `normalize(Wᵀx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    weights: Vec<f32>,
    d_base: usize,
    d_emb: usize,
    pub learning_rate: f64,
}

impl Projection {
    /// Identity when the dimensions agree, otherwise a seeded Gaussian map.
    pub fn init(d_base: usize, d_emb: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        if d_emb == 0 || d_emb > d_base {
            return Err(TrainerError::InvalidParameter(
                "d_emb must lie in 1..=d_base",
            ));
        }
        let weights = if d_emb == d_base {
            (0..d_base * d_emb)
                .map(|k| if k / d_emb == k % d_emb { 1.0 } else { 0.0 })
                .collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (d_base as f64).sqrt();
            (0..d_base * d_emb)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * scale) as f32
                })
                .collect()
        };
        Ok(Projection {
            weights,
            d_base,
            d_emb,
            learning_rate,
        })
    }

    pub fn from_weights(
        weights: Vec<f32>,
        d_base: usize,
        d_emb: usize,
        learning_rate: f64,
    ) -> Result<Self> {
        if weights.len() != d_base * d_emb {
            return Err(TrainerError::DimensionMismatch {
                expected: d_base * d_emb,
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(TrainerError::InvalidParameter("weights must be finite"));
        }
        Ok(Projection {
            weights,
            d_base,
            d_emb,
            learning_rate,
        })
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_f64(&self) -> Vec<f64> {
        self.weights.iter().map(|&w| w as f64).collect()
    }

    pub fn d_base(&self) -> usize {
        self.d_base
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn embed(&self, x: &[f64]) -> Option<Vec<f64>> {
        normalized(project(&self.weights_f64(), self.d_emb, x))
    }

    pub fn embed_all(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let w = self.weights_f64();
        features
            .iter()
            .enumerate()
            .map(|(i, x)| {
                if x.len() != self.d_base {
                    return Err(TrainerError::DimensionMismatch {
                        expected: self.d_base,
                        found: x.len(),
                    });
                }
                normalized(project(&w, self.d_emb, x)).ok_or(TrainerError::ZeroEmbedding(i))
            })
            .collect()
    }
}

fn project(weights: &[f64], d_emb: usize, x: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; d_emb];
    for (xi, row) in x.iter().zip(weights.chunks_exact(d_emb)) {
        if *xi == 0.0 {
            continue;
        }
        z.iter_mut().zip(row).for_each(|(zj, w)| *zj += xi * w);
    }
    z
}

/// Per-sample loss and gradient with respect to the projection weights,
/// chain-ruled through the normalization. Returns the normalized embedding
/// as well.
pub fn loss_and_weight_gradient(
    weights: &[f64],
    d_emb: usize,
    x: &[f64],
    label: usize,
    bank: &MemoryBank,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let z = project(weights, d_emb, x);
    let zn = norm(&z);
    if zn == 0.0 {
        return Err(TrainerError::ZeroEmbedding(usize::MAX));
    }
    let f: Vec<f64> = z.iter().map(|v| v / zn).collect();
    let loss = cluster_nce_loss(&f, label, bank)?;
    let g_f = loss_gradient(&f, label, bank)?;
    let radial = dot(&f, &g_f);
    let g_z: Vec<f64> = g_f
        .iter()
        .zip(&f)
        .map(|(g, fi)| (g - radial * fi) / zn)
        .collect();
    let mut grad = vec![0.0; weights.len()];
    for (xi, row) in x.iter().zip(grad.chunks_exact_mut(d_emb)) {
        row.iter_mut().zip(&g_z).for_each(|(r, g)| *r = xi * g);
    }
    Ok((loss, grad, f))
}

/// Mean loss of the labelled samples against a fixed bank.
pub fn mean_loss(
    projection: &Projection,
    features: &[Vec<f64>],
    labels: &[Option<usize>],
    bank: &MemoryBank,
) -> Result<f64> {
    let embeddings = projection.embed_all(features)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (f, l) in embeddings.iter().zip(labels) {
        if let Some(l) = l {
            total += cluster_nce_loss(f, *l, bank)?;
            count += 1;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub samples: usize,
    pub steps: usize,
}

/// One pass of mini-batch gradient descent over the labelled samples.
/// Each batch takes one step on the mean batch gradient, then pushes the
/// batch embeddings into the bank in batch order.
pub fn train_epoch(
    projection: &mut Projection,
    features: &[Vec<f64>],
    labels: &[Option<usize>],
    bank: &mut MemoryBank,
    batch_size: usize,
    seed: u64,
) -> Result<EpochStats> {
    if batch_size == 0 {
        return Err(TrainerError::InvalidParameter(
            "batch_size must be positive",
        ));
    }
    if let Some(&label) = labels.iter().flatten().find(|&&l| l >= bank.len()) {
        return Err(TrainerError::UnknownLabel {
            label,
            size: bank.len(),
        });
    }
    let mut order: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut weights = projection.weights_f64();
    let d_emb = projection.d_emb;
    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(batch_size) {
        let mut grad = vec![0.0; weights.len()];
        let mut batch_embeddings = Vec::with_capacity(batch.len());
        for &i in batch {
            let label = labels[i].unwrap();
            let (loss, g, f) = loss_and_weight_gradient(&weights, d_emb, &features[i], label, bank)
                .map_err(|e| match e {
                    TrainerError::ZeroEmbedding(_) => TrainerError::ZeroEmbedding(i),
                    other => other,
                })?;
            total += loss;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            batch_embeddings.push((f, label));
        }
        if projection.learning_rate != 0.0 {
            let step = projection.learning_rate / batch.len() as f64;
            for (w, g) in weights.iter_mut().zip(&grad) {
                // Weights live in f32 so checkpoints are exact.
                *w = (*w - step * g) as f32 as f64;
            }
        }
        for (f, label) in &batch_embeddings {
            momentum_update(bank, f, *label)?;
        }
        steps += 1;
    }
    projection.weights = weights.iter().map(|&w| w as f32).collect();
    Ok(EpochStats {
        mean_loss: if order.is_empty() {
            0.0
        } else {
            total / order.len() as f64
        },
        samples: order.len(),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub d_base: usize,
    pub d_emb: usize,
    pub tau: f64,
    pub momentum: f64,
    pub epoch: usize,
    pub learning_rate: f64,
}

/// Writes a one-line JSON header followed by the raw `f32` LE weight blob.
pub fn write_checkpoint(
    out: &mut impl Write,
    header: &CheckpointHeader,
    projection: &Projection,
) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, header)?;
    out.write_all(b"\n")?;
    let blob: Vec<u8> = projection
        .weights
        .iter()
        .flat_map(|w| w.to_le_bytes())
        .collect();
    out.write_all(&blob)
}

pub fn read_checkpoint(input: impl Read) -> Result<(CheckpointHeader, Projection)> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| TrainerError::Checkpoint(e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| TrainerError::Checkpoint(e.to_string()))?;
    let mut blob = Vec::new();
    reader
        .read_to_end(&mut blob)
        .map_err(|e| TrainerError::Checkpoint(e.to_string()))?;
    if blob.len() != header.d_base * header.d_emb * 4 {
        return Err(TrainerError::Checkpoint(format!(
            "weight blob has {} bytes, expected {}",
            blob.len(),
            header.d_base * header.d_emb * 4
        )));
    }
    let weights = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let projection =
        Projection::from_weights(weights, header.d_base, header.d_emb, header.learning_rate)?;
    Ok((header, projection))
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    projection: &Projection,
) -> Result<()> {
    let io = |source| TrainerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, header, projection).map_err(io)?;
    fs::write(path, buf).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Projection)> {
    let file = fs::File::open(path).map_err(|source| TrainerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(file)
}
