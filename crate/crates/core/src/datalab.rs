//! Datasets: concentric spheres, label corruption and clean/noisy splits.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

pub const INNER_RADIUS: f64 = 1.0;
pub const OUTER_RADIUS: f64 = 1.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// One sample per row.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `true` where the label was corrupted. Scoring only, never training.
    pub corruption: Option<Vec<bool>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self { name: name.into(), samples, labels, num_classes, corruption: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.samples.rows() {
            return Err(contract_err!("{} labels for {} samples", self.labels.len(), self.samples.rows()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(contract_err!("label {y} outside [0, {})", self.num_classes));
        }
        if let Some(mask) = &self.corruption {
            if mask.len() != self.len() {
                return Err(contract_err!("corruption mask has {} entries for {} samples", mask.len(), self.len()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Corruption mask, all `false` when none was recorded.
    pub fn truth_mask(&self) -> Vec<bool> {
        self.corruption.clone().unwrap_or_else(|| alloc::vec![false; self.len()])
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            samples: self.samples.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            corruption: self.corruption.as_ref().map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }
}

/// `n` points on two concentric spheres in `R^d`: label 0 on radius 1,
/// label 1 on radius 1.3, class picked by a fair coin.
pub fn gen_spheres(d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d < 1 || n < 2 {
        return Err(contract_err!("spheres need d >= 1 and n >= 2 (got d={d}, n={n})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut point = alloc::vec![0.0; d];
    for _ in 0..n {
        let label = usize::from(rng.gen_bool(0.5));
        let radius = if label == 0 { INNER_RADIUS } else { OUTER_RADIUS };
        let norm = loop {
            for p in point.iter_mut() {
                *p = rng.sample(StandardNormal);
            }
            let norm = libm::sqrt(point.iter().map(|v| v * v).sum());
            if norm > 1e-12 {
                break norm;
            }
        };
        data.extend(point.iter().map(|v| v / norm * radius));
        labels.push(label);
    }
    Ok(Dataset {
        name: alloc::format!("spheres-d{d}-n{n}"),
        samples: Tensor::new(n, d, data),
        labels,
        num_classes: 2,
        corruption: Some(alloc::vec![false; n]),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMap {
    /// `y -> 1 - y`
    BinaryComplement,
    /// `y -> 9 - y`
    NineMinusY,
    /// `y -> perm[y]`
    Permutation(Vec<usize>),
}

impl LabelMap {
    fn apply(&self, y: usize) -> Result<usize> {
        let mapped = match self {
            LabelMap::BinaryComplement if y <= 1 => 1 - y,
            LabelMap::NineMinusY if y <= 9 => 9 - y,
            LabelMap::Permutation(p) if y < p.len() => p[y],
            _ => return Err(contract_err!("label {y} is outside the domain of {self:?}")),
        };
        if mapped == y {
            return Err(contract_err!("{self:?} leaves label {y} unchanged"));
        }
        Ok(mapped)
    }
}

/// Relabels exactly `round(fraction * n)` samples chosen without replacement.
pub fn flip_labels(ds: &Dataset, fraction: f64, mapping: &LabelMap, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(contract_err!("flip fraction {fraction} outside [0, 1]"));
    }
    let n = ds.len();
    let k = libm::round(fraction * n as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, n, k);
    let mut out = ds.clone();
    let mut mask = ds.truth_mask();
    for i in chosen.iter() {
        let y = mapping.apply(ds.labels[i])?;
        if y >= ds.num_classes {
            return Err(contract_err!("flipped label {y} outside [0, {})", ds.num_classes));
        }
        out.labels[i] = y;
        mask[i] = true;
    }
    out.corruption = Some(mask);
    Ok(out)
}

/// Random disjoint split into a noisy set and `n_clean` clean samples.
pub fn split_clean(ds: &Dataset, n_clean: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_clean == 0 || n_clean >= ds.len() {
        return Err(contract_err!("clean-set size {n_clean} must be in [1, {})", ds.len()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (clean, noisy) = order.split_at(n_clean);
    Ok((ds.subset(noisy, alloc::format!("{}-noisy", ds.name)), ds.subset(clean, alloc::format!("{}-clean", ds.name))))
}

/// Clean and noisy sets for the sphere experiment.
///
/// The clean set is drawn first and never corrupted; only the noisy set
/// goes through [`flip_labels`].
pub fn sphere_problem(d: usize, n_noisy: usize, n_clean: usize, noise: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let seeds = crate::seeds::SeedStream::new(seed);
    let all = gen_spheres(d, n_noisy + n_clean, seeds.derive(0))?;
    let (noisy, clean) = split_clean(&all, n_clean, seeds.derive(1))?;
    let noisy = flip_labels(&noisy, noise, &LabelMap::BinaryComplement, seeds.derive(2))?;
    Ok((noisy, clean))
}
