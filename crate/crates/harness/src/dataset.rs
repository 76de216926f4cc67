//! Toy dataset generation and the text dataset formats.
//!
//! Three binary generators stand in for image data: two Gaussian blobs in
//! the unit hypercube, two concentric rings in the unit square, and 4x4
//! bar "images". All images live in `[0,1]^dim` and generation is a pure
//! function of `(kind, n_per_class, dim, seed)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use preempt_core::rngstream;
use preempt_core::{Scalar, Vec64};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Gauss2,
    Rings,
    Bars,
}

impl DataKind {
    pub fn name(self) -> &'static str {
        match self {
            DataKind::Gauss2 => "gauss2",
            DataKind::Rings => "rings",
            DataKind::Bars => "bars",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gauss2" => Some(DataKind::Gauss2),
            "rings" => Some(DataKind::Rings),
            "bars" => Some(DataKind::Bars),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub kind: DataKind,
    pub seed: u64,
    pub dim: usize,
    pub n_per_class: usize,
    pub train_frac: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<(Vec64, usize)>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        2
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<(Vec64, usize)> {
        idx.iter().map(|&i| self.examples[i].clone()).collect()
    }

    pub fn train_set(&self) -> Vec<(Vec64, usize)> {
        self.subset(&self.train_idx)
    }

    pub fn test_set(&self) -> Vec<(Vec64, usize)> {
        self.subset(&self.test_idx)
    }
}

// Labels interleave so any prefix of the example list is class-balanced.
fn gauss2<G: Rng>(n_per_class: usize, dim: usize, rng: &mut G) -> Vec<(Vec64, usize)> {
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = i % 2;
        let mean = if label == 0 { 0.35 } else { 0.65 };
        let noise = preempt_core::geometry::sample_gaussian::<Scalar, _>(dim, 0.08, rng);
        let x: Vec64 = noise.iter().map(|g| (mean + g).clamp(0.0, 1.0)).collect();
        out.push((x, label));
    }
    out
}

fn rings<G: Rng>(n_per_class: usize, dim: usize, rng: &mut G) -> Result<Vec<(Vec64, usize)>> {
    if dim != 2 {
        return Err(HarnessError::config(format!(
            "rings dataset requires dim = 2, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = i % 2;
        let (r_lo, r_hi) = if label == 0 { (0.10, 0.18) } else { (0.28, 0.36) };
        let r = rng.gen_range(r_lo..r_hi);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let x = (0.5 + r * theta.cos()).clamp(0.0, 1.0);
        let y = (0.5 + r * theta.sin()).clamp(0.0, 1.0);
        out.push((vec![x, y].into(), label));
    }
    Ok(out)
}

fn bars<G: Rng>(n_per_class: usize, dim: usize, rng: &mut G) -> Result<Vec<(Vec64, usize)>> {
    if dim != 16 {
        return Err(HarnessError::config(format!(
            "bars dataset requires dim = 16 (4x4 images), got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = i % 2;
        let lane = rng.gen_range(0..4usize);
        let mut img = vec![0.1f64; 16];
        for k in 0..4 {
            let idx = if label == 0 { lane * 4 + k } else { k * 4 + lane };
            img[idx] = 0.8;
        }
        for v in img.iter_mut() {
            *v = (*v + rng.gen_range(0.0..0.1)).clamp(0.0, 1.0);
        }
        out.push((img.into(), label));
    }
    Ok(out)
}

/// Generates a dataset and its train/test split, all derived from the seed.
pub fn gen_dataset(
    kind: DataKind,
    n_per_class: usize,
    dim: usize,
    seed: u64,
    train_frac: f64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(HarnessError::config(format!(
            "train_frac must be in [0,1], got {train_frac}"
        )));
    }
    if dim == 0 {
        return Err(HarnessError::config("data_dim must be positive"));
    }
    let mut rng = rngstream::derive(seed, "dataset", &[]);
    let examples = match kind {
        DataKind::Gauss2 => gauss2(n_per_class, dim, &mut rng),
        DataKind::Rings => rings(n_per_class, dim, &mut rng)?,
        DataKind::Bars => bars(n_per_class, dim, &mut rng)?,
    };
    for (x, _) in &examples {
        debug_assert!(x.in_unit_cube());
    }

    let n = examples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rngstream::derive(seed, "split", &[]);
    for i in (1..n).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (train_frac * n as f64).floor() as usize;
    // Canonical ascending order; membership is random, the listing is not.
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    Ok(Dataset {
        examples,
        train_idx,
        test_idx,
        meta: DatasetMeta {
            kind,
            seed,
            dim,
            n_per_class,
            train_frac,
        },
    })
}

pub const DATASET_VERSION: &str = "PRDS v1";
pub const ROBUSTIFIED_VERSION: &str = "PRRB v1";

pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_VERSION}");
    let _ = writeln!(
        out,
        "{} {} {} {} {}",
        ds.meta.kind.name(),
        ds.meta.seed,
        ds.meta.dim,
        ds.meta.n_per_class,
        ds.meta.train_frac
    );
    let _ = writeln!(out, "{} {}", ds.examples.len(), ds.num_classes());
    let train: std::collections::BTreeSet<usize> = ds.train_idx.iter().copied().collect();
    for (i, (x, y)) in ds.examples.iter().enumerate() {
        let split = if train.contains(&i) { "train" } else { "test" };
        let vals: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{y} {split} {}", vals.join(" "));
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_string(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    dataset_from_string(&text)
}

pub fn dataset_from_string(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| HarnessError::config(format!("dataset file ended before {what}")))
    };

    let (line, version) = next("version")?;
    if version.trim() != DATASET_VERSION {
        return Err(HarnessError::config_at(
            line,
            format!("unknown dataset version {version:?}"),
        ));
    }
    let (line, meta_line) = next("metadata")?;
    let toks: Vec<&str> = meta_line.split_whitespace().collect();
    if toks.len() != 5 {
        return Err(HarnessError::config_at(
            line,
            "metadata must be: kind seed dim n_per_class train_frac",
        ));
    }
    let kind = DataKind::parse(toks[0])
        .ok_or_else(|| HarnessError::config_at(line, format!("unknown kind {:?}", toks[0])))?;
    let bad = |what: &str| HarnessError::config_at(line, format!("invalid {what}"));
    let seed: u64 = toks[1].parse().map_err(|_| bad("seed"))?;
    let dim: usize = toks[2].parse().map_err(|_| bad("dim"))?;
    let n_per_class: usize = toks[3].parse().map_err(|_| bad("n_per_class"))?;
    let train_frac: f64 = toks[4].parse().map_err(|_| bad("train_frac"))?;

    let (line, counts) = next("counts")?;
    let toks: Vec<&str> = counts.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(HarnessError::config_at(line, "counts must be: n classes"));
    }
    let n: usize = toks[0]
        .parse()
        .map_err(|_| HarnessError::config_at(line, "invalid count"))?;

    let mut examples = Vec::with_capacity(n);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for i in 0..n {
        let (line, row) = next("example row")?;
        let mut toks = row.split_whitespace();
        let label: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| HarnessError::config_at(line, "missing label"))?;
        let split = toks
            .next()
            .ok_or_else(|| HarnessError::config_at(line, "missing split"))?;
        let vals: Vec<Scalar> = toks
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| HarnessError::config_at(line, "invalid value"))?;
        if vals.len() != dim {
            return Err(HarnessError::config_at(
                line,
                format!("expected {dim} values, got {}", vals.len()),
            ));
        }
        match split {
            "train" => train_idx.push(i),
            "test" => test_idx.push(i),
            other => {
                return Err(HarnessError::config_at(
                    line,
                    format!("unknown split {other:?}"),
                ))
            }
        }
        examples.push((Vec64::new(vals), label));
    }

    Ok(Dataset {
        examples,
        train_idx,
        test_idx,
        meta: DatasetMeta {
            kind,
            seed,
            dim,
            n_per_class,
            train_frac,
        },
    })
}

/// Robustified points aligned to the indices of an evaluation set.
#[derive(Debug, Clone)]
pub struct RobustifiedSet {
    /// `(original example index, label, robustified point)`
    pub rows: Vec<(usize, usize, Vec64)>,
}

pub fn robustified_to_string(set: &RobustifiedSet, dim: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{ROBUSTIFIED_VERSION}");
    let _ = writeln!(out, "{} {}", dim, set.rows.len());
    for (idx, label, x) in &set.rows {
        let vals: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{idx} {label} {}", vals.join(" "));
    }
    out
}

pub fn save_robustified(set: &RobustifiedSet, dim: usize, path: &Path) -> Result<()> {
    std::fs::write(path, robustified_to_string(set, dim))?;
    Ok(())
}

pub fn load_robustified(path: &Path) -> Result<RobustifiedSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (line, version) = lines
        .next()
        .map(|(i, l)| (i + 1, l))
        .ok_or_else(|| HarnessError::config("empty robustified file"))?;
    if version.trim() != ROBUSTIFIED_VERSION {
        return Err(HarnessError::config_at(
            line,
            format!("unknown robustified version {version:?}"),
        ));
    }
    let (line, header) = lines
        .next()
        .map(|(i, l)| (i + 1, l))
        .ok_or_else(|| HarnessError::config("missing robustified header"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(HarnessError::config_at(line, "header must be: dim n"));
    }
    let dim: usize = toks[0]
        .parse()
        .map_err(|_| HarnessError::config_at(line, "invalid dim"))?;

    let mut rows = Vec::new();
    for (i, row) in lines {
        let line = i + 1;
        if row.trim().is_empty() {
            continue;
        }
        let mut toks = row.split_whitespace();
        let idx: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| HarnessError::config_at(line, "missing index"))?;
        let label: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| HarnessError::config_at(line, "missing label"))?;
        let vals: Vec<Scalar> = toks
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| HarnessError::config_at(line, "invalid value"))?;
        if vals.len() != dim {
            return Err(HarnessError::config_at(
                line,
                format!("expected {dim} values, got {}", vals.len()),
            ));
        }
        rows.push((idx, label, Vec64::new(vals)));
    }
    Ok(RobustifiedSet { rows })
}
