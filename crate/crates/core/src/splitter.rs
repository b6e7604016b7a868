//! Day-level train/validation/test split.
//!
//! Day sequences are packed into bins of similar frame counts with first-fit
//! decreasing. Every choice of test bins is then scored by how far the class
//! distribution of the chosen bins, and of the bins left over, sits from the
//! whole-dataset distribution (sum of two Bhattacharyya distances). The
//! validation bins are picked from the remainder the same way.

use serde::{Deserialize, Serialize};

use crate::datamodel::{normalize_counts, Dataset};
use crate::error::{Error, Result};

/// Objectives closer than this are treated as equal; the lexicographically
/// first candidate then wins.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    /// Indices into the packed item list.
    pub items: Vec<usize>,
    pub total: usize,
}

fn check_sizes(sizes: &[usize], capacity: usize) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::EmptyInput("nothing to pack".into()));
    }
    if let Some(&size) = sizes.iter().find(|&&s| s > capacity) {
        return Err(Error::Packing { size, capacity });
    }
    Ok(())
}

fn first_fit_in_order(sizes: &[usize], order: impl Iterator<Item = usize>, capacity: usize) -> Vec<Bin> {
    let mut bins: Vec<Bin> = Vec::new();
    for i in order {
        match bins.iter_mut().find(|b| b.total + sizes[i] <= capacity) {
            Some(bin) => {
                bin.items.push(i);
                bin.total += sizes[i];
            }
            None => bins.push(Bin {
                items: vec![i],
                total: sizes[i],
            }),
        }
    }
    bins
}

/// First-fit decreasing; equal sizes keep their original order.
pub fn ffd_pack(sizes: &[usize], capacity: usize) -> Result<Vec<Bin>> {
    check_sizes(sizes, capacity)?;
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
    Ok(first_fit_in_order(sizes, order.into_iter(), capacity))
}

/// Plain first-fit in input order.
pub fn first_fit(sizes: &[usize], capacity: usize) -> Result<Vec<Bin>> {
    check_sizes(sizes, capacity)?;
    Ok(first_fit_in_order(sizes, 0..sizes.len(), capacity))
}

/// All `k`-subsets of `0..n` in lexicographic order.
#[derive(Debug, Clone)]
pub struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

pub fn combinations(n: usize, k: usize) -> Result<Combinations> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot choose {k} of {n}")));
    }
    Ok(Combinations {
        n,
        current: Some((0..k).collect()),
    })
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let c = self.current.as_mut().unwrap();
        let k = c.len();
        match (0..k).rev().find(|&i| c[i] < self.n - k + i) {
            Some(i) => {
                c[i] += 1;
                for j in i + 1..k {
                    c[j] = c[j - 1] + 1;
                }
            }
            None => self.current = None,
        }
        Some(out)
    }
}

/// Chase's Twiddle: successive `k`-subsets of `0..n` that differ by swapping
/// one member in and one out. Yields each subset as sorted indices.
#[derive(Debug, Clone)]
pub struct Twiddle {
    p: Vec<i64>,
    selected: Vec<bool>,
    first: bool,
    done: bool,
}

impl Twiddle {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::Config(format!("cannot choose {k} of {n}")));
        }
        let (n_i, k_i) = (n as i64, k as i64);
        let mut p = vec![0i64; n + 2];
        p[0] = n_i + 1;
        let mut i = n - k + 1;
        while i != n + 1 {
            p[i] = i as i64 + k_i - n_i;
            i += 1;
        }
        p[n + 1] = -2;
        let selected = (0..n).map(|i| i >= n - k).collect();
        Ok(Twiddle {
            p,
            selected,
            first: true,
            done: false,
        })
    }

    /// One Twiddle transition: `(x, y)` = (index entering, index leaving),
    /// or `None` when every subset has been produced.
    fn advance(&mut self) -> Option<(usize, usize)> {
        let p = &mut self.p;
        let mut j = 1;
        while p[j] <= 0 {
            j += 1;
        }
        if p[j - 1] == 0 {
            let mut i = j - 1;
            while i != 1 {
                p[i] = -1;
                i -= 1;
            }
            p[j] = 0;
            p[1] = 1;
            return Some((0, j - 1));
        }
        if j > 1 {
            p[j - 1] = 0;
        }
        loop {
            j += 1;
            if p[j] <= 0 {
                break;
            }
        }
        let k = j - 1;
        let mut i = j;
        while p[i] == 0 {
            p[i] = -1;
            i += 1;
        }
        if p[i] == -1 {
            p[i] = p[k];
            p[k] = -1;
            Some((i - 1, k - 1))
        } else if i as i64 == p[0] {
            None
        } else {
            p[j] = p[i];
            p[i] = 0;
            Some((j - 1, i - 1))
        }
    }
}

impl Iterator for Twiddle {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        if self.first {
            self.first = false;
        } else {
            match self.advance() {
                Some((x, y)) => {
                    self.selected[x] = true;
                    self.selected[y] = false;
                }
                None => {
                    self.done = true;
                    return None;
                }
            }
        }
        Some(
            self.selected
                .iter()
                .enumerate()
                .filter_map(|(i, &s)| s.then_some(i))
                .collect(),
        )
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Data("distribution has negative or non-finite entries".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("distribution sums to {sum}")));
    }
    Ok(())
}

/// `-ln Σ sqrt(p_k q_k)`; infinite when the supports are disjoint.
pub fn bhattacharyya(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum();
    if bc <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((-bc.ln()).max(0.0))
}

/// Reference distribution for the validation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValReference {
    #[default]
    Whole,
    Remaining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSelection {
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    pub train: Vec<usize>,
    pub objective_test: f64,
    pub objective_val: f64,
}

fn pooled(bin_counts: &[Vec<u64>], members: impl Iterator<Item = usize>) -> Result<Vec<f64>> {
    let k = bin_counts.first().map_or(0, Vec::len);
    let mut acc = vec![0u64; k];
    for b in members {
        for (a, c) in acc.iter_mut().zip(&bin_counts[b]) {
            *a += c;
        }
    }
    normalize_counts(&acc)
}

/// Best `k`-subset of `pool` against `reference`; returns (subset, objective).
fn best_subset(
    bin_counts: &[Vec<u64>],
    pool: &[usize],
    k: usize,
    reference: &[f64],
) -> Result<(Vec<usize>, f64)> {
    let mut scored = Vec::new();
    for combo in combinations(pool.len(), k)? {
        let chosen: Vec<usize> = combo.iter().map(|&i| pool[i]).collect();
        let rest: Vec<usize> = pool.iter().copied().filter(|b| !chosen.contains(b)).collect();
        let obj = bhattacharyya(&pooled(bin_counts, chosen.iter().copied())?, reference)?
            + bhattacharyya(&pooled(bin_counts, rest.into_iter())?, reference)?;
        scored.push((chosen, obj));
    }
    let min = scored.iter().map(|(_, o)| *o).fold(f64::INFINITY, f64::min);
    // combinations are lexicographic, so the first near-minimal one wins ties
    let pick = scored
        .into_iter()
        .find(|(_, o)| *o <= min + TIE_TOLERANCE || (o.is_infinite() && min.is_infinite()))
        .expect("at least one candidate");
    Ok(pick)
}

/// Two-stage exhaustive selection over per-bin class counts.
pub fn select_bins(
    bin_counts: &[Vec<u64>],
    test_bins: usize,
    val_bins: usize,
    reference: ValReference,
) -> Result<BinSelection> {
    let b = bin_counts.len();
    if test_bins == 0 || val_bins == 0 || test_bins + val_bins >= b {
        return Err(Error::Config(format!(
            "need 0 < test ({test_bins}) and 0 < val ({val_bins}) with test + val < bins ({b})"
        )));
    }
    let all: Vec<usize> = (0..b).collect();
    let whole = pooled(bin_counts, all.iter().copied())?;
    let (test, objective_test) = best_subset(bin_counts, &all, test_bins, &whole)?;
    let remaining: Vec<usize> = all.into_iter().filter(|i| !test.contains(i)).collect();
    let val_ref = match reference {
        ValReference::Whole => whole,
        ValReference::Remaining => pooled(bin_counts, remaining.iter().copied())?,
    };
    let (val, objective_val) = best_subset(bin_counts, &remaining, val_bins, &val_ref)?;
    let train = remaining.into_iter().filter(|i| !val.contains(i)).collect();
    Ok(BinSelection {
        test,
        val,
        train,
        objective_test,
        objective_val,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub test: Vec<String>,
    pub val: Vec<String>,
    pub train: Vec<String>,
    pub objective_test: Option<f64>,
    pub objective_val: Option<f64>,
    /// Sequence ids per bin, in packing order.
    pub bins: Vec<Vec<String>>,
    pub test_bin_ids: Vec<usize>,
    pub val_bin_ids: Vec<usize>,
    pub train_bin_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub bins: usize,
    pub test_bins: usize,
    pub val_bins: usize,
    /// Overrides the default `ceil(1.1 * total / bins)` bin capacity.
    pub capacity: Option<usize>,
    pub reference: ValReference,
}

pub fn default_capacity(total_frames: usize, bins: usize) -> usize {
    (1.1 * total_frames as f64 / bins as f64).ceil() as usize
}

/// Packs the dataset's day sequences into bins and selects test, validation
/// and training bins. Infinite objectives serialize as `null`.
pub fn select_split(dataset: &Dataset, cfg: &SplitConfig) -> Result<SplitResult> {
    if cfg.bins == 0 {
        return Err(Error::Config("bin count must be positive".into()));
    }
    let sizes: Vec<usize> = dataset.sequences.iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().sum();
    let capacity = cfg
        .capacity
        .unwrap_or_else(|| default_capacity(total, cfg.bins).max(sizes.iter().copied().max().unwrap_or(0)));
    let bins = ffd_pack(&sizes, capacity)?;
    let k = dataset.num_classes();
    let counts: Vec<Vec<u64>> = bins
        .iter()
        .map(|bin| {
            let mut c = vec![0u64; k];
            for &i in &bin.items {
                for &y in &dataset.sequences[i].labels {
                    c[y] += 1;
                }
            }
            c
        })
        .collect();
    let sel = select_bins(&counts, cfg.test_bins, cfg.val_bins, cfg.reference)?;
    let ids = |which: &[usize]| -> Vec<String> {
        which
            .iter()
            .flat_map(|&b| bins[b].items.iter().map(|&i| dataset.sequences[i].sequence_id.clone()))
            .collect()
    };
    let finite = |v: f64| v.is_finite().then_some(v);
    Ok(SplitResult {
        test: ids(&sel.test),
        val: ids(&sel.val),
        train: ids(&sel.train),
        objective_test: finite(sel.objective_test),
        objective_val: finite(sel.objective_val),
        bins: (0..bins.len()).map(|b| ids(&[b])).collect(),
        test_bin_ids: sel.test,
        val_bin_ids: sel.val,
        train_bin_ids: sel.train,
    })
}
