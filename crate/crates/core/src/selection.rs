//! Top-K curation and post-hoc analyses of a selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;
use crate::points::{pairwise_sum, squared_distance, Points};
use crate::rng;
use crate::scores::{Direction, ScoreEntry, ScoreTable, ScorerKind};
use crate::{Error, Result};

/// Reference selection size for a full-scale mixture.
pub const REFERENCE_K: usize = 1_200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rank: usize,
    pub id: u64,
    pub dataset: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    k: usize,
    scorer: ScorerKind,
    direction: Direction,
    pool_size: usize,
    #[serde(default)]
    config: serde_json::Value,
}

/// Ordered top-K selection with the provenance of the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionManifest {
    pub k_requested: usize,
    pub pool_size: usize,
    pub scorer: ScorerKind,
    pub direction: Direction,
    pub entries: Vec<ManifestEntry>,
    pub config: serde_json::Value,
}

impl SelectionManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when fewer entries than requested were available.
    pub fn truncated(&self) -> bool {
        self.entries.len() < self.k_requested
    }

    pub fn ids(&self) -> impl ExactSizeIterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, |out| self.to_writer(out))
    }

    pub fn to_writer<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = ManifestHeader {
            k: self.k_requested,
            scorer: self.scorer,
            direction: self.direction,
            pool_size: self.pool_size,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<SelectionManifest> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<SelectionManifest> {
        let mut header: Option<ManifestHeader> = None;
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |e: serde_json::Error| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            };
            if header.is_none() {
                header = Some(serde_json::from_str(&line).map_err(err)?);
            } else {
                entries.push(serde_json::from_str(&line).map_err(err)?);
            }
        }
        let h = header.ok_or_else(|| Error::empty("manifest has no header"))?;
        Ok(SelectionManifest {
            k_requested: h.k,
            pool_size: h.pool_size,
            scorer: h.scorer,
            direction: h.direction,
            entries,
            config: h.config,
        })
    }
}

/// Heap element ordered so that the worst-ranked entry is the maximum.
struct Ranked<'a> {
    entry: &'a ScoreEntry,
    direction: Direction,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.direction.rank_cmp(
            (self.entry.value, self.entry.id),
            (other.entry.value, other.entry.id),
        )
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

fn push_bounded<'a>(heap: &mut BinaryHeap<Ranked<'a>>, item: Ranked<'a>, k: usize) {
    if heap.len() < k {
        heap.push(item);
    } else if let Some(worst) = heap.peek() {
        if item < *worst {
            heap.pop();
            heap.push(item);
        }
    }
}

/// Best `k` entries of a table by its direction, ties to the smaller id.
///
/// Each rayon worker keeps one bounded heap of at most `k` entries; the
/// per-worker heaps are merged under the same total order, so the result
/// does not depend on how the table was split. Memory is O(k) per worker.
pub fn top_k_select(table: &ScoreTable, k: usize) -> SelectionManifest {
    let direction = table.direction;
    let best: Vec<Ranked<'_>> = if k == 0 {
        Vec::new()
    } else {
        table
            .entries
            .par_iter()
            .fold(BinaryHeap::new, |mut heap, entry| {
                push_bounded(&mut heap, Ranked { entry, direction }, k);
                heap
            })
            .reduce(BinaryHeap::new, |mut a, b| {
                for item in b {
                    push_bounded(&mut a, item, k);
                }
                a
            })
            .into_sorted_vec()
    };
    SelectionManifest {
        k_requested: k,
        pool_size: table.len(),
        scorer: table.scorer,
        direction,
        entries: best
            .into_iter()
            .enumerate()
            .map(|(i, r)| ManifestEntry {
                rank: i + 1,
                id: r.entry.id,
                dataset: r.entry.dataset.clone(),
                value: r.entry.value,
            })
            .collect(),
        config: serde_json::Value::Null,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionEntry {
    pub dataset: String,
    pub count: usize,
    pub percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    /// Descending by share, ties by dataset name.
    pub datasets: Vec<CompositionEntry>,
    pub total: usize,
}

/// Per-dataset counts and percentage shares of a selection.
pub fn mixture_composition(manifest: &SelectionManifest) -> CompositionReport {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.entries {
        *counts.entry(e.dataset.as_str()).or_default() += 1;
    }
    let total = manifest.entries.len();
    let mut datasets: Vec<CompositionEntry> = counts
        .into_iter()
        .map(|(d, c)| CompositionEntry {
            dataset: d.to_string(),
            count: c,
            percentage: 100.0 * c as f64 / total as f64,
        })
        .collect();
    datasets.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.dataset.cmp(&b.dataset))
    });
    CompositionReport { datasets, total }
}

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// Per-dataset counts over the same bins, when grouping was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_dataset: Option<BTreeMap<String, Vec<u64>>>,
}

impl Histogram {
    fn bin_of(&self, v: f64) -> usize {
        let bins = self.counts.len();
        if self.hi <= self.lo {
            return 0;
        }
        let t = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        if t < 0.0 {
            0
        } else {
            (t as usize).min(bins - 1)
        }
    }

    fn empty(lo: f64, hi: f64, bins: usize) -> Histogram {
        Histogram {
            lo,
            hi,
            counts: vec![0; bins],
            by_dataset: None,
        }
    }

    fn add(&mut self, dataset: Option<&str>, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
        if let (Some(map), Some(d)) = (self.by_dataset.as_mut(), dataset) {
            let bins = self.counts.len();
            map.entry(d.to_string()).or_insert_with(|| vec![0; bins])[b] += 1;
        }
    }
}

/// Range used for a table's histogram: `[0, 1]` for learned scores,
/// the observed min-max otherwise.
fn histogram_range(table: &ScoreTable) -> (f64, f64) {
    if table.scorer == ScorerKind::LearnedEstimator || table.is_empty() {
        return (0.0, 1.0);
    }
    let lo = table.values().fold(f64::INFINITY, f64::min);
    let hi = table.values().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn histogram_over<'a>(
    entries: impl Iterator<Item = (&'a str, f64)>,
    lo: f64,
    hi: f64,
    bins: usize,
    group_by_dataset: bool,
) -> Histogram {
    let mut h = Histogram::empty(lo, hi, bins);
    if group_by_dataset {
        h.by_dataset = Some(BTreeMap::new());
    }
    for (d, v) in entries {
        h.add(Some(d), v);
    }
    h
}

/// Equal-width histogram of a table's values.
pub fn score_histogram(
    table: &ScoreTable,
    bins: usize,
    group_by_dataset: bool,
) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let (lo, hi) = histogram_range(table);
    Ok(histogram_over(
        table.entries.iter().map(|e| (e.dataset.as_str(), e.value)),
        lo,
        hi,
        bins,
        group_by_dataset,
    ))
}

/// Linear-interpolation quantile of sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q10: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Summary {
            count: values.len(),
            mean: pairwise_sum(values) / values.len() as f64,
            min: sorted[0],
            q10: quantile_sorted(&sorted, 0.10),
            q25: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q75: quantile_sorted(&sorted, 0.75),
            q90: quantile_sorted(&sorted, 0.90),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub scorer: ScorerKind,
    pub direction: Direction,
    pub pool: Option<Summary>,
    pub selected: Option<Summary>,
    /// Fraction of the selection inside the pool's closest decile (at or
    /// above the pool's 90th percentile for higher-is-closer scores, at or
    /// below its 10th percentile otherwise).
    pub selected_in_pool_top_decile: f64,
    pub pool_histogram: Histogram,
    pub selected_histogram: Histogram,
}

/// Score distribution of the pool versus the selected subset.
pub fn selection_shift_report(
    pool: &ScoreTable,
    manifest: &SelectionManifest,
    bins: usize,
) -> Result<ShiftReport> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let by_id: HashMap<u64, f64> = pool.entries.iter().map(|e| (e.id, e.value)).collect();
    let selected: Vec<f64> = manifest
        .ids()
        .map(|id| by_id.get(&id).copied().ok_or(Error::UnknownId(id)))
        .collect::<Result<_>>()?;
    let pool_values: Vec<f64> = pool.values().collect();
    let pool_summary = Summary::of(&pool_values);
    let selected_in_top_decile = match &pool_summary {
        Some(s) if !selected.is_empty() => {
            let cut = match pool.direction {
                Direction::HigherIsCloser => s.q90,
                Direction::LowerIsCloser => s.q10,
            };
            let n = selected
                .iter()
                .filter(|&&v| pool.direction.at_least_as_close(v, cut))
                .count();
            n as f64 / selected.len() as f64
        }
        _ => 0.0,
    };
    let (lo, hi) = histogram_range(pool);
    Ok(ShiftReport {
        scorer: pool.scorer,
        direction: pool.direction,
        pool: pool_summary,
        selected: Summary::of(&selected),
        selected_in_pool_top_decile: selected_in_top_decile,
        pool_histogram: histogram_over(pool_values.iter().map(|&v| ("", v)), lo, hi, bins, false),
        selected_histogram: histogram_over(selected.iter().map(|&v| ("", v)), lo, hi, bins, false),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    /// Kernel temperature.
    pub t: f64,
    /// Largest point count evaluated with the exact pair loop.
    pub exact_threshold: usize,
    /// Pairs drawn in Monte-Carlo mode.
    pub pair_samples: usize,
    pub seed: u64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            t: 2.0,
            exact_threshold: 4096,
            pair_samples: 200_000,
            seed: 0,
        }
    }
}

/// Uniformity diversity `1 / E[exp(-t ||u - v||^2)]` over ordered pairs of
/// distinct indices. Exact for up to `exact_threshold` points, seeded
/// Monte-Carlo over `pair_samples` pairs beyond that.
pub fn diversity(points: &Points, cfg: &DiversityConfig) -> Result<f64> {
    if !(cfg.t > 0.0 && cfg.t.is_finite()) {
        return Err(Error::invalid("diversity temperature must be positive"));
    }
    if cfg.pair_samples == 0 {
        return Err(Error::invalid("pair_samples must be positive"));
    }
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("diversity needs at least two points"));
    }
    let kernel =
        |i: usize, j: usize| (-cfg.t * squared_distance(points.row(i), points.row(j))).exp();
    let mean = if n <= cfg.exact_threshold {
        // Symmetric kernel: sum over i < j and double.
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| kernel(i, j)).sum())
            .collect();
        2.0 * pairwise_sum(&rows) / (n as f64 * (n - 1) as f64)
    } else {
        let mut rng = rng::stream(cfg.seed, rng::STREAM_DIVERSITY);
        let pairs: Vec<(usize, usize)> = (0..cfg.pair_samples)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i, j)
            })
            .collect();
        let values: Vec<f64> = pairs.par_iter().map(|&(i, j)| kernel(i, j)).collect();
        pairwise_sum(&values) / values.len() as f64
    };
    Ok(1.0 / mean)
}
