//! Synthetic ground-truth benchmarks: isotropic Gaussian mixtures with a
//! planted target-aligned cluster, closed-form posteriors, and recovery
//! metrics for any selection.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::estimator::sigmoid;
use crate::fsutil::write_atomic;
use crate::selection::SelectionManifest;
use crate::store::{sibling, FeatureRecord, FeatureStore};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub std: f64,
    pub count: usize,
    pub dataset: String,
    #[serde(default)]
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub dim: usize,
    pub seed: u64,
    pub components: Vec<Component>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        if self.components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: c.mean.len(),
                });
            }
            if !(c.std > 0.0 && c.std.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {i}: std must be positive"
                )));
            }
            if c.count == 0 {
                return Err(Error::invalid(format!(
                    "component {i}: count must be at least 1"
                )));
            }
            if !c.mean.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {i}: mean must be finite"
                )));
            }
        }
        Ok(())
    }

    pub fn total_count(&self) -> usize {
        self.components.iter().map(|c| c.count).sum()
    }

    pub fn planted_count(&self) -> usize {
        self.components
            .iter()
            .filter(|c| c.aligned)
            .map(|c| c.count)
            .sum()
    }

    /// Log density of the mixture (weights proportional to counts).
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let total = self.total_count() as f64;
        let d = self.dim as f64;
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let var = c.std * c.std;
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
                (c.count as f64 / total).ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
                    - sq / (2.0 * var)
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::invalid(
                "mixture density is degenerate at this point",
            ));
        }
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: u64,
    pub aligned: bool,
    pub component: usize,
}

pub struct Mixture {
    pub store: FeatureStore,
    pub truth: Vec<TruthRecord>,
}

impl Mixture {
    /// Writes the store, its metadata sidecar and the `<stem>.truth.jsonl`
    /// ground-truth sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.store.write(path)?;
        write_truth(&truth_path(path), &self.truth)
    }
}

pub fn truth_path(store_path: &Path) -> PathBuf {
    sibling(store_path, "truth.jsonl")
}

pub fn write_truth(path: &Path, truth: &[TruthRecord]) -> Result<()> {
    write_atomic(path, |out| {
        for t in truth {
            serde_json::to_writer(&mut *out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Samples a mixture. Ids are sequential in component order; each component
/// draws from its own seeded stream.
pub fn gen_mixture(spec: &MixtureSpec) -> Result<Mixture> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.total_count());
    let mut truth = Vec::with_capacity(spec.total_count());
    let mut id = 0u64;
    for (ci, c) in spec.components.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, rng::STREAM_SYNTH + ci as u64);
        for j in 0..c.count {
            let vector = c
                .mean
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + c.std * z) as f32
                })
                .collect();
            records.push(FeatureRecord {
                id,
                dataset: c.dataset.clone(),
                key: format!("c{ci}-{j}"),
                vector,
                aux: Vec::new(),
            });
            truth.push(TruthRecord {
                id,
                aligned: c.aligned,
                component: ci,
            });
            id += 1;
        }
    }
    Ok(Mixture {
        store: FeatureStore::from_records(spec.dim, &[], &records)?,
        truth,
    })
}

/// `p_target(x) / (p_target(x) + p_pool(x))` from the closed-form mixture
/// densities.
pub fn analytic_posterior(x: &[f64], target: &MixtureSpec, pool: &MixtureSpec) -> Result<f64> {
    target.validate()?;
    pool.validate()?;
    Ok(sigmoid(target.log_density(x)? - pool.log_density(x)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub k: usize,
    pub planted_count: usize,
    /// Planted samples inside the selection.
    pub hits: usize,
}

/// Precision and recall of a selection against the planted ground truth.
pub fn recovery_eval(
    manifest: &SelectionManifest,
    truth: &[TruthRecord],
) -> Result<RecoveryReport> {
    let aligned: HashMap<u64, bool> = truth.iter().map(|t| (t.id, t.aligned)).collect();
    let planted_count = truth.iter().filter(|t| t.aligned).count();
    let mut hits = 0;
    for id in manifest.ids() {
        match aligned.get(&id) {
            Some(true) => hits += 1,
            Some(false) => {}
            None => return Err(Error::UnknownId(id)),
        }
    }
    let k = manifest.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(RecoveryReport {
        precision_at_k: ratio(hits, k),
        recall_at_k: ratio(hits, planted_count),
        k,
        planted_count,
        hits,
    })
}

/// A target spec, a candidate-pool spec, and the selection size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub target: MixtureSpec,
    pub pool: MixtureSpec,
    pub k: usize,
}

fn random_unit(dim: usize, rng: &mut rng::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn offset(base: &[f64], dir: &[f64], scale: f64) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + scale * d).collect()
}

const STREAM_GEOMETRY: u64 = 0x300;

/// The standard planted-subset benchmark: in 32 dimensions, 2,000 target
/// points around the origin (std 0.5); a pool of four far components
/// (4,500 points each, std 1.0, mean at distance 8 in seeded random
/// directions) plus 2,000 planted aligned points (std 0.5) offset by a
/// vector of norm 1 from the target mean. K = 2,000.
pub fn standard_benchmark(seed: u64) -> Benchmark {
    let dim = 32;
    let mut geo = rng::stream(seed, STREAM_GEOMETRY);
    let center = vec![0.0; dim];
    let mut components: Vec<Component> = (0..4)
        .map(|i| Component {
            mean: offset(&center, &random_unit(dim, &mut geo), 8.0),
            std: 1.0,
            count: 4500,
            dataset: format!("far{i}"),
            aligned: false,
        })
        .collect();
    components.push(Component {
        mean: offset(&center, &random_unit(dim, &mut geo), 1.0),
        std: 0.5,
        count: 2000,
        dataset: "planted".into(),
        aligned: true,
    });
    Benchmark {
        target: MixtureSpec {
            dim,
            seed: seed.wrapping_add(1),
            components: vec![Component {
                mean: center,
                std: 0.5,
                count: 2000,
                dataset: "target".into(),
                aligned: true,
            }],
        },
        pool: MixtureSpec {
            dim,
            seed,
            components,
        },
        k: 2000,
    }
}

/// Variant whose planted set spans four sub-modes, for diversity checks:
/// 8 dimensions, 1,000 target points at the origin (std 0.15); the pool
/// holds four far components (2,000 points each, distance 3, std 0.3) and
/// four planted sub-modes of 250 points (std 0.1) at mutually orthogonal
/// offsets of norm 0.3. K = 1,000.
pub fn submode_benchmark(seed: u64) -> Benchmark {
    let dim = 8;
    let mut geo = rng::stream(seed, STREAM_GEOMETRY);
    let center = vec![0.0; dim];
    let mut components: Vec<Component> = (0..4)
        .map(|i| Component {
            mean: offset(&center, &random_unit(dim, &mut geo), 3.0),
            std: 0.3,
            count: 2000,
            dataset: format!("far{i}"),
            aligned: false,
        })
        .collect();
    for i in 0..4 {
        let mut axis = vec![0.0; dim];
        axis[4 + i] = 1.0;
        components.push(Component {
            mean: offset(&center, &axis, 0.3),
            std: 0.1,
            count: 250,
            dataset: format!("planted{i}"),
            aligned: true,
        });
    }
    Benchmark {
        target: MixtureSpec {
            dim,
            seed: seed.wrapping_add(1),
            components: vec![Component {
                mean: center,
                std: 0.15,
                count: 1000,
                dataset: "target".into(),
                aligned: true,
            }],
        },
        pool: MixtureSpec {
            dim,
            seed,
            components,
        },
        k: 1000,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{Direction, ScorerKind};
    use crate::selection::ManifestEntry;

    fn two_component_spec() -> MixtureSpec {
        MixtureSpec {
            dim: 2,
            seed: 11,
            components: vec![
                Component {
                    mean: vec![0.0, 0.0],
                    std: 1.0,
                    count: 100,
                    dataset: "a".into(),
                    aligned: false,
                },
                Component {
                    mean: vec![5.0, 5.0],
                    std: 0.5,
                    count: 100,
                    dataset: "b".into(),
                    aligned: true,
                },
            ],
        }
    }

    fn spec_1d(means: &[f64]) -> MixtureSpec {
        MixtureSpec {
            dim: 1,
            seed: 0,
            components: means
                .iter()
                .map(|&m| Component {
                    mean: vec![m],
                    std: 1.0,
                    count: 10,
                    dataset: "x".into(),
                    aligned: false,
                })
                .collect(),
        }
    }

    #[test]
    fn gen_counts_and_determinism() {
        let spec = two_component_spec();
        let a = gen_mixture(&spec).unwrap();
        assert_eq!(a.store.len(), 200);
        assert_eq!(a.store.dim(), 2);
        assert_eq!(a.truth.iter().filter(|t| t.aligned).count(), 100);
        let b = gen_mixture(&spec).unwrap();
        assert_eq!(a.store.records().unwrap(), b.store.records().unwrap());
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn zero_std_rejected() {
        let mut spec = two_component_spec();
        spec.components[0].std = 0.0;
        assert!(gen_mixture(&spec).is_err());
        let mut spec = two_component_spec();
        spec.components[1].count = 0;
        assert!(gen_mixture(&spec).is_err());
    }

    #[test]
    fn posterior_symmetry_and_dominance() {
        let t = spec_1d(&[-1.0]);
        let p = spec_1d(&[1.0]);
        assert!((analytic_posterior(&[0.0], &t, &p).unwrap() - 0.5).abs() < 1e-15);
        let p_far = spec_1d(&[10.0]);
        assert!(analytic_posterior(&[-1.0], &t, &p_far).unwrap() > 0.999);
        let x = [0.37];
        let s = analytic_posterior(&x, &t, &p).unwrap() + analytic_posterior(&x, &p, &t).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }

    fn manifest(ids: &[u64]) -> SelectionManifest {
        SelectionManifest {
            k_requested: ids.len(),
            pool_size: 0,
            scorer: ScorerKind::LearnedEstimator,
            direction: Direction::HigherIsCloser,
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, &id)| ManifestEntry {
                    rank: i + 1,
                    id,
                    dataset: String::new(),
                    value: 0.0,
                })
                .collect(),
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn recovery_examples() {
        let m = gen_mixture(&two_component_spec()).unwrap();
        let planted: Vec<u64> = m.truth.iter().filter(|t| t.aligned).map(|t| t.id).collect();
        let r = recovery_eval(&manifest(&planted), &m.truth).unwrap();
        assert_eq!((r.precision_at_k, r.recall_at_k), (1.0, 1.0));
        let r = recovery_eval(&manifest(&[0, 1, 2]), &m.truth).unwrap();
        assert_eq!(r.precision_at_k, 0.0);
        assert!(matches!(
            recovery_eval(&manifest(&[5000]), &m.truth),
            Err(Error::UnknownId(5000))
        ));
    }

    #[test]
    fn standard_benchmark_geometry() {
        let b = standard_benchmark(7);
        assert_eq!(b.pool.total_count(), 20_000);
        assert_eq!(b.pool.planted_count(), 2000);
        assert_eq!(b.target.total_count(), 2000);
        for c in &b.pool.components {
            let norm = c.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let expected = if c.aligned { 1.0 } else { 8.0 };
            assert!((norm - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = two_component_spec();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<MixtureSpec>(&text).unwrap(), spec);
    }
}
