//! Alternative proximity scorers: mean feature-space distance to the target
//! set, target-conditioned perplexity, and delta perplexity.
//!
//! Perplexities are computed from precomputed aux channels (log-probability
//! sums and token counts); no language model runs here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::points::{check_dim, squared_distance, Points, VectorSource};
use crate::rng::{self, subsample_indices};
use crate::scores::{ScoreEntry, ScoreTable, ScorerKind};
use crate::store::{FeatureStore, AUX_LOGPROB_BASE, AUX_LOGPROB_TARGET, AUX_TOKEN_COUNT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Target points used by the average-distance scorer; larger target sets
    /// are subsampled.
    pub avg_distance_cap: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            avg_distance_cap: 2000,
            seed: 0,
        }
    }
}

fn target_subset(targets: &dyn VectorSource, cap: usize, seed: u64) -> Result<Points> {
    if targets.is_empty() {
        return Err(Error::empty("target set is empty"));
    }
    if cap == 0 {
        return Err(Error::invalid("avg-distance cap must be positive"));
    }
    let mut rng = rng::stream(seed, rng::STREAM_AVG_DISTANCE);
    Ok(targets.gather(&subsample_indices(targets.len(), cap, &mut rng)))
}

fn mean_distance(x: &[f64], targets: &Points) -> f64 {
    let total: f64 = targets.rows().map(|t| squared_distance(x, t).sqrt()).sum();
    total / targets.len() as f64
}

/// Mean Euclidean distance from `x` to the target set (a seeded subsample of
/// at most `cap` targets). Lower is closer.
pub fn avg_distance_score(
    x: &[f64],
    targets: &dyn VectorSource,
    cap: usize,
    seed: u64,
) -> Result<f64> {
    check_dim(targets.dim(), x.len())?;
    let subset = target_subset(targets, cap, seed)?;
    Ok(mean_distance(x, &subset))
}

/// `exp(-logprob_sum / token_count)`.
pub fn perplexity(logprob_sum: f64, token_count: u64) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::invalid("token count must be positive"));
    }
    if !(logprob_sum.is_finite() && logprob_sum <= 0.0) {
        return Err(Error::invalid(format!(
            "log-probability sum must be finite and <= 0, got {logprob_sum}"
        )));
    }
    Ok((-logprob_sum / token_count as f64).exp())
}

/// Target perplexity minus base perplexity; more negative is closer.
pub fn delta_perplexity(ppl_target: f64, ppl_base: f64) -> Result<f64> {
    if !(ppl_target >= 1.0 && ppl_base >= 1.0) || !ppl_target.is_finite() || !ppl_base.is_finite() {
        return Err(Error::invalid(format!(
            "perplexities must be finite and >= 1, got {ppl_target} and {ppl_base}"
        )));
    }
    Ok(ppl_target - ppl_base)
}

fn token_count(store: &FeatureStore, index: usize, channel: usize) -> Result<u64> {
    let v = store.aux_value(index, channel);
    if v.fract() != 0.0 || v < 1.0 {
        return Err(Error::invalid(format!(
            "record {} has invalid token count {v}",
            store.id(index)
        )));
    }
    Ok(v as u64)
}

/// Scores every record of `store` with one of the baseline scorers.
///
/// `avg_distance` needs `target`; the perplexity scorers need the
/// `logprob_sum_target`, `token_count` (and for delta, `logprob_sum_base`)
/// aux channels.
pub fn score_store_baseline(
    store: &FeatureStore,
    scorer: ScorerKind,
    target: Option<&dyn VectorSource>,
    cfg: &BaselineConfig,
) -> Result<ScoreTable> {
    let values: Vec<f64> = match scorer {
        ScorerKind::LearnedEstimator => {
            return Err(Error::invalid(
                "the learned estimator is not a baseline scorer",
            ))
        }
        ScorerKind::AvgDistance => {
            let target =
                target.ok_or_else(|| Error::invalid("avg_distance needs a target store"))?;
            check_dim(target.dim(), store.dim())?;
            let subset = target_subset(target, cfg.avg_distance_cap, cfg.seed)?;
            (0..store.len())
                .into_par_iter()
                .map_init(
                    || vec![0.0; store.dim()],
                    |buf, i| {
                        store.read_into(i, buf);
                        mean_distance(buf, &subset)
                    },
                )
                .collect()
        }
        ScorerKind::TargetPpl | ScorerKind::DeltaPpl => {
            let lp_target = store.aux_channel(AUX_LOGPROB_TARGET)?;
            let tokens = store.aux_channel(AUX_TOKEN_COUNT)?;
            let lp_base = if scorer == ScorerKind::DeltaPpl {
                Some(store.aux_channel(AUX_LOGPROB_BASE)?)
            } else {
                None
            };
            (0..store.len())
                .map(|i| {
                    let t = token_count(store, i, tokens)?;
                    let ppl = perplexity(store.aux_value(i, lp_target) as f64, t)?;
                    match lp_base {
                        None => Ok(ppl),
                        Some(c) => {
                            delta_perplexity(ppl, perplexity(store.aux_value(i, c) as f64, t)?)
                        }
                    }
                })
                .collect::<Result<_>>()?
        }
    };
    let meta = store.metadata()?;
    let entries = values
        .into_iter()
        .enumerate()
        .map(|(i, value)| ScoreEntry {
            id: store.id(i),
            dataset: meta.datasets[i].clone(),
            value,
        })
        .collect();
    Ok(ScoreTable::new(scorer, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::FeatureRecord;

    #[test]
    fn avg_distance_closed_forms() {
        let single = Points::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(
            avg_distance_score(&[1.0, 2.0], &single, 10, 0).unwrap(),
            0.0
        );
        let t = Points::from_rows(&[[3.0, 4.0], [6.0, 8.0]]).unwrap();
        let d = avg_distance_score(&[0.0, 0.0], &t, 2000, 0).unwrap();
        assert!((d - 7.5).abs() < 1e-9);
    }

    #[test]
    fn avg_distance_errors() {
        let empty = Points::new(2);
        assert!(matches!(
            avg_distance_score(&[0.0, 0.0], &empty, 10, 0),
            Err(Error::Empty(_))
        ));
        let t = Points::from_rows(&[[3.0, 4.0]]).unwrap();
        assert!(matches!(
            avg_distance_score(&[0.0], &t, 10, 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn perplexity_closed_forms() {
        assert_eq!(perplexity(0.0, 10).unwrap(), 1.0);
        let p = perplexity(4.0 * 0.25f64.ln(), 4).unwrap();
        assert!((p - 4.0).abs() < 1e-9);
        let p = perplexity(0.5f64.ln() + 0.25f64.ln() + 0.125f64.ln(), 3).unwrap();
        assert!((p - 4.0).abs() < 1e-9);
        assert!(perplexity(-1.0, 0).is_err());
    }

    #[test]
    fn delta_perplexity_signs() {
        assert_eq!(delta_perplexity(4.0, 6.0).unwrap(), -2.0);
        assert_eq!(delta_perplexity(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(delta_perplexity(10.0, 3.0).unwrap(), 7.0);
        assert!(delta_perplexity(0.5, 3.0).is_err());
    }

    #[test]
    fn perplexity_scorers_need_aux() {
        let store =
            FeatureStore::from_records(1, &[], &[FeatureRecord::new(1, "a", vec![0.0])]).unwrap();
        let cfg = BaselineConfig::default();
        assert!(matches!(
            score_store_baseline(&store, ScorerKind::TargetPpl, None, &cfg),
            Err(Error::MissingAux(_))
        ));
        assert!(score_store_baseline(&store, ScorerKind::AvgDistance, None, &cfg).is_err());
    }

    #[test]
    fn delta_table_from_aux() {
        let names: Vec<String> = [AUX_LOGPROB_TARGET, AUX_LOGPROB_BASE, AUX_TOKEN_COUNT]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let ln4 = 4f32.ln();
        let records = vec![
            // (logprob_sum_target, logprob_sum_base, token_count)
            FeatureRecord::new(1, "a", vec![0.0]).with_aux(vec![-2.0 * ln4, -2.0 * ln4, 2.0]),
            FeatureRecord::new(2, "b", vec![0.0]).with_aux(vec![0.0, -2.0 * ln4, 2.0]),
        ];
        let store = FeatureStore::from_records(1, &names, &records).unwrap();
        let t = score_store_baseline(
            &store,
            ScorerKind::DeltaPpl,
            None,
            &BaselineConfig::default(),
        )
        .unwrap();
        assert_eq!(t.direction, crate::Direction::LowerIsCloser);
        assert!(t.entries[0].value.abs() < 1e-5);
        assert!((t.entries[1].value + 3.0).abs() < 1e-5);
        let t = score_store_baseline(
            &store,
            ScorerKind::TargetPpl,
            None,
            &BaselineConfig::default(),
        )
        .unwrap();
        assert!((t.entries[0].value - 4.0).abs() < 1e-5);
        assert_eq!(t.entries[1].value, 1.0);
    }
}
