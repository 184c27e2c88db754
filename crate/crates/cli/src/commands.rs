use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use proxcurate::baselines::{score_store_baseline, BaselineConfig};
use proxcurate::estimator::{score_store, train_estimator, TrainConfig, TrainedEstimator};
use proxcurate::kernel::{pairwise_mmd_matrix, DatasetGroup, EstimatorKind, MmdConfig};
use proxcurate::selection::{
    diversity, mixture_composition, score_histogram, selection_shift_report, top_k_select,
    DiversityConfig, SelectionManifest,
};
use proxcurate::store::{ingest_jsonl, validate_store, write_store, FeatureStore};
use proxcurate::synth::{
    gen_mixture, read_truth, recovery_eval, standard_benchmark, submode_benchmark, truth_path,
    MixtureSpec,
};
use proxcurate::{ScoreTable, ScorerKind, VectorSource};

use crate::{Cli, Command, Method, MmdEstimator, Part, Preset, ReportKind};

/// The resolved configuration recorded in every artifact. Thread count and
/// log level are left out: neither changes any result.
fn provenance<T: Serialize>(command: &str, seed: u64, args: &T) -> Result<Value> {
    let mut v = serde_json::to_value(args)?;
    let map = v
        .as_object_mut()
        .expect("argument structs serialize to objects");
    map.insert("command".into(), json!(command));
    map.insert("seed".into(), json!(seed));
    Ok(v)
}

fn emit(doc: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)? + "\n";
    match out {
        Some(path) => write_file_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().context("output path has no file name")?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

fn open(path: &Path) -> Result<FeatureStore> {
    FeatureStore::open(path).with_context(|| format!("opening store {}", path.display()))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str, what: &str) -> Result<&'a T> {
    v.as_ref().with_context(|| format!("{what} needs --{flag}"))
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match &cli.command {
        Command::Ingest(a) => {
            let reader = BufReader::new(
                File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?,
            );
            let dump = ingest_jsonl(reader)?;
            let summary = write_store(&a.out, dump.dim, &dump.aux_names, &dump.records)?;
            info!("wrote {} records of dim {}", summary.count, summary.dim);
            emit(
                &json!({"count": summary.count, "dim": summary.dim, "aux_names": dump.aux_names}),
                None,
            )?;
        }
        Command::Validate(a) => {
            let store = open(&a.store)?;
            let report = validate_store(&store);
            emit(&serde_json::to_value(&report)?, a.out.as_deref())?;
            if !report.ok {
                eprintln!("error: store {} failed validation", a.store.display());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Mmd(a) => {
            let stores: Vec<FeatureStore> =
                a.stores.iter().map(|p| open(p)).collect::<Result<_>>()?;
            let mut per_store = Vec::new();
            let mut seen: HashMap<String, usize> = HashMap::new();
            for store in &stores {
                let groups = store.indices_by_dataset()?;
                for (label, _) in &groups {
                    *seen.entry(label.clone()).or_default() += 1;
                }
                per_store.push(groups);
            }
            let mut groups = Vec::new();
            for ((store, path), datasets) in stores.iter().zip(&a.stores).zip(per_store) {
                for (label, rows) in datasets {
                    let label = if seen[&label] > 1 {
                        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                        format!("{stem}:{label}")
                    } else {
                        label
                    };
                    groups.push(DatasetGroup {
                        label,
                        source: store as &dyn VectorSource,
                        rows,
                    });
                }
            }
            let cfg = MmdConfig {
                estimator_kind: match a.estimator {
                    MmdEstimator::Biased => EstimatorKind::Biased,
                    MmdEstimator::Unbiased => EstimatorKind::Unbiased,
                },
                subsample_cap: a.subsample_cap,
                bandwidth_cap: a.bandwidth_cap,
                seed,
            };
            let matrix = pairwise_mmd_matrix(&groups, &cfg)?;
            let mut doc = serde_json::to_value(&matrix)?;
            let mut config = serde_json::to_value(cfg)?;
            merge(&mut config, provenance("mmd", seed, a)?);
            doc["config"] = config;
            emit(&doc, a.out.as_deref())?;
        }
        Command::Train(a) => {
            let target = open(&a.target)?;
            let pool = open(&a.pool)?;
            let cfg = TrainConfig {
                batch_size: a.batch_size,
                max_steps: a.max_steps,
                step_size: a.step_size,
                momentum: a.momentum,
                early_stop_accuracy: a.early_stop,
                val_fraction: a.val_fraction,
                eval_every: a.eval_every,
                standardize_features: a.standardize,
                seed,
            };
            let (estimator, history) = train_estimator(&target, &pool, &cfg)?;
            info!(
                "trained for {} steps, validation accuracy {:?}, early stop {}",
                history.steps_run,
                history.final_val_accuracy(),
                history.stopped_early
            );
            TrainedEstimator {
                estimator,
                train_config: cfg,
                history,
            }
            .save(&a.out)?;
        }
        Command::Score(a) => {
            let pool = open(&a.pool)?;
            let table = match a.method {
                Method::Learned => {
                    let path = required(&a.est, "est", "learned scoring")?;
                    let trained = TrainedEstimator::load(path)
                        .with_context(|| format!("loading estimator {}", path.display()))?;
                    score_store(&trained.estimator, &pool)?
                }
                method => {
                    let scorer = match method {
                        Method::Avgdist => ScorerKind::AvgDistance,
                        Method::Ppl => ScorerKind::TargetPpl,
                        _ => ScorerKind::DeltaPpl,
                    };
                    let target = match (&a.target, method) {
                        (Some(p), _) => Some(open(p)?),
                        (None, Method::Avgdist) => bail!("avgdist scoring needs --target"),
                        (None, _) => None,
                    };
                    let cfg = BaselineConfig {
                        avg_distance_cap: a.avg_distance_cap,
                        seed,
                    };
                    score_store_baseline(
                        &pool,
                        scorer,
                        target.as_ref().map(|t| t as &dyn VectorSource),
                        &cfg,
                    )?
                }
            };
            table
                .with_config(provenance("score", seed, a)?)
                .write_jsonl(&a.out)?;
        }
        Command::Select(a) => {
            let table = read_scores(&a.scores)?;
            let manifest = top_k_select(&table, a.k).with_config(provenance("select", seed, a)?);
            if manifest.truncated() {
                info!(
                    "pool holds only {} records; kept all of them",
                    manifest.pool_size
                );
            }
            manifest.write_jsonl(&a.out)?;
        }
        Command::Report(a) => {
            let config = provenance("report", seed, a)?;
            let report = match a.kind {
                ReportKind::Composition => {
                    let m = read_manifest(required(&a.manifest, "manifest", "composition")?)?;
                    serde_json::to_value(mixture_composition(&m))?
                }
                ReportKind::Histogram => {
                    let t = read_scores(required(&a.scores, "scores", "histogram")?)?;
                    serde_json::to_value(score_histogram(&t, a.bins, a.by_dataset)?)?
                }
                ReportKind::Shift => {
                    let t = read_scores(required(&a.scores, "scores", "shift")?)?;
                    let m = read_manifest(required(&a.manifest, "manifest", "shift")?)?;
                    serde_json::to_value(selection_shift_report(&t, &m, a.bins)?)?
                }
                ReportKind::Recovery => {
                    let m = read_manifest(required(&a.manifest, "manifest", "recovery")?)?;
                    let path = required(&a.truth, "truth", "recovery")?;
                    let truth = read_truth(path)
                        .with_context(|| format!("reading truth sidecar {}", path.display()))?;
                    serde_json::to_value(recovery_eval(&m, &truth)?)?
                }
            };
            let kind = serde_json::to_value(a.kind)?;
            emit(
                &json!({"kind": kind, "config": config, "report": report}),
                a.out.as_deref(),
            )?;
        }
        Command::Diversity(a) => {
            let store = open(&a.store)?;
            let rows: Vec<usize> = match &a.manifest {
                Some(path) => {
                    let m = read_manifest(path)?;
                    let index = store.index_by_id();
                    m.ids()
                        .map(|id| {
                            index
                                .get(&id)
                                .copied()
                                .with_context(|| format!("id {id} is not in the store"))
                        })
                        .collect::<Result<_>>()?
                }
                None => (0..store.len()).collect(),
            };
            let cfg = DiversityConfig {
                t: a.t,
                exact_threshold: a.exact_threshold,
                pair_samples: a.pair_samples,
                seed,
            };
            let value = diversity(&store.gather(&rows), &cfg)?;
            let doc = json!({
                "diversity": value,
                "count": rows.len(),
                "config": provenance("diversity", seed, a)?,
            });
            emit(&doc, a.out.as_deref())?;
        }
        Command::Synth(a) => {
            let (spec, k) = match (&a.spec, a.preset) {
                (Some(path), _) => {
                    let file = File::open(path)
                        .with_context(|| format!("opening spec {}", path.display()))?;
                    let spec: MixtureSpec = serde_json::from_reader(BufReader::new(file))
                        .with_context(|| format!("parsing spec {}", path.display()))?;
                    (spec, None)
                }
                (None, Some(preset)) => {
                    let bench = match preset {
                        Preset::Standard => standard_benchmark(seed),
                        Preset::Submode => submode_benchmark(seed),
                    };
                    let spec = match a.part.context("--preset needs --part")? {
                        Part::Target => bench.target,
                        Part::Pool => bench.pool,
                    };
                    (spec, Some(bench.k))
                }
                (None, None) => bail!("synth needs --spec or --preset"),
            };
            let mixture = gen_mixture(&spec)?;
            mixture.write(&a.out)?;
            let doc = json!({
                "count": mixture.store.len(),
                "dim": mixture.store.dim(),
                "planted_count": spec.planted_count(),
                "k": k,
                "truth": truth_path(&a.out),
            });
            emit(&doc, None)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn merge(base: &mut Value, extra: Value) {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        for (k, v) in e {
            b.entry(k).or_insert(v);
        }
    }
}

fn read_scores(path: &Path) -> Result<ScoreTable> {
    ScoreTable::read_jsonl(path).with_context(|| format!("reading score table {}", path.display()))
}

fn read_manifest(path: &Path) -> Result<SelectionManifest> {
    SelectionManifest::read_jsonl(path)
        .with_context(|| format!("reading manifest {}", path.display()))
}
