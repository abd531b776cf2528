//! End-to-end experiment execution: data build, round loop, outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use fedsim_core::client::{estimate_alpha, evaluate, interpolate, local_train, LocalTrainConfig};
use fedsim_core::compress::bandwidth_gain;
use fedsim_core::orchestrate::{
    sample_clients, DataStore, Engine, EngineConfig, ExecMode, RoundPlan, SimRunner,
};
use fedsim_core::params::{
    apply_feature_transform, dirichlet_partition, iid_partition, load_idx, synthetic,
    train_test_split, ClientShard, Dataset, Model, ModelKind,
};
use fedsim_core::rng;
use fedsim_core::{Error, Result};

use crate::config::{AlphaMode, DataSource, Experiment, PartitionKind, PersonalizationPlan};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::model_io::save_model;

/// Builds the train/test datasets named by the config.
pub fn build_datasets(exp: &Experiment) -> Result<(Dataset, Dataset)> {
    match &exp.source {
        DataSource::Synthetic { n_samples, noise, test_fraction } => {
            let data = if matches!(exp.model_kind, ModelKind::LinearRegression) {
                synthetic::least_squares(*n_samples, exp.input_dim, *noise, exp.seed)?
            } else {
                synthetic::class_blobs(*n_samples, exp.input_dim, exp.output_dim, *noise, exp.seed)?
            };
            train_test_split(&data, *test_fraction, exp.seed)
        }
        DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            for (what, d) in [("train", &train), ("test", &test)] {
                if d.dim() != exp.input_dim {
                    return Err(Error::Config(format!(
                        "{what} data has {} features but model.input_dim = {}",
                        d.dim(),
                        exp.input_dim
                    )));
                }
            }
            Ok((train, test))
        }
    }
}

/// Partitions the train set into client shards, applying per-client feature
/// transforms when enabled (transform id = client id).
pub fn build_shards(exp: &Experiment, train: &Dataset) -> Result<Vec<ClientShard>> {
    let shards = match exp.partition {
        PartitionKind::Iid => iid_partition(train, exp.n_clients, exp.seed)?,
        PartitionKind::Dirichlet(alpha) => {
            dirichlet_partition(train, exp.n_clients, alpha, exp.seed)?
        }
    };
    if !exp.feature_transforms {
        return Ok(shards);
    }
    shards
        .into_iter()
        .map(|s| {
            let id = s.client_id();
            apply_feature_transform(&s.with_transform_id(Some(id)))
        })
        .collect()
}

pub fn build_store(exp: &Experiment) -> Result<(Arc<DataStore>, Dataset)> {
    let (train, test) = build_datasets(exp)?;
    let shards = build_shards(exp, &train)?;
    let all: Vec<usize> = (0..test.n_samples()).collect();
    let test_shard = ClientShard::from_source(exp.n_clients as u32, &test, &all)?;
    Ok((Arc::new(DataStore::new(shards, test_shard)?), test))
}

/// Where run artifacts land.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub model: PathBuf,
    pub personalization: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub rounds: u32,
    pub final_test_accuracy: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub bandwidth_gain: f64,
    pub total_payload_bytes: u64,
    pub epsilon_spent: f64,
    pub personalization: Option<PersonalizationSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonalizationSummary {
    pub clients_evaluated: usize,
    pub clients_skipped: usize,
    pub mean_alpha: f64,
    pub mean_global_accuracy: f64,
    pub mean_local_accuracy: f64,
    pub mean_interpolated_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonalizationClient {
    pub client_id: u32,
    pub alpha: f64,
    pub global_accuracy: f64,
    pub local_accuracy: f64,
    pub interpolated_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub alpha_mode: String,
    pub holdout_fraction: f64,
    #[serde(flatten)]
    pub summary: PersonalizationSummary,
    pub per_client: Vec<PersonalizationClient>,
}

/// Runs the full experiment: R rounds, metrics log, final model file, and
/// the optional per-client personalization report.
pub fn run_experiment(exp: &Experiment, outputs: &RunOutputs) -> Result<RunSummary> {
    let (store, _test) = build_store(exp)?;
    let template = Model::init(
        exp.model_kind.clone(),
        exp.input_dim,
        exp.output_dim,
        true,
        exp.seed,
    )?;
    let runner = Arc::new(SimRunner::new(
        Arc::clone(&store),
        template.clone(),
        exp.local.epochs,
        exp.local.batch_size,
        exp.local.prox_mu,
        exp.bits,
        exp.sparsity,
        exp.seed,
    ));
    let engine_cfg = EngineConfig {
        workers: exp.workers,
        mode: ExecMode::Threaded,
        client_lr: exp.local.lr,
        weight_scheme: exp.weight_scheme.clone(),
        optimizer: exp.optimizer.clone(),
        dp: exp.dp.clone(),
        staleness: exp.staleness,
        seed: exp.seed,
    };
    let mut engine = Engine::new(template.params().clone(), runner, engine_cfg)?;

    let gain = bandwidth_gain(exp.bits, exp.sparsity.map_or(0.0, |s| s.sparsity()))?;
    let mut writer = MetricsWriter::create(&outputs.metrics)?;

    let test_id = store.test_client_id();
    let initial_eval = engine.evaluate_on(test_id)?;
    let mut record = MetricsRecord::initial(gain);
    record.test_accuracy = Some(initial_eval.accuracy);
    record.test_loss = Some(initial_eval.loss);
    writer.write(&record)?;

    let mut final_accuracy = Some(initial_eval.accuracy);
    let mut final_loss = Some(initial_eval.loss);
    let mut total_payload = 0u64;
    let mut epsilon = 0.0;
    for round in 1..=exp.rounds {
        let mut cohort_rng = rng::stream(exp.seed, &[rng::tag("cohort"), u64::from(round)]);
        let cohort = sample_clients(store.n_clients(), &exp.cohort, &mut cohort_rng)?;
        let plan = RoundPlan::new(round, cohort, exp.staleness.fraction)?;
        let metrics = engine.run_round(&plan)?;
        total_payload += metrics.payload_bytes;
        epsilon = metrics.epsilon_spent;
        let mut record = MetricsRecord::from_round(&metrics, gain);
        if round % exp.test_frequency == 0 || round == exp.rounds {
            let ev = engine.evaluate_on(test_id)?;
            record.test_accuracy = Some(ev.accuracy);
            record.test_loss = Some(ev.loss);
            final_accuracy = Some(ev.accuracy);
            final_loss = Some(ev.loss);
        }
        writer.write(&record)?;
    }
    writer.finish()?;

    save_model(&outputs.model, engine.global())?;

    let personalization = match &exp.personalization {
        Some(plan) => {
            let report = personalize(exp, plan, &template, &store, engine.global().clone())?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format { offset: 0, msg: format!("serialize report: {e}") })?;
            std::fs::write(&outputs.personalization, json)?;
            Some(report.summary)
        }
        None => None,
    };
    engine.shutdown();

    Ok(RunSummary {
        rounds: exp.rounds,
        final_test_accuracy: final_accuracy,
        final_test_loss: final_loss,
        bandwidth_gain: gain,
        total_payload_bytes: total_payload,
        epsilon_spent: epsilon,
        personalization,
    })
}

/// Per-client personalization sweep: fine-tune from the final global model,
/// then pick the local/global mix and score everything on a held-out slice.
fn personalize(
    exp: &Experiment,
    plan: &PersonalizationPlan,
    template: &Model,
    store: &DataStore,
    global_params: fedsim_core::params::ParameterVector,
) -> Result<PersonalizationReport> {
    let global_model = template.replace_params(global_params)?;
    let mut per_client = Vec::new();
    let mut skipped = 0usize;
    for shard in store.shards() {
        if shard.n_samples() < 2 {
            skipped += 1;
            continue;
        }
        let client_id = shard.client_id();
        let (train_part, holdout) = shard.split_holdout(plan.holdout_fraction, exp.seed)?;
        let cfg = LocalTrainConfig {
            shuffle_seed: rng::derive(exp.seed, &[rng::tag("p13n"), u64::from(client_id)]),
            ..exp.local.clone()
        };
        let (local_params, _) = local_train(&global_model, &train_part, &cfg)?;
        let local_model = global_model.replace_params(local_params)?;
        let alpha = match plan.alpha_mode {
            AlphaMode::Fixed => plan.alpha,
            AlphaMode::Grid => estimate_alpha(&local_model, &global_model, &holdout)?,
        };
        let mixed = global_model.replace_params(interpolate(
            local_model.params(),
            global_model.params(),
            alpha,
        )?)?;
        per_client.push(PersonalizationClient {
            client_id,
            alpha,
            global_accuracy: evaluate(&global_model, &holdout)?.accuracy,
            local_accuracy: evaluate(&local_model, &holdout)?.accuracy,
            interpolated_accuracy: evaluate(&mixed, &holdout)?.accuracy,
        });
    }
    if per_client.is_empty() {
        return Err(Error::Infeasible(
            "personalization: every client shard was too small to hold out from".into(),
        ));
    }
    let n = per_client.len() as f64;
    let summary = PersonalizationSummary {
        clients_evaluated: per_client.len(),
        clients_skipped: skipped,
        mean_alpha: per_client.iter().map(|c| c.alpha).sum::<f64>() / n,
        mean_global_accuracy: per_client.iter().map(|c| c.global_accuracy).sum::<f64>() / n,
        mean_local_accuracy: per_client.iter().map(|c| c.local_accuracy).sum::<f64>() / n,
        mean_interpolated_accuracy: per_client.iter().map(|c| c.interpolated_accuracy).sum::<f64>()
            / n,
    };
    Ok(PersonalizationReport {
        alpha_mode: match plan.alpha_mode {
            AlphaMode::Fixed => "fixed".into(),
            AlphaMode::Grid => "grid".into(),
        },
        holdout_fraction: plan.holdout_fraction,
        summary,
        per_client,
    })
}

/// One partition manifest line: which source samples a client holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifest {
    pub client_id: u32,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform_id: Option<u32>,
    pub label_histogram: std::collections::BTreeMap<i64, usize>,
    pub sample_indices: Vec<usize>,
}

/// Writes per-client shard manifests as JSON lines.
pub fn write_partition_manifests(exp: &Experiment, out_path: &Path) -> Result<usize> {
    let (train, _test) = build_datasets(exp)?;
    let shards = build_shards(exp, &train)?;
    let file = std::fs::File::create(out_path)?;
    let mut w = std::io::BufWriter::new(file);
    use std::io::Write as _;
    for shard in &shards {
        let manifest = ShardManifest {
            client_id: shard.client_id(),
            n_samples: shard.n_samples(),
            transform_id: shard.transform_id(),
            label_histogram: shard.label_histogram(),
            sample_indices: shard.source_indices().to_vec(),
        };
        let line = serde_json::to_string(&manifest)
            .map_err(|e| Error::Format { offset: 0, msg: format!("serialize manifest: {e}") })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(shards.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn synthetic_toml(extra: &str) -> String {
        format!(
            r#"
seed = 11
workers = 2

[model]
kind = "logistic_regression"
input_dim = 16
n_classes = 4

[data]
source = "synthetic"
n_samples = 300
noise = 0.2
n_clients = 6
partition = "iid"

[client]
epochs = 1
batch_size = 10
lr = 0.1

[server]
optimizer = "sgd"
lr = 1.0
rounds = 4
clients_per_round = 3
test_frequency = 2
{extra}
"#
        )
    }

    fn outputs(dir: &Path) -> RunOutputs {
        RunOutputs {
            metrics: dir.join("m.jsonl"),
            model: dir.join("model.bin"),
            personalization: dir.join("p.json"),
        }
    }

    #[test]
    fn run_produces_metrics_model_and_summary() {
        let exp = parse_config(&synthetic_toml("")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = outputs(dir.path());
        let summary = run_experiment(&exp, &out).unwrap();
        assert_eq!(summary.rounds, 4);
        assert!(summary.final_test_accuracy.is_some());
        assert_eq!(summary.bandwidth_gain, 1.0);
        let records = crate::metrics::read_metrics(&out.metrics).unwrap();
        // Round 0 plus one record per round.
        assert_eq!(records.len(), 5);
        assert_eq!(records[0].round, 0);
        assert!(records[0].test_accuracy.is_some());
        // Eval cadence: rounds 2 and 4; round 4 is also final.
        assert!(records[1].test_accuracy.is_none());
        assert!(records[2].test_accuracy.is_some());
        assert!(records[3].test_accuracy.is_none());
        assert!(records[4].test_accuracy.is_some());
        let params = crate::model_io::load_model(&out.model).unwrap();
        assert!(params.all_finite());
        assert!(!out.personalization.exists());
    }

    #[test]
    fn zero_rounds_writes_initial_eval_only() {
        let toml = synthetic_toml("").replace("rounds = 4", "rounds = 0");
        let exp = parse_config(&toml).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = outputs(dir.path());
        let summary = run_experiment(&exp, &out).unwrap();
        assert_eq!(summary.rounds, 0);
        let records = crate::metrics::read_metrics(&out.metrics).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].round, 0);
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let exp = parse_config(&synthetic_toml("")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out_a = RunOutputs {
            metrics: dir.path().join("a.jsonl"),
            model: dir.path().join("a.bin"),
            personalization: dir.path().join("a.json"),
        };
        let out_b = RunOutputs {
            metrics: dir.path().join("b.jsonl"),
            model: dir.path().join("b.bin"),
            personalization: dir.path().join("b.json"),
        };
        run_experiment(&exp, &out_a).unwrap();
        run_experiment(&exp, &out_b).unwrap();
        assert_eq!(
            std::fs::read(&out_a.metrics).unwrap(),
            std::fs::read(&out_b.metrics).unwrap()
        );
        assert_eq!(
            std::fs::read(&out_a.model).unwrap(),
            std::fs::read(&out_b.model).unwrap()
        );
    }

    #[test]
    fn worker_count_does_not_change_outputs() {
        let base = parse_config(&synthetic_toml("")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut files = Vec::new();
        for workers in [1usize, 3] {
            let mut exp = base.clone();
            exp.workers = workers;
            let out = RunOutputs {
                metrics: dir.path().join(format!("w{workers}.jsonl")),
                model: dir.path().join(format!("w{workers}.bin")),
                personalization: dir.path().join(format!("w{workers}.json")),
            };
            run_experiment(&exp, &out).unwrap();
            files.push((
                std::fs::read(&out.metrics).unwrap(),
                std::fs::read(&out.model).unwrap(),
            ));
        }
        assert_eq!(files[0], files[1]);
    }

    #[test]
    fn personalization_report_written_when_enabled() {
        let toml = synthetic_toml(
            "\n[personalization]\nenabled = true\nalpha_mode = \"grid\"\n",
        );
        let exp = parse_config(&toml).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = outputs(dir.path());
        let summary = run_experiment(&exp, &out).unwrap();
        let p = summary.personalization.unwrap();
        assert_eq!(p.clients_evaluated, 6);
        let text = std::fs::read_to_string(&out.personalization).unwrap();
        let report: PersonalizationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report.per_client.len(), 6);
        assert!(report.per_client.iter().all(|c| (0.0..=1.0).contains(&c.alpha)));
    }

    #[test]
    fn partition_manifests_cover_dataset_exactly() {
        let exp = parse_config(&synthetic_toml("")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.jsonl");
        let n = write_partition_manifests(&exp, &path).unwrap();
        assert_eq!(n, 6);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut seen = Vec::new();
        for line in text.lines() {
            let m: ShardManifest = serde_json::from_str(line).unwrap();
            assert_eq!(m.sample_indices.len(), m.n_samples);
            assert_eq!(m.label_histogram.values().sum::<usize>(), m.n_samples);
            seen.extend_from_slice(&m.sample_indices);
        }
        seen.sort_unstable();
        // 300 samples at test_fraction 0.2 leaves 240 in train.
        let expect: Vec<usize> = (0..240).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn transforms_stamp_manifest_ids() {
        let toml = synthetic_toml("").replace(
            "partition = \"iid\"",
            "partition = \"iid\"\nfeature_transforms = true",
        );
        let exp = parse_config(&toml).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.jsonl");
        write_partition_manifests(&exp, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for (i, line) in text.lines().enumerate() {
            let m: ShardManifest = serde_json::from_str(line).unwrap();
            assert_eq!(m.transform_id, Some(i as u32));
        }
    }

    #[test]
    fn dirichlet_run_end_to_end() {
        let toml = synthetic_toml("").replace(
            "partition = \"iid\"",
            "partition = \"dirichlet\"\ndirichlet_alpha = 0.5",
        );
        let exp = parse_config(&toml).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = outputs(dir.path());
        let summary = run_experiment(&exp, &out).unwrap();
        assert!(summary.final_test_accuracy.is_some());
    }
}
