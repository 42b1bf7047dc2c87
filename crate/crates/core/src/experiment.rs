//! End-to-end experiment runner and result files.
//!
//! Every random stream is seeded from the master seed through
//! [`stream_seed`], so a stage can be replayed on its own:
//!
//! | stream | tag |
//! |---|---|
//! | synthetic world | 1 |
//! | backbone init | 2 |
//! | pretraining batch order | 3 |
//! | adapter init | 4 |
//! | client batch order (per client) | 5 |
//! | upload noise | 6 |
//! | CSV pooled hold-out | 7 |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    init_backbone, pretrain_backbone, AdapterSet, BackboneConfig, BackboneParams, ItemRange,
    PretrainSettings, Sample,
};
use crate::client::{ClientState, Mode, TrainSettings};
use crate::datagen::{generate_world, ingest_csv_file, tail, DomainWorld, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    alpha_rows, alpha_trajectory, metric_rows, write_alpha_csv, write_metric_csv, AlphaTrajectory,
    MetricRecord, MetricRow,
};
use crate::server::{comm_accounting, finalize_models, mix, CommSummary, LdpSettings, RoundLog, Server};

pub const STREAM_WORLD: u64 = 1;
pub const STREAM_BACKBONE: u64 = 2;
pub const STREAM_PRETRAIN: u64 = 3;
pub const STREAM_ADAPTERS: u64 = 4;
pub const STREAM_BATCHES: u64 = 5;
pub const STREAM_NOISE: u64 = 6;
pub const STREAM_HOLDOUT: u64 = 7;

pub fn stream_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix(master, stream, index)
}

/// Flat experiment configuration. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub method: Mode,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Interaction CSV to use instead of the synthetic world.
    pub data_csv: Option<PathBuf>,
    /// Share of each CSV domain's users held out for pretraining.
    pub csv_pooled_fraction: f64,

    pub num_domains: usize,
    pub vocab_per_domain: usize,
    pub users_per_domain: usize,
    pub num_clusters: usize,
    pub similarity: Vec<Vec<f64>>,
    pub latent_dim: usize,
    pub transition_temperature: f64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    pub pooled_sequences: usize,
    pub pooled_stay_prob: f64,
    pub pooled_cluster_stay: f64,

    pub embed_dim: usize,
    pub num_blocks: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,

    pub rank: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_adapter: f64,
    pub lr_alpha: f64,
    pub alpha_init: f64,
    pub prox_mu: f64,
    pub ldp_epsilon: Option<f64>,
    pub post_epochs: usize,
    pub k_list: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = DomainWorld::default();
        Self {
            run_id: "run".into(),
            method: Mode::Fedecider,
            seed: 7,
            output_dir: None,
            data_csv: None,
            csv_pooled_fraction: 0.1,
            num_domains: w.num_domains,
            vocab_per_domain: w.vocab_per_domain,
            users_per_domain: w.users_per_domain,
            num_clusters: w.num_clusters,
            similarity: w.similarity,
            latent_dim: w.latent_dim,
            transition_temperature: w.transition_temperature,
            min_seq_len: w.min_seq_len,
            max_seq_len: w.max_seq_len,
            pooled_sequences: w.pooled_sequences,
            pooled_stay_prob: w.pooled_stay_prob,
            pooled_cluster_stay: w.pooled_cluster_stay,
            embed_dim: 32,
            num_blocks: 2,
            pretrain_epochs: 15,
            pretrain_lr: 0.5,
            pretrain_batch_size: 32,
            rank: 8,
            rounds: 20,
            local_epochs: 5,
            batch_size: 64,
            lr_adapter: 0.02,
            lr_alpha: 0.05,
            alpha_init: 2.0,
            prox_mu: 0.01,
            ldp_epsilon: None,
            post_epochs: 5,
            k_list: vec![5, 10],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn world(&self) -> DomainWorld {
        DomainWorld {
            num_domains: self.num_domains,
            vocab_per_domain: self.vocab_per_domain,
            users_per_domain: self.users_per_domain,
            num_clusters: self.num_clusters,
            similarity: self.similarity.clone(),
            latent_dim: self.latent_dim,
            transition_temperature: self.transition_temperature,
            min_seq_len: self.min_seq_len,
            max_seq_len: self.max_seq_len,
            pooled_sequences: self.pooled_sequences,
            pooled_stay_prob: self.pooled_stay_prob,
            pooled_cluster_stay: self.pooled_cluster_stay,
            seed: stream_seed(self.seed, STREAM_WORLD, 0),
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lr_adapter: self.lr_adapter,
            lr_alpha: self.lr_alpha,
            batch_size: self.batch_size,
            prox_mu: self.prox_mu,
            max_context: self.max_seq_len,
        }
    }

    /// Reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        };
        positive("embed_dim", self.embed_dim as f64);
        positive("num_blocks", self.num_blocks as f64);
        positive("rank", self.rank as f64);
        positive("rounds", self.rounds as f64);
        positive("local_epochs", self.local_epochs as f64);
        positive("batch_size", self.batch_size as f64);
        positive("pretrain_batch_size", self.pretrain_batch_size as f64);
        positive("lr_adapter", self.lr_adapter);
        positive("pretrain_lr", self.pretrain_lr);
        positive("alpha_init", self.alpha_init);
        if !(self.lr_alpha.is_finite() && self.lr_alpha >= 0.0) {
            problems.push(format!("lr_alpha must be non-negative, got {}", self.lr_alpha));
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            problems.push(format!("prox_mu must be non-negative, got {}", self.prox_mu));
        }
        if let Some(e) = self.ldp_epsilon {
            if !(e.is_finite() && e > 0.0) {
                problems.push(format!("ldp_epsilon must be positive, got {e}"));
            }
        }
        if !(0.0..1.0).contains(&self.csv_pooled_fraction) {
            problems.push("csv_pooled_fraction must lie in [0, 1)".into());
        }
        if self.rank > self.embed_dim {
            problems.push(format!("rank {} exceeds embed_dim {}", self.rank, self.embed_dim));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            problems.push("k_list must hold positive cutoffs".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            problems.push(format!("run_id {:?} is not a plain name", self.run_id));
        }
        if self.data_csv.is_none() {
            if let Err(Error::Config(m)) = self.world().validate() {
                problems.push(m);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// Data and frozen backbone shared by every method under one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub domains: Vec<InteractionDataset>,
    pub backbone: BackboneParams,
    pub pretrain_history: Vec<f64>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (domains, pooled, vocab_size) = match &config.data_csv {
        None => {
            let world = config.world();
            let g = generate_world(&world)?;
            let pooled = g.pooled_samples(config.max_seq_len);
            (g.domains, pooled, world.vocab_size())
        }
        Some(path) => {
            let all = ingest_csv_file(path)?;
            let vocab = all.iter().map(|d| d.items.end()).max().unwrap_or(1);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, STREAM_HOLDOUT, 0));
            let mut domains = Vec::new();
            let mut pooled = Vec::new();
            for d in all {
                let mut seqs = d.sequences.clone();
                crate::backbone::shuffle(&mut seqs, &mut rng);
                let hold = (seqs.len() as f64 * config.csv_pooled_fraction).round() as usize;
                let (held, kept) = seqs.split_at(hold);
                let kept: Vec<_> = kept.to_vec();
                for s in held {
                    for t in 1..s.items.len() {
                        pooled.push(Sample {
                            context: tail(&s.items[..t], config.max_seq_len),
                            target: s.items[t],
                            candidates: d.items,
                        });
                    }
                }
                domains.push(InteractionDataset::new(d.domain, d.items, kept));
            }
            (domains, pooled, vocab)
        }
    };
    if domains.len() < 2 {
        return Err(Error::Data(format!("need at least two domains, found {}", domains.len())));
    }
    let bconf = BackboneConfig {
        vocab_size,
        embed_dim: config.embed_dim,
        max_seq_len: config.max_seq_len,
        num_blocks: config.num_blocks,
    };
    let params = init_backbone(bconf, stream_seed(config.seed, STREAM_BACKBONE, 0))?;
    let (backbone, pretrain_history) = pretrain_backbone(
        params,
        &pooled,
        PretrainSettings {
            epochs: config.pretrain_epochs,
            lr: config.pretrain_lr,
            batch_size: config.pretrain_batch_size,
            seed: stream_seed(config.seed, STREAM_PRETRAIN, 0),
        },
    )?;
    Ok(Prepared {
        domains,
        backbone,
        pretrain_history,
    })
}

/// Mean over clients of each metric.
pub fn mean_metrics(records: &[MetricRecord]) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        for (k, v) in &r.values {
            *out.entry(k.clone()).or_default() += v / records.len() as f64;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: Mode,
    pub seed: u64,
    pub rounds: usize,
    /// Test metrics of the finalized models.
    pub final_test: BTreeMap<String, f64>,
    pub last_round_test: BTreeMap<String, f64>,
    /// Round with the highest mean validation NDCG@10 (earliest on ties).
    pub best_val_round: usize,
    pub best_val_round_test: BTreeMap<String, f64>,
    pub alpha_convergence_round: Option<usize>,
    /// Client-by-source weights at the convergence round (or the last round).
    pub settled_alpha: Option<Vec<Vec<f64>>>,
    pub pretrain_loss: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArchive {
    pub config: ExperimentConfig,
    pub logs: Vec<RoundLog>,
    /// Per round, per client.
    pub test_by_round: Vec<Vec<MetricRecord>>,
    pub final_test: Vec<MetricRecord>,
    pub trajectory: Option<AlphaTrajectory>,
    pub comm: CommSummary,
    pub summary: RunSummary,
}

impl RunArchive {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let (id, m) = (&self.config.run_id, self.config.method.name());
        let mut rows = Vec::new();
        for (log, tests) in self.logs.iter().zip(&self.test_by_round) {
            let round = log.round.to_string();
            for (v, t) in log.val.iter().zip(tests) {
                rows.extend(metric_rows(id, m, &round, v));
                rows.extend(metric_rows(id, m, &round, t));
            }
        }
        for t in &self.final_test {
            rows.extend(metric_rows(id, m, "final", t));
        }
        rows
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArchive> {
    let prepared = prepare(config)?;
    run_prepared(config, &prepared)
}

/// Runs one method on already prepared data and backbone.
pub fn run_prepared(config: &ExperimentConfig, prepared: &Prepared) -> Result<RunArchive> {
    config.validate()?;
    let params = &prepared.backbone;
    let k = prepared.domains.len();
    let init = AdapterSet::init(params, config.rank, stream_seed(config.seed, STREAM_ADAPTERS, 0))?;
    let mut clients = prepared
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| {
            ClientState::new(
                i,
                k,
                config.method,
                d.clone(),
                init.clone(),
                config.train_settings(),
                config.alpha_init,
                stream_seed(config.seed, STREAM_BATCHES, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ldp = config.ldp_epsilon.map(|epsilon| LdpSettings {
        epsilon,
        seed: stream_seed(config.seed, STREAM_NOISE, 0),
    });
    let mut server = Server::new(config.method, k, init, ldp, config.k_list.clone());

    let mut logs = Vec::with_capacity(config.rounds);
    let mut test_by_round = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        for c in clients.iter_mut() {
            c.local_train(params, config.local_epochs, round)?;
        }
        let log = server.run_round(&mut clients, params, round)?;
        let tests = clients
            .iter()
            .map(|c| c.evaluate(params, Split::Test, &config.k_list, round))
            .collect::<Result<Vec<_>>>()?;
        logs.push(log);
        test_by_round.push(tests);
    }
    finalize_models(&mut clients, params, config.post_epochs)?;
    let final_test = clients
        .iter()
        .map(|c| c.evaluate(params, Split::Test, &config.k_list, config.rounds))
        .collect::<Result<Vec<_>>>()?;

    let trajectory = if config.method.broadcasts_all() {
        let snaps: Vec<_> = logs.iter().map(|l| (l.round, l.alpha.clone())).collect();
        Some(alpha_trajectory(&snaps)?)
    } else {
        None
    };
    let comm = comm_accounting(&logs)?;

    let select_key = format!("N@{}", config.k_list.iter().max().expect("validated"));
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, log) in logs.iter().enumerate() {
        let v = mean_metrics(&log.val).get(&select_key).copied().unwrap_or(0.0);
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    let summary = RunSummary {
        run_id: config.run_id.clone(),
        method: config.method,
        seed: config.seed,
        rounds: config.rounds,
        final_test: mean_metrics(&final_test),
        last_round_test: mean_metrics(test_by_round.last().expect("rounds > 0")),
        best_val_round: logs[best].round,
        best_val_round_test: mean_metrics(&test_by_round[best]),
        alpha_convergence_round: trajectory.as_ref().and_then(|t| t.convergence_round),
        settled_alpha: trajectory.as_ref().and_then(|t| t.settled().cloned()),
        pretrain_loss: prepared.pretrain_history.clone(),
    };
    Ok(RunArchive {
        config: config.clone(),
        logs,
        test_by_round,
        final_test,
        trajectory,
        comm,
        summary,
    })
}

/// Output file names inside a run directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const ALPHA_FILE: &str = "alpha.csv";
pub const ALPHA_PLOT_FILE: &str = "alpha_series.csv";
pub const COMM_FILE: &str = "comm.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Serialize)]
struct SeriesRow<'a> {
    run_id: &'a str,
    method: &'a str,
    round: usize,
    series: String,
    alpha: f64,
}

/// Writes every result file into `dir`, replacing earlier copies.
pub fn emit_results(archive: &RunArchive, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let path = |name: &str| dir.join(name);
    let mut written = Vec::new();

    write_metric_csv(&archive.metric_rows(), fs::File::create(path(METRICS_FILE))?)?;
    written.push(path(METRICS_FILE));

    let alpha = archive
        .trajectory
        .as_ref()
        .map(|t| alpha_rows(&archive.config.run_id, t))
        .unwrap_or_default();
    write_alpha_csv(&alpha, fs::File::create(path(ALPHA_FILE))?)?;
    written.push(path(ALPHA_FILE));

    let mut w = csv::Writer::from_path(path(ALPHA_PLOT_FILE))?;
    if alpha.is_empty() {
        w.write_record(["run_id", "method", "round", "series", "alpha"])?;
    }
    for r in &alpha {
        w.serialize(SeriesRow {
            run_id: &r.run_id,
            method: archive.config.method.name(),
            round: r.round,
            series: format!("{}<-{}", r.i, r.j),
            alpha: r.alpha,
        })?;
    }
    w.flush()?;
    written.push(path(ALPHA_PLOT_FILE));

    let mut w = csv::Writer::from_path(path(COMM_FILE))?;
    for r in &archive.comm.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    written.push(path(COMM_FILE));

    let mut f = fs::File::create(path(ROUNDS_FILE))?;
    for log in &archive.logs {
        serde_json::to_writer(&mut f, log)?;
        f.write_all(b"\n")?;
    }
    written.push(path(ROUNDS_FILE));

    fs::write(path(CONFIG_FILE), archive.config.to_toml()?)?;
    written.push(path(CONFIG_FILE));

    fs::write(path(SUMMARY_FILE), serde_json::to_string_pretty(&archive.summary)?)?;
    written.push(path(SUMMARY_FILE));
    Ok(written)
}

/// Re-reads a run directory's metric CSV.
pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Item range of domain `k` in a synthetic world with this config.
pub fn domain_range(config: &ExperimentConfig, k: usize) -> ItemRange {
    config.world().domain_range(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        let partial = ExperimentConfig::from_toml("method = \"fedavg\"\nrank = 16\n").unwrap();
        assert_eq!(partial.method, Mode::Fedavg);
        assert_eq!(partial.rank, 16);
        assert_eq!(partial.rounds, 20);
    }

    #[test]
    fn validation_lists_every_problem() {
        let err = ExperimentConfig::from_toml("rank = 0\nrounds = 0\nlr_adapter = -1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rank") && msg.contains("rounds") && msg.contains("lr_adapter"), "{msg}");
        assert!(ExperimentConfig::from_toml("method = \"sgd\"\n").is_err());
        assert!(ExperimentConfig::from_toml("no_such_key = 1\n").is_err());
    }

    #[test]
    fn stream_seeds_differ() {
        let s: Vec<u64> = (1..=7).map(|t| stream_seed(7, t, 0)).collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_ne!(stream_seed(7, STREAM_BATCHES, 0), stream_seed(7, STREAM_BATCHES, 1));
    }
}
