//! Synthetic multi-domain interaction data and CSV ingestion.
//!
//! Every domain owns `num_clusters` prototype vectors in a shared latent
//! space. For each cluster index the `K` domain prototypes are built from
//! `K` orthonormal Gaussian draws mixed by the Cholesky factor of the
//! similarity matrix, so the cross-domain cosine of matching prototypes
//! equals the requested similarity. A domain's cluster-to-cluster
//! transition logits are linear in its prototypes, which makes similar
//! domains behave alike. Users walk over clusters and pick items uniformly
//! inside each visited cluster.
//!
//! The pooled pretraining sample follows a generic walk shared by all
//! domains: a user keeps its cluster with probability `pooled_cluster_stay`
//! and otherwise jumps to a uniformly random cluster, and it may move to
//! another domain (weighted by similarity) while keeping its cluster. The
//! backbone therefore learns which items belong together, across domains,
//! but none of the domain-specific transitions.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{shuffle, ItemRange, Sample};
use crate::error::{Error, Result};

/// Global id 0 is the padding token; domain `k` owns
/// `[1 + k·V, 1 + (k+1)·V)`.
pub const PADDING_ID: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainWorld {
    pub num_domains: usize,
    pub vocab_per_domain: usize,
    pub users_per_domain: usize,
    pub num_clusters: usize,
    /// `K × K`, symmetric, unit diagonal, off-diagonals in `[0, 1]`.
    pub similarity: Vec<Vec<f64>>,
    pub latent_dim: usize,
    pub transition_temperature: f64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    pub pooled_sequences: usize,
    /// Probability that a pooled user stays in its current domain at each step.
    pub pooled_stay_prob: f64,
    /// Probability that a pooled user stays in its current cluster at each step.
    pub pooled_cluster_stay: f64,
    pub seed: u64,
}

impl Default for DomainWorld {
    fn default() -> Self {
        Self {
            num_domains: 3,
            vocab_per_domain: 100,
            users_per_domain: 400,
            num_clusters: 8,
            similarity: vec![
                vec![1.0, 0.8, 0.1],
                vec![0.8, 1.0, 0.1],
                vec![0.1, 0.1, 1.0],
            ],
            latent_dim: 16,
            transition_temperature: 16.0,
            min_seq_len: 5,
            max_seq_len: 10,
            pooled_sequences: 300,
            pooled_stay_prob: 0.5,
            pooled_cluster_stay: 0.5,
            seed: 7,
        }
    }
}

impl DomainWorld {
    pub fn domain_range(&self, k: usize) -> ItemRange {
        ItemRange {
            start: 1 + k * self.vocab_per_domain,
            len: self.vocab_per_domain,
        }
    }

    /// Items across all domains plus the padding id.
    pub fn vocab_size(&self) -> usize {
        1 + self.num_domains * self.vocab_per_domain
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let k = self.num_domains;
        if k < 2 {
            problems.push(format!("num_domains {k} < 2"));
        }
        if self.num_clusters < 2 {
            problems.push(format!("num_clusters {} < 2", self.num_clusters));
        }
        if self.vocab_per_domain < self.num_clusters {
            problems.push(format!(
                "vocab_per_domain {} < num_clusters {}",
                self.vocab_per_domain, self.num_clusters
            ));
        }
        if self.users_per_domain < 10 {
            problems.push(format!("users_per_domain {} < 10", self.users_per_domain));
        }
        if self.latent_dim < k {
            problems.push(format!("latent_dim {} < num_domains {k}", self.latent_dim));
        }
        if self.min_seq_len < 3 || self.min_seq_len > self.max_seq_len {
            problems.push(format!(
                "sequence lengths [{}, {}] invalid (need 3 <= min <= max)",
                self.min_seq_len, self.max_seq_len
            ));
        }
        if !(self.transition_temperature.is_finite() && self.transition_temperature >= 0.0) {
            problems.push("transition_temperature must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.pooled_stay_prob) {
            problems.push("pooled_stay_prob must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.pooled_cluster_stay) {
            problems.push("pooled_cluster_stay must lie in [0, 1]".into());
        }
        if self.similarity.len() != k || self.similarity.iter().any(|r| r.len() != k) {
            problems.push(format!("similarity must be {k}×{k}"));
        } else {
            for i in 0..k {
                if (self.similarity[i][i] - 1.0).abs() > 1e-12 {
                    problems.push(format!("similarity[{i}][{i}] must be 1"));
                }
                for j in 0..k {
                    let v = self.similarity[i][j];
                    if !(0.0..=1.0).contains(&v) {
                        problems.push(format!("similarity[{i}][{j}] = {v} outside [0, 1]"));
                    }
                    if (v - self.similarity[j][i]).abs() > 1e-12 {
                        problems.push(format!("similarity not symmetric at ({i}, {j})"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// One user's time-ordered interactions (global item ids).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

/// A held-out prediction: `target` follows `context`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub user: usize,
    pub context: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveOneOut {
    /// Training prefix per retained user.
    pub train: Vec<UserSequence>,
    pub val: Vec<EvalExample>,
    pub test: Vec<EvalExample>,
    /// Users dropped for having fewer than three interactions.
    pub excluded: usize,
}

/// Last item is the test target, second-to-last the validation target,
/// the remainder the training prefix.
pub fn split_leave_one_out(sequences: &[UserSequence]) -> LeaveOneOut {
    let mut out = LeaveOneOut::default();
    for s in sequences {
        let n = s.items.len();
        if n < 3 {
            out.excluded += 1;
            continue;
        }
        let train = s.items[..n - 2].to_vec();
        out.val.push(EvalExample {
            user: s.user,
            context: train.clone(),
            target: s.items[n - 2],
        });
        out.test.push(EvalExample {
            user: s.user,
            context: s.items[..n - 1].to_vec(),
            target: s.items[n - 1],
        });
        out.train.push(UserSequence {
            user: s.user,
            items: train,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

/// One domain's users and their leave-one-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub domain: usize,
    pub items: ItemRange,
    pub sequences: Vec<UserSequence>,
    pub split: LeaveOneOut,
}

impl InteractionDataset {
    pub fn new(domain: usize, items: ItemRange, sequences: Vec<UserSequence>) -> Self {
        let split = split_leave_one_out(&sequences);
        Self {
            domain,
            items,
            sequences,
            split,
        }
    }

    /// Every next-item pair inside the training prefixes, contexts clipped
    /// to the most recent `max_len` items.
    pub fn train_samples(&self, max_len: usize) -> Vec<Sample> {
        let mut out = Vec::new();
        for s in &self.split.train {
            for t in 1..s.items.len() {
                out.push(Sample {
                    context: tail(&s.items[..t], max_len),
                    target: s.items[t],
                    candidates: self.items,
                });
            }
        }
        out
    }

    pub fn eval_examples(&self, split: Split) -> &[EvalExample] {
        match split {
            Split::Val => &self.split.val,
            Split::Test => &self.split.test,
        }
    }
}

pub(crate) fn tail(items: &[usize], max_len: usize) -> Vec<usize> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

/// A pooled pretraining sequence; items may come from several domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PooledSequence {
    pub items: Vec<usize>,
    pub domains: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedWorld {
    pub world: DomainWorld,
    pub domains: Vec<InteractionDataset>,
    pub pooled: Vec<PooledSequence>,
    /// Per domain, `num_clusters × latent_dim` prototypes (row per cluster).
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// Per domain, the cluster of each local item.
    pub item_clusters: Vec<Vec<usize>>,
}

impl GeneratedWorld {
    /// Next-item pairs from the pooled sample; every target is scored
    /// against its own domain's vocabulary.
    pub fn pooled_samples(&self, max_len: usize) -> Vec<Sample> {
        let mut out = Vec::new();
        for s in &self.pooled {
            for t in 1..s.items.len() {
                out.push(Sample {
                    context: tail(&s.items[..t], max_len),
                    target: s.items[t],
                    candidates: self.world.domain_range(s.domains[t]),
                });
            }
        }
        out
    }

    /// Mean cosine between matching-cluster prototypes of two domains.
    pub fn prototype_cosine(&self, a: usize, b: usize) -> f64 {
        prototype_cosine(&self.prototypes[a], &self.prototypes[b])
    }
}

pub fn prototype_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (nx * ny)
    };
    a.iter().zip(b).map(|(x, y)| cos(x, y)).sum::<f64>() / a.len() as f64
}

/// Lower-triangular `L` with `L Lᵀ = S`, tolerating positive semidefinite input.
fn psd_cholesky(s: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = s.len();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = s[j][j];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -1e-10 {
            return Err(Error::config(format!(
                "similarity matrix is not positive semidefinite (pivot {j} = {d:.3e})"
            )));
        }
        let d = d.max(0.0).sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut v = s[i][j];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = if d > 1e-12 {
                v / d
            } else if v.abs() > 1e-8 {
                return Err(Error::config(
                    "similarity matrix is not positive semidefinite".to_string(),
                ));
            } else {
                0.0
            };
        }
    }
    Ok(l)
}

fn orthonormal_draws(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        for u in &out {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        let n = v.norm();
        if n > 1e-8 {
            out.push(v / n);
        }
    }
    out
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn generate_world(world: &DomainWorld) -> Result<GeneratedWorld> {
    world.validate()?;
    let k = world.num_domains;
    let c = world.num_clusters;
    let m = world.latent_dim;
    let chol = psd_cholesky(&world.similarity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);

    let mut prototypes = vec![vec![vec![0.0; m]; c]; k];
    for ci in 0..c {
        let z = orthonormal_draws(&mut rng, k, m);
        for (dk, proto) in prototypes.iter_mut().enumerate() {
            let mut p = DVector::zeros(m);
            for (l, zl) in z.iter().enumerate() {
                p += zl * chol[(dk, l)];
            }
            proto[ci] = p.iter().copied().collect();
        }
    }

    // Shared "successor" vectors; transition logits are linear in the prototypes.
    let successors = orthonormal_draws(&mut rng, c.min(m), m);
    let successors: Vec<DVector<f64>> = (0..c)
        .map(|i| {
            if i < successors.len() {
                successors[i].clone()
            } else {
                let v = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                let n = v.norm();
                v / n
            }
        })
        .collect();
    let transitions: Vec<Vec<Vec<f64>>> = prototypes
        .iter()
        .map(|proto| {
            proto
                .iter()
                .map(|p| {
                    let p = DVector::from_column_slice(p);
                    let logits: Vec<f64> = successors
                        .iter()
                        .map(|q| world.transition_temperature * p.dot(q))
                        .collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / sum).collect()
                })
                .collect()
        })
        .collect();

    let item_clusters: Vec<Vec<usize>> = (0..k)
        .map(|_| {
            let mut order: Vec<usize> = (0..world.vocab_per_domain).collect();
            shuffle(&mut order, &mut rng);
            let mut assign = vec![0; world.vocab_per_domain];
            for (pos, &item) in order.iter().enumerate() {
                assign[item] = pos % c;
            }
            assign
        })
        .collect();
    let members: Vec<Vec<Vec<usize>>> = item_clusters
        .iter()
        .map(|assign| {
            let mut m = vec![Vec::new(); c];
            for (item, &cl) in assign.iter().enumerate() {
                m[cl].push(item);
            }
            m
        })
        .collect();

    let pick_item = |rng: &mut ChaCha8Rng, dk: usize, cl: usize| {
        let pool = &members[dk][cl];
        world.domain_range(dk).start + pool[rng.random_range(0..pool.len())]
    };

    let mut domains = Vec::with_capacity(k);
    for dk in 0..k {
        let mut seqs = Vec::with_capacity(world.users_per_domain);
        for u in 0..world.users_per_domain {
            let len = rng.random_range(world.min_seq_len..=world.max_seq_len);
            let mut cl = rng.random_range(0..c);
            let mut items = Vec::with_capacity(len);
            for _ in 0..len {
                items.push(pick_item(&mut rng, dk, cl));
                cl = sample_index(&mut rng, &transitions[dk][cl]);
            }
            seqs.push(UserSequence {
                user: dk * world.users_per_domain + u,
                items,
            });
        }
        domains.push(InteractionDataset::new(dk, world.domain_range(dk), seqs));
    }

    let mut pooled = Vec::with_capacity(world.pooled_sequences);
    for _ in 0..world.pooled_sequences {
        let len = rng.random_range(world.min_seq_len..=world.max_seq_len);
        let mut dk = rng.random_range(0..k);
        let mut cl = rng.random_range(0..c);
        let mut items = Vec::with_capacity(len);
        let mut doms = Vec::with_capacity(len);
        for _ in 0..len {
            items.push(pick_item(&mut rng, dk, cl));
            doms.push(dk);
            if rng.random::<f64>() >= world.pooled_cluster_stay {
                cl = rng.random_range(0..c);
            }
            if rng.random::<f64>() >= world.pooled_stay_prob {
                let weights: Vec<f64> = (0..k)
                    .map(|j| if j == dk { 0.0 } else { world.similarity[dk][j] })
                    .collect();
                let total: f64 = weights.iter().sum();
                if total > 0.0 {
                    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
                    dk = sample_index(&mut rng, &probs);
                }
            }
        }
        pooled.push(PooledSequence {
            items,
            domains: doms,
        });
    }

    Ok(GeneratedWorld {
        world: world.clone(),
        domains,
        pooled,
        prototypes,
        item_clusters,
    })
}

/// Writes `user_id,item_id,timestamp,domain` rows; timestamps are positions.
pub fn export_csv<W: Write>(domains: &[InteractionDataset], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "item_id", "timestamp", "domain"])?;
    for d in domains {
        for s in &d.sequences {
            for (t, item) in s.items.iter().enumerate() {
                w.write_record([
                    s.user.to_string(),
                    (item - d.items.start).to_string(),
                    t.to_string(),
                    d.domain.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv_file(domains: &[InteractionDataset], path: &Path) -> Result<()> {
    export_csv(domains, std::fs::File::create(path)?)
}

pub fn ingest_csv_file(path: &Path) -> Result<Vec<InteractionDataset>> {
    ingest_csv(std::fs::File::open(path)?)
}

/// Groups rows by user, orders each user's rows by timestamp (stable for
/// ties), and maps every domain's item ids onto a dense block of global ids.
/// Domains are laid out in ascending order of their label, each sized to
/// the largest domain so ranges stay disjoint.
pub fn ingest_csv<R: Read>(input: R) -> Result<Vec<InteractionDataset>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let expected = ["user_id", "item_id", "timestamp", "domain"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }

    struct Row {
        ts: f64,
        order: usize,
        item: String,
    }
    let mut users: BTreeMap<String, (String, Vec<Row>)> = BTreeMap::new();
    let mut user_order: Vec<String> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let user = rec[0].to_string();
        let item = rec[1].to_string();
        let domain = rec[3].to_string();
        if user.is_empty() || item.is_empty() || domain.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty field".into(),
            });
        }
        let ts: f64 = rec[2].parse().map_err(|_| Error::Parse {
            line,
            message: format!("timestamp {:?} is not numeric", &rec[2]),
        })?;
        if !ts.is_finite() {
            return Err(Error::Parse {
                line,
                message: "timestamp is not finite".into(),
            });
        }
        let entry = users.entry(user.clone()).or_insert_with(|| {
            user_order.push(user.clone());
            (domain.clone(), Vec::new())
        });
        if entry.0 != domain {
            return Err(Error::Data(format!(
                "user {user} appears in domains {} and {domain} (line {line})",
                entry.0
            )));
        }
        entry.1.push(Row {
            ts,
            order: i,
            item,
        });
    }

    let mut domain_labels: Vec<String> = users.values().map(|(d, _)| d.clone()).collect();
    domain_labels.sort_by(|a, b| label_order(a, b));
    domain_labels.dedup();

    // Dense per-domain item ids in order of first appearance.
    let mut item_maps: Vec<HashMap<String, usize>> = vec![HashMap::new(); domain_labels.len()];
    let dom_index = |label: &str| {
        domain_labels
            .iter()
            .position(|d| d == label)
            .expect("label collected above")
    };
    let mut grouped: Vec<Vec<(usize, Vec<String>)>> = vec![Vec::new(); domain_labels.len()];
    for (uidx, user) in user_order.iter().enumerate() {
        let (domain, rows) = users.get_mut(user).expect("user collected above");
        rows.sort_by(|a, b| a.ts.total_cmp(&b.ts).then(a.order.cmp(&b.order)));
        let di = dom_index(domain);
        grouped[di].push((uidx, rows.iter().map(|r| r.item.clone()).collect()));
    }
    // Item ids are assigned in time order over the user sequence order.
    for (di, users) in grouped.iter().enumerate() {
        for (_, items) in users {
            for it in items {
                let next = item_maps[di].len();
                item_maps[di].entry(it.clone()).or_insert(next);
            }
        }
    }
    let width = item_maps.iter().map(|m| m.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(domain_labels.len());
    for (di, users) in grouped.into_iter().enumerate() {
        let range = ItemRange {
            start: 1 + di * width,
            len: width,
        };
        let seqs = users
            .into_iter()
            .map(|(uidx, items)| UserSequence {
                user: user_order[uidx].parse().unwrap_or(uidx),
                items: items
                    .iter()
                    .map(|it| range.start + item_maps[di][it])
                    .collect(),
            })
            .collect();
        out.push(InteractionDataset::new(di, range, seqs));
    }
    Ok(out)
}

/// Numeric labels sort numerically, anything else lexically after them.
fn label_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        _ => a.cmp(b),
    }
}
