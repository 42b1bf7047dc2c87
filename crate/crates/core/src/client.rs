//! Per-domain client: local training, update construction, uploads and
//! evaluation for every supported method.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    grad_trainables, shuffle, AdapterSet, BackboneParams, Composition, DeltaMap, EffectiveModel,
    LayerId, Sample, TrainableGrads,
};
use crate::datagen::{tail, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::lowrank::{normalize_direction, AdapterPair};
use crate::metrics::{record_from_ranks, rank_of, MetricRecord};
use crate::wire::{self, Factors};

/// Entry clip bound applied before local differential-privacy noise.
pub const LDP_CLIP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fedecider,
    WoDecomp,
    WoPer,
    WoSep,
    LocalOnly,
    Fedavg,
    Pfedavg,
    Fedprox,
    FfaLora,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::Fedecider,
        Mode::WoDecomp,
        Mode::WoPer,
        Mode::WoSep,
        Mode::LocalOnly,
        Mode::Fedavg,
        Mode::Pfedavg,
        Mode::Fedprox,
        Mode::FfaLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fedecider => "fedecider",
            Mode::WoDecomp => "wo_decomp",
            Mode::WoPer => "wo_per",
            Mode::WoSep => "wo_sep",
            Mode::LocalOnly => "local_only",
            Mode::Fedavg => "fedavg",
            Mode::Pfedavg => "pfedavg",
            Mode::Fedprox => "fedprox",
            Mode::FfaLora => "ffa_lora",
        }
    }

    /// Modes whose server broadcasts every client's update to every client.
    pub fn broadcasts_all(self) -> bool {
        matches!(
            self,
            Mode::Fedecider | Mode::WoDecomp | Mode::WoPer | Mode::WoSep
        )
    }

    /// Broadcast modes that rescale each update to unit norm.
    pub fn normalizes(self) -> bool {
        matches!(self, Mode::Fedecider | Mode::WoPer)
    }

    pub fn learns_alpha(self) -> bool {
        matches!(self, Mode::Fedecider | Mode::WoDecomp | Mode::WoSep)
    }

    /// Modes whose server averages uploads into one shared adapter set.
    pub fn averages(self) -> bool {
        matches!(
            self,
            Mode::Fedavg | Mode::Pfedavg | Mode::Fedprox | Mode::FfaLora
        )
    }

    pub fn communicates(self) -> bool {
        self != Mode::LocalOnly
    }

    pub fn upload_factors(self) -> Factors {
        if self == Mode::FfaLora {
            Factors::BOnly
        } else {
            Factors::Both
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!("unknown method {s:?} (expected one of {})", known.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreCommunication,
    Federated,
}

/// Client `i`'s weights over every source client, shared by all layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalWeights {
    alpha: Vec<f64>,
    trainable: bool,
}

impl PersonalWeights {
    pub fn new(alpha: Vec<f64>, trainable: bool) -> Result<Self> {
        if alpha.is_empty() || !alpha.iter().all(|a| a.is_finite()) {
            return Err(Error::config("α must be non-empty and finite"));
        }
        Ok(Self { alpha, trainable })
    }

    pub fn constant(k: usize, value: f64, trainable: bool) -> Result<Self> {
        Self::new(vec![value; k], trainable)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k], false)
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr_adapter: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    /// Proximal weight, used by `fedprox` only.
    pub prox_mu: f64,
    /// Contexts are clipped to their most recent `max_context` items.
    pub max_context: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr_adapter: 1e-3,
            lr_alpha: 1e-3,
            batch_size: 64,
            prox_mu: 0.01,
            max_context: 20,
        }
    }
}

/// An encoded upload and the parameter count it carries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Upload {
    pub client: usize,
    pub bytes: Vec<u8>,
    pub params: usize,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    id: usize,
    mode: Mode,
    phase: Phase,
    dataset: InteractionDataset,
    samples: Vec<Sample>,
    adapters: AdapterSet,
    anchor: Option<AdapterSet>,
    received: BTreeMap<LayerId, Vec<AdapterPair>>,
    weights: PersonalWeights,
    settings: TrainSettings,
    rng: ChaCha8Rng,
    post_adapted: bool,
}

impl ClientState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        num_clients: usize,
        mode: Mode,
        dataset: InteractionDataset,
        adapters: AdapterSet,
        settings: TrainSettings,
        alpha_init: f64,
        batch_seed: u64,
    ) -> Result<Self> {
        if id >= num_clients {
            return Err(Error::config(format!("client {id} of {num_clients}")));
        }
        if settings.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let weights = match mode {
            Mode::WoPer => PersonalWeights::uniform(num_clients)?,
            m => PersonalWeights::constant(num_clients, alpha_init, m.learns_alpha())?,
        };
        let samples = dataset.train_samples(settings.max_context);
        Ok(Self {
            id,
            mode,
            phase: Phase::PreCommunication,
            dataset,
            samples,
            anchor: None,
            adapters,
            received: BTreeMap::new(),
            weights,
            settings,
            rng: ChaCha8Rng::seed_from_u64(batch_seed),
            post_adapted: false,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn dataset(&self) -> &InteractionDataset {
        &self.dataset
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn received(&self) -> &BTreeMap<LayerId, Vec<AdapterPair>> {
        &self.received
    }

    pub fn weights(&self) -> &PersonalWeights {
        &self.weights
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn settings_mut(&mut self) -> &mut TrainSettings {
        &mut self.settings
    }

    pub fn train_samples(&self) -> &[Sample] {
        &self.samples
    }

    fn composition(&self) -> Composition<'_> {
        if self.phase == Phase::PreCommunication || !self.mode.broadcasts_all() {
            return Composition::Own;
        }
        let (received, alpha, self_index) = (&self.received, self.weights.values(), self.id);
        if self.mode == Mode::WoSep {
            Composition::Separate {
                received,
                alpha,
                self_index,
            }
        } else {
            Composition::Weighted {
                received,
                alpha,
                self_index,
            }
        }
    }

    /// The per-layer delta this client currently applies to the backbone.
    pub fn build_update(&self) -> Result<DeltaMap> {
        self.composition().deltas(&self.adapters)
    }

    /// Loss and gradients at the current state, including the proximal term.
    pub fn gradients(&self, params: &BackboneParams, batch: &[Sample], batch_index: usize) -> Result<TrainableGrads> {
        let mut grads = grad_trainables(params, &self.adapters, &self.composition(), batch, batch_index)?;
        if let (Mode::Fedprox, Some(anchor)) = (self.mode, &self.anchor) {
            let mu = self.settings.prox_mu;
            for p in self.adapters.iter() {
                let a = anchor
                    .get(p.layer_id)
                    .ok_or_else(|| Error::protocol(format!("no anchor for layer {}", p.layer_id)))?;
                let da = &p.a_mat - &a.a_mat;
                let db = &p.b_mat - &a.b_mat;
                grads.loss += 0.5 * mu * (da.iter().map(|v| v * v).sum::<f64>() + db.iter().map(|v| v * v).sum::<f64>());
                let g = grads.own.get_mut(&p.layer_id).expect("gradient per own layer");
                g.a_mat.scaled_add(mu, &da);
                g.b_mat.scaled_add(mu, &db);
            }
        }
        Ok(grads)
    }

    /// Runs `epochs` passes of plain gradient descent over shuffled batches
    /// and returns the mean batch loss of each epoch.
    pub fn local_train(&mut self, params: &BackboneParams, epochs: usize, round: usize) -> Result<Vec<f64>> {
        if !params.is_frozen() {
            return Err(Error::contract("local training needs a frozen backbone"));
        }
        if self.phase == Phase::Federated && self.mode.broadcasts_all() && self.received.is_empty() {
            return Err(Error::protocol(format!(
                "client {} has no received components",
                self.id
            )));
        }
        if self.samples.is_empty() {
            return Ok(vec![0.0; epochs]);
        }
        let train_alpha = self.phase == Phase::Federated
            && self.mode.broadcasts_all()
            && self.weights.trainable;
        let train_a = self.mode != Mode::FfaLora;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            shuffle(&mut order, &mut self.rng);
            let mut total = 0.0;
            let mut batches = 0;
            for (bi, chunk) in order.chunks(self.settings.batch_size).enumerate() {
                let batch: Vec<Sample> = chunk.iter().map(|&i| self.samples[i].clone()).collect();
                let grads = self.gradients(params, &batch, bi).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!(
                        "client {}, round {round}, epoch {epoch}: {m}",
                        self.id
                    )),
                    other => other,
                })?;
                let lr = self.settings.lr_adapter;
                for p in self.adapters.iter_mut() {
                    let g = &grads.own[&p.layer_id];
                    if train_a {
                        p.a_mat.scaled_add(-lr, &g.a_mat);
                    }
                    p.b_mat.scaled_add(-lr, &g.b_mat);
                }
                if train_alpha {
                    for (a, g) in self.weights.alpha.iter_mut().zip(&grads.alpha) {
                        *a -= self.settings.lr_alpha * g;
                    }
                }
                total += grads.loss;
                batches += 1;
            }
            history.push(total / batches as f64);
        }
        Ok(history)
    }

    /// Post-hoc local adaptation after the last aggregation. Runs once;
    /// later calls leave the adapters alone.
    pub fn post_adapt(&mut self, params: &BackboneParams, epochs: usize) -> Result<Vec<f64>> {
        if self.post_adapted {
            return Ok(Vec::new());
        }
        let losses = self.local_train(params, epochs, usize::MAX)?;
        self.post_adapted = true;
        Ok(losses)
    }

    /// Encodes the own adapters as stored; α is never folded in.
    pub fn make_upload(&self) -> Upload {
        let factors = self.mode.upload_factors();
        Upload {
            client: self.id,
            bytes: wire::encode_adapters(self.adapters.iter(), factors),
            params: wire::param_count(self.adapters.iter(), factors),
        }
    }

    /// Upload of locally normalized, clipped and Laplace-perturbed adapters.
    pub fn make_private_upload(&self, epsilon: f64, seed: u64) -> Result<Upload> {
        let noisy = apply_ldp_noise(&self.adapters, epsilon, seed)?;
        let factors = self.mode.upload_factors();
        Ok(Upload {
            client: self.id,
            bytes: wire::encode_adapters(noisy.iter(), factors),
            params: wire::param_count(noisy.iter(), factors),
        })
    }

    /// Installs a broadcast. `own` replaces the trainable adapters when given.
    pub fn install_broadcast(
        &mut self,
        received: BTreeMap<LayerId, Vec<AdapterPair>>,
        own: Option<Vec<AdapterPair>>,
    ) -> Result<()> {
        if !self.mode.broadcasts_all() {
            return Err(Error::protocol(format!("{} does not take broadcasts", self.mode)));
        }
        for l in self.adapters.layer_ids() {
            let list = received
                .get(&l)
                .ok_or_else(|| Error::protocol(format!("broadcast misses layer {l}")))?;
            if list.len() != self.weights.len() {
                return Err(Error::protocol(format!(
                    "layer {l}: {} components for {} clients",
                    list.len(),
                    self.weights.len()
                )));
            }
        }
        if let Some(pairs) = own {
            for p in pairs {
                let slot = self
                    .adapters
                    .get_mut(p.layer_id)
                    .ok_or_else(|| Error::protocol(format!("unknown layer {}", p.layer_id)))?;
                if slot.a_mat.dim() != p.a_mat.dim() || slot.b_mat.dim() != p.b_mat.dim() {
                    return Err(Error::dim(format!("own direction for {} has wrong shape", p.layer_id)));
                }
                *slot = p;
            }
        }
        self.received = received;
        self.phase = Phase::Federated;
        Ok(())
    }

    /// Installs the server's aggregate as the own adapters.
    pub fn install_global(&mut self, global: AdapterSet) -> Result<()> {
        if !self.mode.averages() {
            return Err(Error::protocol(format!("{} does not take an aggregate", self.mode)));
        }
        if global.len() != self.adapters.len() {
            return Err(Error::protocol("aggregate covers a different layer set"));
        }
        if self.mode == Mode::Fedprox {
            self.anchor = Some(global.clone());
        }
        self.adapters = global;
        self.phase = Phase::Federated;
        Ok(())
    }

    pub fn evaluate(&self, params: &BackboneParams, split: Split, k_list: &[usize], round: usize) -> Result<MetricRecord> {
        let examples = self.dataset.eval_examples(split);
        if examples.is_empty() {
            return Err(Error::Evaluation(format!("client {} has an empty {split:?} split", self.id)));
        }
        let deltas = self.build_update()?;
        let model = EffectiveModel::new(params, &deltas)?;
        let range = self.dataset.items;
        let ids: Vec<usize> = (range.start..range.end()).collect();
        let ranks = examples
            .iter()
            .map(|ex| {
                let scores = model.score(&tail(&ex.context, self.settings.max_context), range)?;
                rank_of(&ids, scores.as_slice().expect("contiguous logits"), ex.target)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(record_from_ranks(&ranks, k_list, self.id, round, split))
    }
}

/// Normalizes each pair to a unit-norm product, clips every entry to
/// `[-LDP_CLIP, LDP_CLIP]` and adds Laplace noise of scale `2·LDP_CLIP/ε`.
/// Pairs with a zero product are clipped and perturbed without rescaling.
pub fn apply_ldp_noise(adapters: &AdapterSet, epsilon: f64, seed: u64) -> Result<AdapterSet> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::config(format!("LDP epsilon must be positive, got {epsilon}")));
    }
    let scale = 2.0 * LDP_CLIP / epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = adapters.clone();
    for p in out.iter_mut() {
        if let Ok(c) = normalize_direction(p, 0, 0) {
            *p = c.to_pair();
        }
        for m in [&mut p.a_mat, &mut p.b_mat] {
            m.mapv_inplace(|v| v.clamp(-LDP_CLIP, LDP_CLIP) + laplace(&mut rng, scale));
        }
    }
    Ok(out)
}

fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}
