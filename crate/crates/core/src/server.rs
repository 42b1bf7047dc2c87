//! Round orchestration: uploads, normalization, broadcast, baseline
//! aggregation, finalization and communication accounting.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterSet, BackboneParams, DeltaMap, LayerId};
use crate::client::{ClientState, Mode, Upload};
use crate::datagen::Split;
use crate::error::{Error, Result};
use crate::lowrank::{normalize_direction, AdapterPair, Matrix};
use crate::metrics::MetricRecord;
use crate::wire::{self, Factors};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientTraffic {
    pub client: usize,
    pub upload_params: usize,
    pub upload_bytes: usize,
    pub download_params: usize,
    pub download_bytes: usize,
}

/// A layer whose update was too small to normalize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedLayer {
    pub client: usize,
    pub layer: LayerId,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub method: Mode,
    pub traffic: Vec<ClientTraffic>,
    /// Row `i` holds client `i`'s weights; empty for methods without weights.
    pub alpha: Vec<Vec<f64>>,
    pub val: Vec<MetricRecord>,
    pub skipped: Vec<SkippedLayer>,
    pub wall_time_ms: f64,
}

/// Optional local differential privacy on uploads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdpSettings {
    pub epsilon: f64,
    pub seed: u64,
}

/// Stateless apart from the previous broadcast, which stands in for
/// skipped layers.
#[derive(Clone, Debug)]
pub struct Server {
    mode: Mode,
    num_clients: usize,
    /// Shared adapter initialization; supplies the frozen `A` for FFA-LoRA.
    shared_init: AdapterSet,
    ldp: Option<LdpSettings>,
    k_list: Vec<usize>,
    last_broadcast: Option<BTreeMap<LayerId, Vec<AdapterPair>>>,
}

impl Server {
    pub fn new(
        mode: Mode,
        num_clients: usize,
        shared_init: AdapterSet,
        ldp: Option<LdpSettings>,
        k_list: Vec<usize>,
    ) -> Self {
        Self {
            mode,
            num_clients,
            shared_init,
            ldp,
            k_list,
            last_broadcast: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn collect(&self, clients: &[ClientState], round: usize) -> Result<Vec<(Upload, Vec<AdapterPair>)>> {
        if clients.len() != self.num_clients {
            return Err(Error::protocol(format!(
                "expected {} clients, got {}",
                self.num_clients,
                clients.len()
            )));
        }
        let mut uploads = Vec::with_capacity(clients.len());
        for (i, c) in clients.iter().enumerate() {
            if c.id() != i {
                return Err(Error::protocol(format!("upload from client {i} missing")));
            }
            let up = match self.ldp {
                Some(l) => c.make_private_upload(l.epsilon, mix(l.seed, round as u64, i as u64))?,
                None => c.make_upload(),
            };
            let (pairs, _) = wire::decode_adapters(&up.bytes)?;
            uploads.push((up, pairs));
        }
        Ok(uploads)
    }

    /// Upload, server step, install and validation evaluation for one round.
    /// Every client must have finished its local training for `round`.
    pub fn run_round(&mut self, clients: &mut [ClientState], params: &BackboneParams, round: usize) -> Result<RoundLog> {
        let start = Instant::now();
        let mut skipped = Vec::new();
        let mut traffic: Vec<ClientTraffic> = (0..clients.len())
            .map(|client| ClientTraffic {
                client,
                upload_params: 0,
                upload_bytes: 0,
                download_params: 0,
                download_bytes: 0,
            })
            .collect();

        if self.mode.communicates() {
            let uploads = self.collect(clients, round)?;
            for (t, (up, _)) in traffic.iter_mut().zip(&uploads) {
                t.upload_params = up.params;
                t.upload_bytes = up.bytes.len();
            }
            let pairs: Vec<Vec<AdapterPair>> = uploads.into_iter().map(|(_, p)| p).collect();
            if self.mode.broadcasts_all() {
                let (received, own, skips) = self.broadcast(&pairs, round)?;
                skipped = skips;
                let message = wire::encode_adapters(received.values().flatten(), Factors::Both);
                let params_down = wire::param_count(received.values().flatten(), Factors::Both);
                for (i, c) in clients.iter_mut().enumerate() {
                    traffic[i].download_params = params_down;
                    traffic[i].download_bytes = message.len();
                    let own_i = self.mode.normalizes().then(|| own[i].clone());
                    c.install_broadcast(received.clone(), own_i)?;
                }
                self.last_broadcast = Some(received);
            } else {
                let global = aggregate(self.mode, &pairs, &self.shared_init)?;
                let factors = self.mode.upload_factors();
                let message = wire::encode_adapters(&global, factors);
                let params_down = wire::param_count(&global, factors);
                let set = AdapterSet::from_pairs(params, global)?;
                for (i, c) in clients.iter_mut().enumerate() {
                    traffic[i].download_params = params_down;
                    traffic[i].download_bytes = message.len();
                    c.install_global(set.clone())?;
                }
            }
        }

        let alpha = if self.mode.broadcasts_all() {
            clients.iter().map(|c| c.weights().values().to_vec()).collect()
        } else {
            Vec::new()
        };
        let val = clients
            .iter()
            .map(|c| c.evaluate(params, Split::Val, &self.k_list, round))
            .collect::<Result<Vec<_>>>()?;
        Ok(RoundLog {
            round,
            method: self.mode,
            traffic,
            alpha,
            val,
            skipped,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Per layer, the ordered component list every client receives, each
    /// client's own normalized pairs, and the layers that were skipped.
    #[allow(clippy::type_complexity)]
    fn broadcast(
        &self,
        uploads: &[Vec<AdapterPair>],
        round: usize,
    ) -> Result<(BTreeMap<LayerId, Vec<AdapterPair>>, Vec<Vec<AdapterPair>>, Vec<SkippedLayer>)> {
        let mut received: BTreeMap<LayerId, Vec<AdapterPair>> = BTreeMap::new();
        let mut own = vec![Vec::new(); uploads.len()];
        let mut skipped = Vec::new();
        for (j, pairs) in uploads.iter().enumerate() {
            for p in pairs {
                let entry = if !self.mode.normalizes() {
                    p.clone()
                } else {
                    match normalize_direction(p, j, round) {
                        Ok(c) => {
                            let q = c.to_pair();
                            own[j].push(q.clone());
                            q
                        }
                        Err(Error::ZeroUpdate { norm, .. }) => {
                            skipped.push(SkippedLayer {
                                client: j,
                                layer: p.layer_id,
                                norm,
                            });
                            self.last_broadcast
                                .as_ref()
                                .and_then(|b| b.get(&p.layer_id))
                                .map(|list| list[j].clone())
                                .unwrap_or_else(|| AdapterPair::zeros(p.layer_id, p.rank(), p.d_in(), p.d_out()))
                        }
                        Err(e) => return Err(e),
                    }
                };
                received.entry(p.layer_id).or_default().push(entry);
            }
        }
        for (l, list) in &received {
            if list.len() != uploads.len() {
                return Err(Error::protocol(format!(
                    "layer {l} uploaded by {} of {} clients",
                    list.len(),
                    uploads.len()
                )));
            }
        }
        Ok((received, own, skipped))
    }
}

/// Averages uploads for the parameter-averaging baselines. FFA-LoRA
/// averages `B` only and keeps `A` at the shared initialization.
pub fn aggregate(mode: Mode, uploads: &[Vec<AdapterPair>], shared_init: &AdapterSet) -> Result<Vec<AdapterPair>> {
    if !mode.averages() {
        return Err(Error::protocol(format!("{mode} does not aggregate")));
    }
    let first = uploads
        .first()
        .ok_or_else(|| Error::protocol("no uploads to aggregate"))?;
    let n = uploads.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (li, p0) in first.iter().enumerate() {
        let mut a = Matrix::zeros(p0.a_mat.dim());
        let mut b = Matrix::zeros(p0.b_mat.dim());
        for (ci, up) in uploads.iter().enumerate() {
            let p = up
                .get(li)
                .filter(|p| p.layer_id == p0.layer_id)
                .ok_or_else(|| Error::protocol(format!("client {ci} misses layer {}", p0.layer_id)))?;
            if p.rank() != p0.rank() || p.b_mat.dim() != p0.b_mat.dim() || p.a_mat.dim() != p0.a_mat.dim() {
                return Err(Error::protocol(format!(
                    "layer {}: client {ci} uploaded rank {} but client 0 uploaded rank {}",
                    p0.layer_id,
                    p.rank(),
                    p0.rank()
                )));
            }
            a += &p.a_mat;
            b += &p.b_mat;
        }
        let a_mat = if mode == Mode::FfaLora {
            shared_init
                .get(p0.layer_id)
                .ok_or_else(|| Error::protocol(format!("no initialization for {}", p0.layer_id)))?
                .a_mat
                .clone()
        } else {
            a / n
        };
        out.push(AdapterPair {
            layer_id: p0.layer_id,
            a_mat,
            b_mat: b / n,
        });
    }
    Ok(out)
}

/// Final per-client deltas. PFedAvg clients first run their post-hoc local
/// epochs (once); everyone else combines what they hold without training.
pub fn finalize_models(clients: &mut [ClientState], params: &BackboneParams, post_epochs: usize) -> Result<Vec<DeltaMap>> {
    clients
        .iter_mut()
        .map(|c| {
            if c.mode() == Mode::Pfedavg {
                c.post_adapt(params, post_epochs)?;
            }
            c.build_update()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub method: String,
    pub round: usize,
    pub client: usize,
    pub upload_params: usize,
    pub upload_bytes: usize,
    pub download_params: usize,
    pub download_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub rows: Vec<CommRow>,
    pub total_upload_params: usize,
    pub total_download_params: usize,
    pub total_upload_bytes: usize,
    pub total_download_bytes: usize,
}

/// Tabulates traffic and checks the per-method identities: broadcast
/// methods download `K` times their upload when nothing is skipped,
/// averaging methods download exactly what they upload.
pub fn comm_accounting(logs: &[RoundLog]) -> Result<CommSummary> {
    if logs.is_empty() {
        return Err(Error::protocol("no rounds logged"));
    }
    let mut rows = Vec::new();
    for log in logs {
        let k = log.traffic.len();
        let up_total: usize = log.traffic.iter().map(|t| t.upload_params).sum();
        for t in &log.traffic {
            let ok = match log.method {
                m if m.broadcasts_all() => !log.skipped.is_empty() || t.download_params == up_total,
                m if m.averages() => t.download_params == t.upload_params,
                _ => t.download_params == 0 && t.upload_params == 0,
            };
            if !ok || (log.method.broadcasts_all() && log.skipped.is_empty() && t.download_params != k * t.upload_params) {
                return Err(Error::protocol(format!(
                    "round {}: client {} traffic {}/{} breaks the {} identity",
                    log.round, t.client, t.upload_params, t.download_params, log.method
                )));
            }
            rows.push(CommRow {
                method: log.method.name().to_string(),
                round: log.round,
                client: t.client,
                upload_params: t.upload_params,
                upload_bytes: t.upload_bytes,
                download_params: t.download_params,
                download_bytes: t.download_bytes,
            });
        }
    }
    Ok(CommSummary {
        total_upload_params: rows.iter().map(|r| r.upload_params).sum(),
        total_download_params: rows.iter().map(|r| r.download_params).sum(),
        total_upload_bytes: rows.iter().map(|r| r.upload_bytes).sum(),
        total_download_bytes: rows.iter().map(|r| r.download_bytes).sum(),
        rows,
    })
}

/// SplitMix64 finalizer over a combined key.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
