//! Oracle suite behind `fedecider verify`.
//!
//! Each check returns one [`OracleRecord`] per case plus a summary record.
//! Any `fail` status makes the command exit non-zero.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::backbone::{
    grad_trainables, init_backbone, mean_loss, AdapterSet, BackboneConfig, BackboneParams,
    Composition, ItemRange, LayerId, Sample,
};
use crate::client::Mode;
use crate::error::{Error, Result};
use crate::experiment::{prepare, run_prepared, ExperimentConfig};
use crate::lowrank::{compose, frob_inner, frob_norm, normalize_direction, AdapterPair, Matrix};
use crate::oracle::{
    combine_point, descent_sign_check, finite_diff_alpha_grad, first_order_residual,
    point_inner, relative_error, shared_direction_residual, span_coordinates, BackboneObjective,
    CaseStatus, OracleRecord, QuadraticSurrogate, DEFAULT_FD_STEP, DEFAULT_TAYLOR_SCALES,
};

fn status(ok: bool) -> CaseStatus {
    if ok {
        CaseStatus::Pass
    } else {
        CaseStatus::Fail
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn random_pair(rng: &mut ChaCha8Rng, layer: LayerId, r: usize, d: usize) -> AdapterPair {
    AdapterPair {
        layer_id: layer,
        a_mat: random_matrix(rng, r, d),
        b_mat: random_matrix(rng, d, r),
    }
}

fn cosine(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(frob_inner(a, b)? / (frob_norm(a) * frob_norm(b)))
}

/// Unit product norm and unchanged direction for random pairs; zero pairs rejected.
pub fn normalization_suite(seed: u64, cases: usize) -> Result<Vec<OracleRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_norm, mut worst_cos) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let d = [8, 16, 32][rng.random_range(0..3)];
        let r = [1, 4, 8][rng.random_range(0..3)];
        let p = random_pair(&mut rng, LayerId(0), r, d);
        let c = normalize_direction(&p, 0, 0)?;
        worst_norm = worst_norm.max((frob_norm(&c.composition()) - 1.0).abs());
        worst_cos = worst_cos.max((cosine(&c.composition(), &compose(&p)?)? - 1.0).abs());
    }
    let zero = normalize_direction(&AdapterPair::zeros(LayerId(0), 4, 16, 16), 0, 0);
    let zero_rejected = matches!(zero, Err(Error::ZeroUpdate { .. }));
    Ok(vec![OracleRecord {
        case: "normalization".into(),
        params: json!({ "cases": cases, "seed": seed }),
        measured: json!({ "max_norm_error": worst_norm, "max_cosine_error": worst_cos, "zero_rejected": zero_rejected }),
        status: status(worst_norm < 1e-6 && worst_cos < 1e-9 && zero_rejected),
    }])
}

/// A small frozen backbone and a batch from its vocabulary.
pub fn toy_backbone(seed: u64, embed_dim: usize, batch: usize) -> Result<(BackboneParams, Vec<Sample>)> {
    let mut params = init_backbone(
        BackboneConfig {
            vocab_size: 41,
            embed_dim,
            max_seq_len: 6,
            num_blocks: 1,
        },
        seed,
    )?;
    params.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let items = ItemRange { start: 1, len: 40 };
    let samples = (0..batch)
        .map(|_| {
            let len = rng.random_range(1..=6);
            Sample {
                context: (0..len).map(|_| rng.random_range(1..41)).collect(),
                target: rng.random_range(1..41),
                candidates: items,
            }
        })
        .collect();
    Ok((params, samples))
}

/// Analytic `∂F/∂α_j` against central differences on the backbone NLL.
pub fn alpha_gradient_suite(seed: u64, configs: usize) -> Result<Vec<OracleRecord>> {
    let (d, r, k) = (16, 4, 3);
    let mut out = Vec::new();
    for case in 0..configs {
        let case_seed = seed.wrapping_add(case as u64);
        let (params, batch) = toy_backbone(case_seed, d, 6)?;
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let mut received: BTreeMap<LayerId, Vec<AdapterPair>> = BTreeMap::new();
        for l in params.layer_ids() {
            for j in 0..k {
                let p = random_pair(&mut rng, l, r, d);
                let c = normalize_direction(&p, j, 0)?;
                received.entry(l).or_default().push(c.to_pair().scaled(0.5));
            }
        }
        let own_pairs: Vec<AdapterPair> = received.values().map(|v| v[0].clone()).collect();
        let own = AdapterSet::from_pairs(&params, own_pairs)?;
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..2.0)).collect();
        let comp = Composition::Weighted {
            received: &received,
            alpha: &alpha,
            self_index: 0,
        };
        let analytic = grad_trainables(&params, &own, &comp, &batch, 0)?.alpha;
        let loss = |a: &[f64]| {
            let c = Composition::Weighted {
                received: &received,
                alpha: a,
                self_index: 0,
            };
            mean_loss(&params, &c.deltas(&own)?, &batch)
        };
        let mut worst = 0.0f64;
        for (j, &g) in analytic.iter().enumerate() {
            let fd = finite_diff_alpha_grad(loss, &alpha, j, DEFAULT_FD_STEP)?;
            worst = worst.max(relative_error(g, fd, 1e-6));
        }
        out.push(OracleRecord {
            case: "alpha_gradient".into(),
            params: json!({ "seed": case_seed, "d": d, "r": r, "k": k }),
            measured: json!({ "max_relative_error": worst }),
            status: status(worst < 1e-4),
        });
    }
    Ok(out)
}

/// One α step on random quadratic surrogates moves against the alignment sign.
pub fn sign_suite(seed: u64, cases: usize) -> Result<Vec<OracleRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in 0..cases {
        let (d, k) = (6, 3);
        let q = QuadraticSurrogate {
            optimum: vec![random_matrix(&mut rng, d, d)],
        };
        let base = vec![Matrix::zeros((d, d))];
        let dirs: Vec<Vec<Matrix>> = (0..k)
            .map(|_| {
                let m = random_matrix(&mut rng, d, d);
                let n = frob_norm(&m);
                vec![m / n]
            })
            .collect();
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let j = rng.random_range(0..k);
        let check = descent_sign_check(&q, &base, &dirs, &alpha, 0.1, j)?;
        out.push(OracleRecord {
            case: "descent_sign".into(),
            params: json!({ "case": case, "j": j }),
            measured: serde_json::to_value(&check)?,
            status: check.status,
        });
    }
    Ok(out)
}

/// Generate-then-recover span coefficients, plus the shared-direction gap.
pub fn span_suite(seed: u64, cases: usize) -> Result<Vec<OracleRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in 0..cases {
        let dirs: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 8, 8)).collect();
        let coef: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut target = Matrix::zeros((8, 8));
        for (d, &c) in dirs.iter().zip(&coef) {
            target.scaled_add(c, d);
        }
        let fit = span_coordinates(&dirs, &target)?;
        let err = fit
            .coefficients
            .iter()
            .zip(&coef)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.push(OracleRecord {
            case: "span_recovery".into(),
            params: json!({ "case": case }),
            measured: json!({ "coefficient_error": err, "residual": fit.residual }),
            status: status(err < 1e-8 && fit.residual < 1e-10),
        });
    }
    let mut d1 = Matrix::zeros((2, 2));
    d1[[0, 0]] = 1.0;
    let mut d2 = Matrix::zeros((2, 2));
    d2[[1, 1]] = 1.0;
    let dirs = [d1.clone(), d2.clone()];
    let shared = shared_direction_residual(&dirs, &[d1.clone(), d2.clone()])?;
    let per = [span_coordinates(&dirs, &d1)?.residual, span_coordinates(&dirs, &d2)?.residual];
    let ok = (shared.residual_sq - 1.0).abs() < 1e-3 && per.iter().all(|&r| r < 1e-8);
    out.push(OracleRecord {
        case: "shared_capacity".into(),
        params: json!({ "targets": "two orthonormal" }),
        measured: json!({ "shared_residual_sq": shared.residual_sq, "per_target_residuals": per, "converged": shared.converged }),
        status: status(ok),
    });
    Ok(out)
}

/// Log-log slope of the first-order remainder.
pub fn taylor_suite(seed: u64, points: usize) -> Result<Vec<OracleRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let q = QuadraticSurrogate {
        optimum: vec![random_matrix(&mut rng, 4, 4)],
    };
    let base = vec![random_matrix(&mut rng, 4, 4)];
    let delta = vec![random_matrix(&mut rng, 4, 4)];
    let t = first_order_residual(&q, &base, &delta, &DEFAULT_TAYLOR_SCALES)?;
    let slope = t.slope.unwrap_or(f64::NAN);
    out.push(OracleRecord {
        case: "taylor_quadratic".into(),
        params: json!({ "scales": DEFAULT_TAYLOR_SCALES }),
        measured: json!({ "slope": slope, "rows": t.rows }),
        status: status((slope - 2.0).abs() < 1e-6),
    });
    for point in 0..points {
        let (params, batch) = toy_backbone(seed.wrapping_add(100 + point as u64), 16, 8)?;
        let layers = params.layer_ids();
        let obj = BackboneObjective {
            params: &params,
            layers: layers.clone(),
            batch: &batch,
        };
        let base: Vec<Matrix> = layers.iter().map(|_| random_matrix(&mut rng, 16, 16) * 0.05).collect();
        let raw: Vec<Matrix> = layers.iter().map(|_| random_matrix(&mut rng, 16, 16)).collect();
        let norm = raw.iter().map(|m| frob_norm(m).powi(2)).sum::<f64>().sqrt();
        let delta: Vec<Matrix> = raw.into_iter().map(|m| m / norm).collect();
        let t = first_order_residual(&obj, &base, &delta, &DEFAULT_TAYLOR_SCALES)?;
        let slope = t.slope.unwrap_or(f64::NAN);
        out.push(OracleRecord {
            case: "taylor_backbone".into(),
            params: json!({ "point": point }),
            measured: json!({ "slope": slope, "rows": t.rows, "excluded": t.excluded }),
            status: status((1.8..=2.2).contains(&slope)),
        });
    }
    // The chain-rule identity at an arbitrary iterate, on the quadratic.
    let dirs = vec![delta.clone()];
    let alpha = [0.7];
    let fd = finite_diff_alpha_grad(
        |a| crate::oracle::MatrixObjective::value(&q, &combine_point(&base, &dirs, a)?),
        &alpha,
        0,
        DEFAULT_FD_STEP,
    )?;
    let moved = combine_point(&base, &dirs, &alpha)?;
    let inner = point_inner(&crate::oracle::MatrixObjective::gradient(&q, &moved)?, &delta)?;
    out.push(OracleRecord {
        case: "chain_rule_quadratic".into(),
        params: json!({ "alpha": alpha }),
        measured: json!({ "finite_difference": fd, "inner_product": inner }),
        status: status((fd - inner).abs() < 1e-8),
    });
    Ok(out)
}

/// Measured traffic on tiny one-round runs.
pub fn accounting_suite(seed: u64) -> Result<Vec<OracleRecord>> {
    let tiny = |k: usize, rank: usize, method: Mode| -> Result<(usize, usize)> {
        let mut sim = vec![vec![0.1; k]; k];
        for (i, row) in sim.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let cfg = ExperimentConfig {
            seed,
            method,
            num_domains: k,
            users_per_domain: 10,
            vocab_per_domain: 16,
            num_clusters: 4,
            max_seq_len: 6,
            similarity: sim,
            pooled_sequences: 10,
            pretrain_epochs: 1,
            rank,
            rounds: 1,
            local_epochs: 1,
            ..ExperimentConfig::default()
        };
        let run = run_prepared(&cfg, &prepare(&cfg)?)?;
        let row = &run.comm.rows[0];
        Ok((row.upload_params, row.download_params))
    };
    let (u3, d3) = tiny(3, 8, Mode::Fedecider)?;
    let (u6, d6) = tiny(6, 8, Mode::Fedecider)?;
    let (u3r, d3r) = tiny(3, 16, Mode::Fedecider)?;
    let (ua, da) = tiny(3, 8, Mode::Fedavg)?;
    let (ul, dl) = tiny(3, 8, Mode::LocalOnly)?;
    let ok = d3 == 3 * u3
        && d6 == 6 * u6
        && u6 == u3
        && d6 == 2 * d3
        && u3r == 2 * u3
        && d3r == 2 * d3
        && da == ua
        && ul == 0
        && dl == 0;
    Ok(vec![OracleRecord {
        case: "communication".into(),
        params: json!({ "embed_dim": 32, "blocks": 2 }),
        measured: json!({
            "fedecider_k3": [u3, d3], "fedecider_k6": [u6, d6], "fedecider_r16": [u3r, d3r],
            "fedavg": [ua, da], "local_only": [ul, dl]
        }),
        status: status(ok),
    }])
}

/// Every oracle check with the default case counts.
pub fn run_all(seed: u64) -> Result<Vec<OracleRecord>> {
    let mut out = normalization_suite(seed, 1000)?;
    out.extend(alpha_gradient_suite(seed, 20)?);
    out.extend(sign_suite(seed, 50)?);
    out.extend(span_suite(seed, 20)?);
    out.extend(taylor_suite(seed, 10)?);
    out.extend(accounting_suite(seed)?);
    Ok(out)
}
