//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Failed criteria are reported, not fatal, so the remaining test targets
//! still run. Set `FEDECIDER_ACCEPTANCE_STRICT=1` to exit non-zero on any
//! failure.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedecider::backbone::{
    grad_trainables, init_backbone, mean_loss, AdapterSet, BackboneConfig, BackboneParams,
    Composition, ItemRange, LayerId, Sample,
};
use fedecider::client::Mode;
use fedecider::experiment::{emit_results, prepare, run_prepared, ExperimentConfig, RunArchive, ALPHA_FILE, METRICS_FILE};
use fedecider::lowrank::{compose, frob_inner, frob_norm, normalize_direction, AdapterPair, Matrix};
use fedecider::oracle::{
    descent_sign_check, finite_diff_alpha_grad, first_order_residual, shared_direction_residual,
    span_coordinates, BackboneObjective, CaseStatus, QuadraticSurrogate, DEFAULT_FD_STEP,
    DEFAULT_TAYLOR_SCALES,
};
use fedecider::Error;

const SEEDS: [u64; 3] = [7, 8, 9];

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn rmat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut norm_err, mut cos_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = [8, 16, 32][rng.random_range(0..3)];
        let r = [1, 4, 8][rng.random_range(0..3)];
        let p = AdapterPair {
            layer_id: LayerId(0),
            a_mat: rmat(&mut rng, r, d),
            b_mat: rmat(&mut rng, d, r),
        };
        let c = normalize_direction(&p, 0, 0).expect("random pair is nonzero");
        let unit = c.composition();
        // Product of the rescaled factors, recomputed here from scratch.
        let manual = c.b_tilde().dot(c.a_tilde());
        let raw = p.b_mat.dot(&p.a_mat);
        norm_err = norm_err.max((frob_norm(&manual) - 1.0).abs()).max((frob_norm(&unit) - 1.0).abs());
        let cos = frob_inner(&manual, &raw).unwrap() / (frob_norm(&manual) * frob_norm(&raw));
        cos_err = cos_err.max((cos - 1.0).abs());
    }
    let zero = normalize_direction(&AdapterPair::zeros(LayerId(0), 4, 16, 16), 0, 0);
    let zero_ok = matches!(zero, Err(Error::ZeroUpdate { .. }));
    let elapsed = start.elapsed();
    Outcome {
        id: 1,
        title: "normalization suite",
        pass: norm_err < 1e-6 && cos_err < 1e-9 && zero_ok && elapsed < Duration::from_secs(5),
        detail: format!(
            "max |norm-1| {norm_err:.2e}, max |cos-1| {cos_err:.2e}, zero rejected {zero_ok}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn toy(seed: u64, d: usize, batch: usize) -> (BackboneParams, Vec<Sample>) {
    let mut params = init_backbone(
        BackboneConfig {
            vocab_size: 41,
            embed_dim: d,
            max_seq_len: 6,
            num_blocks: 1,
        },
        seed,
    )
    .unwrap();
    params.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(1));
    let items = ItemRange { start: 1, len: 40 };
    let batch = (0..batch)
        .map(|_| {
            let n = rng.random_range(1..=6);
            Sample {
                context: (0..n).map(|_| rng.random_range(1..41)).collect(),
                target: rng.random_range(1..41),
                candidates: items,
            }
        })
        .collect();
    (params, batch)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (d, r, k) = (16, 4, 3);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let (params, batch) = toy(1000 + case, d, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let mut received: BTreeMap<LayerId, Vec<AdapterPair>> = BTreeMap::new();
        for l in params.layer_ids() {
            for j in 0..k {
                let p = AdapterPair {
                    layer_id: l,
                    a_mat: rmat(&mut rng, r, d),
                    b_mat: rmat(&mut rng, d, r),
                };
                received.entry(l).or_default().push(normalize_direction(&p, j, 0).unwrap().to_pair());
            }
        }
        let own = AdapterSet::from_pairs(&params, received.values().map(|v| v[0].clone())).unwrap();
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let comp = Composition::Weighted {
            received: &received,
            alpha: &alpha,
            self_index: 0,
        };
        let analytic = grad_trainables(&params, &own, &comp, &batch, 0).unwrap().alpha;
        // Independent forward: build W₀ + Σ α_j B̃_jÃ_j by hand for each probe.
        let loss = |a: &[f64]| {
            let deltas = received
                .iter()
                .map(|(l, list)| {
                    let mut m = Matrix::zeros((d, d));
                    for (p, &w) in list.iter().zip(a) {
                        m.scaled_add(w, &compose(p).unwrap());
                    }
                    (*l, m)
                })
                .collect();
            mean_loss(&params, &deltas, &batch)
        };
        for (j, &g) in analytic.iter().enumerate() {
            let fd = finite_diff_alpha_grad(loss, &alpha, j, DEFAULT_FD_STEP).unwrap();
            worst = worst.max((g - fd).abs() / fd.abs().max(g.abs()).max(1e-6));
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 2,
        title: "alpha-gradient identity",
        pass: worst < 1e-4 && elapsed < Duration::from_secs(120),
        detail: format!("20 configs, max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut pass, mut skip, mut fail) = (0, 0, 0);
    for _ in 0..50 {
        let d = 6;
        let q = QuadraticSurrogate {
            optimum: vec![rmat(&mut rng, d, d)],
        };
        let base = vec![Matrix::zeros((d, d))];
        let dirs: Vec<Vec<Matrix>> = (0..3)
            .map(|_| {
                let m = rmat(&mut rng, d, d);
                let n = frob_norm(&m);
                vec![m / n]
            })
            .collect();
        let alpha: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let j = rng.random_range(0..3);
        match descent_sign_check(&q, &base, &dirs, &alpha, 0.1, j).unwrap().status {
            CaseStatus::Pass => pass += 1,
            CaseStatus::Skip => skip += 1,
            CaseStatus::Fail => fail += 1,
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 3,
        title: "down-weighting sign agreement",
        pass: fail == 0 && pass > 0 && elapsed < Duration::from_secs(60),
        detail: format!(
            "{pass} agree, {fail} disagree, {skip} skipped (skip rate {:.0}%), {:.2}s",
            100.0 * skip as f64 / 50.0,
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut coef_err, mut resid) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let dirs: Vec<Matrix> = (0..3).map(|_| rmat(&mut rng, 8, 8)).collect();
        let coef: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut target = Matrix::zeros((8, 8));
        for (d, &c) in dirs.iter().zip(&coef) {
            target.scaled_add(c, d);
        }
        let fit = span_coordinates(&dirs, &target).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&coef) {
            coef_err = coef_err.max((a - b).abs());
        }
        resid = resid.max(fit.residual);
    }
    Outcome {
        id: 4,
        title: "representation recovery",
        pass: coef_err < 1e-8 && resid < 1e-10,
        detail: format!("20 cases, max coefficient error {coef_err:.2e}, max residual {resid:.2e}"),
    }
}

fn criterion_5() -> Outcome {
    let mut d1 = Matrix::zeros((3, 3));
    d1[[0, 1]] = 1.0;
    let mut d2 = Matrix::zeros((3, 3));
    d2[[2, 0]] = 1.0;
    let dirs = [d1.clone(), d2.clone()];
    let shared = shared_direction_residual(&dirs, &[d1.clone(), d2.clone()]).unwrap();
    let per = [
        span_coordinates(&dirs, &d1).unwrap().residual,
        span_coordinates(&dirs, &d2).unwrap().residual,
    ];
    Outcome {
        id: 5,
        title: "personalization capacity gap",
        pass: (shared.residual_sq - 1.0).abs() < 1e-3 && per.iter().all(|&r| r < 1e-8),
        detail: format!(
            "shared residual² {:.6}, per-target residuals {:.1e} / {:.1e}",
            shared.residual_sq, per[0], per[1]
        ),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = QuadraticSurrogate {
        optimum: vec![rmat(&mut rng, 5, 5)],
    };
    let qt = first_order_residual(&q, &[rmat(&mut rng, 5, 5)], &[rmat(&mut rng, 5, 5)], &DEFAULT_TAYLOR_SCALES).unwrap();
    let q_slope = qt.slope.unwrap_or(f64::NAN);
    let mut slopes = Vec::new();
    for point in 0..10u64 {
        let (params, batch) = toy(2000 + point, 16, 8);
        let layers = params.layer_ids();
        let obj = BackboneObjective {
            params: &params,
            layers: layers.clone(),
            batch: &batch,
        };
        let base: Vec<Matrix> = layers.iter().map(|_| rmat(&mut rng, 16, 16) * 0.05).collect();
        let raw: Vec<Matrix> = layers.iter().map(|_| rmat(&mut rng, 16, 16)).collect();
        let norm = raw.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let delta: Vec<Matrix> = raw.into_iter().map(|m| m / norm).collect();
        let t = first_order_residual(&obj, &base, &delta, &DEFAULT_TAYLOR_SCALES).unwrap();
        slopes.push(t.slope.unwrap_or(f64::NAN));
    }
    let lo = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Outcome {
        id: 6,
        title: "first-order expansion slope",
        pass: (q_slope - 2.0).abs() < 1e-6 && slopes.iter().all(|s| (1.8..=2.2).contains(s)),
        detail: format!("quadratic {q_slope:.8}, backbone slopes in [{lo:.3}, {hi:.3}] over 10 points"),
    }
}

/// Finalized mean test Hit@5 per (method, seed), plus each run's settled α.
/// A run that aborts on a numeric error is recorded as `Err` with its message.
struct Grid {
    hit5: BTreeMap<(Mode, u64), std::result::Result<f64, String>>,
    alpha: BTreeMap<u64, (Option<usize>, Vec<Vec<f64>>)>,
    max_seconds: BTreeMap<Mode, f64>,
}

fn run_grid(methods: &[Mode]) -> Grid {
    let mut grid = Grid {
        hit5: BTreeMap::new(),
        alpha: BTreeMap::new(),
        max_seconds: BTreeMap::new(),
    };
    for &seed in &SEEDS {
        let base = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let prep_start = Instant::now();
        let prepared = prepare(&base).unwrap();
        let prep_secs = prep_start.elapsed().as_secs_f64();
        for &m in methods {
            let start = Instant::now();
            let cfg = ExperimentConfig {
                method: m,
                run_id: format!("{}-{seed}", m.name()),
                ..base.clone()
            };
            let run = match run_prepared(&cfg, &prepared) {
                Ok(run) => run,
                Err(e @ Error::Numeric(_)) => {
                    grid.hit5.insert((m, seed), Err(e.to_string()));
                    continue;
                }
                Err(e) => panic!("{} seed {seed}: {e}", m.name()),
            };
            let secs = start.elapsed().as_secs_f64() + prep_secs;
            let e = grid.max_seconds.entry(m).or_insert(0.0);
            *e = e.max(secs);
            grid.hit5.insert((m, seed), Ok(run.summary.final_test["H@5"]));
            if m == Mode::Fedecider {
                grid.alpha.insert(
                    seed,
                    (run.summary.alpha_convergence_round, run.summary.settled_alpha.clone().unwrap()),
                );
            }
        }
    }
    grid
}

fn hit(grid: &Grid, m: Mode, seed: u64) -> f64 {
    grid.hit5[&(m, seed)].clone().unwrap_or(f64::NAN)
}

fn mean_hit(grid: &Grid, m: Mode) -> f64 {
    SEEDS.iter().map(|&s| hit(grid, m, s)).sum::<f64>() / SEEDS.len() as f64
}

fn criterion_7(grid: &Grid) -> Outcome {
    let (f, l, a) = (mean_hit(grid, Mode::Fedecider), mean_hit(grid, Mode::LocalOnly), mean_hit(grid, Mode::Fedavg));
    let s7 = |m| hit(grid, m, 7);
    let slowest = grid.max_seconds.values().cloned().fold(0.0, f64::max);
    Outcome {
        id: 7,
        title: "end-to-end ordering",
        pass: f >= l && l >= a && slowest < 600.0,
        detail: format!(
            "3-seed mean H@5 fedecider {f:.4} / local_only {l:.4} / fedavg {a:.4}; seed 7: {:.4} / {:.4} / {:.4}; slowest run {slowest:.0}s",
            s7(Mode::Fedecider),
            s7(Mode::LocalOnly),
            s7(Mode::Fedavg)
        ),
    }
}

fn criterion_8(grid: &Grid) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (round, a) = &grid.alpha[&seed];
        let good = a[0][1] > a[0][2] && a[1][0] > a[1][2];
        ok &= good;
        parts.push(format!(
            "seed {seed} (round {}): α12 {:.3} vs α13 {:.3}, α21 {:.3} vs α23 {:.3}",
            round.map_or("none, using last".to_string(), |r| r.to_string()),
            a[0][1],
            a[0][2],
            a[1][0],
            a[1][2]
        ));
    }
    Outcome {
        id: 8,
        title: "alpha-similarity alignment",
        pass: ok,
        detail: parts.join("; "),
    }
}

fn criterion_9(grid: &Grid) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in [Mode::WoDecomp, Mode::WoPer, Mode::WoSep] {
        // A diverged ablation yields no model, so it cannot outscore fedecider.
        let wins = SEEDS
            .iter()
            .filter(|&&s| match &grid.hit5[&(m, s)] {
                Ok(h) => hit(grid, Mode::Fedecider, s) >= *h,
                Err(_) => true,
            })
            .count();
        let diverged = SEEDS.iter().filter(|&&s| grid.hit5[&(m, s)].is_err()).count();
        ok &= wins * 2 > SEEDS.len();
        parts.push(format!(
            "vs {} {wins}/3 (mean {:.4}, diverged {diverged}/3)",
            m.name(),
            mean_hit(grid, m)
        ));
    }
    Outcome {
        id: 9,
        title: "ablation directionality",
        pass: ok,
        detail: format!("fedecider mean {:.4}; {}", mean_hit(grid, Mode::Fedecider), parts.join(", ")),
    }
}

fn traffic(k: usize, rank: usize, method: Mode) -> Vec<(usize, usize)> {
    let mut sim = vec![vec![0.1; k]; k];
    for (i, row) in sim.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let cfg = ExperimentConfig {
        method,
        num_domains: k,
        users_per_domain: 12,
        vocab_per_domain: 16,
        num_clusters: 4,
        max_seq_len: 6,
        similarity: sim,
        pooled_sequences: 10,
        pretrain_epochs: 1,
        rank,
        rounds: 2,
        local_epochs: 1,
        ..ExperimentConfig::default()
    };
    let run = run_prepared(&cfg, &prepare(&cfg).unwrap()).unwrap();
    run.comm.rows.iter().map(|r| (r.upload_params, r.download_params)).collect()
}

fn criterion_10() -> Outcome {
    let k3 = traffic(3, 8, Mode::Fedecider);
    let k6 = traffic(6, 8, Mode::Fedecider);
    let r16 = traffic(3, 16, Mode::Fedecider);
    let avg = traffic(3, 8, Mode::Fedavg);
    // 2 blocks × 4 projections × 2·r·d parameters.
    let expected_upload = 8 * 2 * 8 * 32;
    let identity = k3.iter().all(|&(u, d)| u == expected_upload && d == 3 * u)
        && k6.iter().all(|&(u, d)| d == 6 * u);
    let double_k = k6[0].0 == k3[0].0 && k6[0].1 == 2 * k3[0].1;
    let double_r = r16[0].0 == 2 * k3[0].0 && r16[0].1 == 2 * k3[0].1;
    let fedavg = avg.iter().all(|&(u, d)| u == d && u > 0);
    Outcome {
        id: 10,
        title: "communication accounting",
        pass: identity && double_k && double_r && fedavg,
        detail: format!(
            "K=3 r=8 up/down {:?}; K=6 {:?}; r=16 {:?}; fedavg {:?}",
            k3[0], k6[0], r16[0], avg[0]
        ),
    }
}

fn emit_to_bytes(run: &RunArchive) -> (Vec<u8>, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    emit_results(run, dir.path()).unwrap();
    (
        std::fs::read(dir.path().join(METRICS_FILE)).unwrap(),
        std::fs::read(dir.path().join(ALPHA_FILE)).unwrap(),
    )
}

fn criterion_11() -> Outcome {
    let cfg = ExperimentConfig {
        rounds: 3,
        ..ExperimentConfig::default()
    };
    let first = run_prepared(&cfg, &prepare(&cfg).unwrap()).unwrap();
    let second = run_prepared(&cfg, &prepare(&cfg).unwrap()).unwrap();
    let (m1, a1) = emit_to_bytes(&first);
    let (m2, a2) = emit_to_bytes(&second);
    let alpha_rows = a1.iter().filter(|&&b| b == b'\n').count() - 1;
    Outcome {
        id: 11,
        title: "determinism",
        pass: m1 == m2 && a1 == a2 && !m1.is_empty() && alpha_rows == 3 * 3 * 3,
        detail: format!(
            "metric CSV {} bytes identical {}, α CSV {alpha_rows} rows identical {}",
            m1.len(),
            m1 == m2,
            a1 == a2
        ),
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this target.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!(
            "{} [{}] {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.detail
        );
        outcomes.push(o.pass);
    };
    report(criterion_1());
    report(criterion_2());
    report(criterion_3());
    report(criterion_4());
    report(criterion_5());
    report(criterion_6());
    let grid = run_grid(&[
        Mode::Fedecider,
        Mode::LocalOnly,
        Mode::Fedavg,
        Mode::WoDecomp,
        Mode::WoPer,
        Mode::WoSep,
    ]);
    report(criterion_7(&grid));
    report(criterion_8(&grid));
    report(criterion_9(&grid));
    report(criterion_10());
    report(criterion_11());
    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    let strict = std::env::var("FEDECIDER_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
