//! Numerical oracles for the directional decomposition.
//!
//! Everything here is deliberately independent of the backbone's reverse
//! pass: finite differences only evaluate losses, and the linear-algebra
//! checks go through `nalgebra` rather than the crate's own matrix code.
//! A "point" is a list of matrices, one per adapted layer, and directions
//! are lists of the same shapes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::{grad_effective, mean_loss, BackboneParams, DeltaMap, LayerId, Sample};
use crate::error::{Error, Result};
use crate::lowrank::{frob_inner, Matrix};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const NOISE_FLOOR: f64 = 1e-14;
pub const DEFAULT_TAYLOR_SCALES: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// A scalar function of a list of matrices with a known gradient.
pub trait MatrixObjective {
    fn value(&self, point: &[Matrix]) -> Result<f64>;
    fn gradient(&self, point: &[Matrix]) -> Result<Vec<Matrix>>;
}

/// `F(W) = ½ Σ_l ‖W_l − W*_l‖²_F`
#[derive(Clone, Debug)]
pub struct QuadraticSurrogate {
    pub optimum: Vec<Matrix>,
}

impl MatrixObjective for QuadraticSurrogate {
    fn value(&self, point: &[Matrix]) -> Result<f64> {
        check_shapes(point, &self.optimum)?;
        Ok(point
            .iter()
            .zip(&self.optimum)
            .map(|(w, o)| 0.5 * (w - o).iter().map(|v| v * v).sum::<f64>())
            .sum())
    }

    fn gradient(&self, point: &[Matrix]) -> Result<Vec<Matrix>> {
        check_shapes(point, &self.optimum)?;
        Ok(point.iter().zip(&self.optimum).map(|(w, o)| w - o).collect())
    }
}

/// Mean backbone NLL over a fixed batch as a function of per-layer deltas.
pub struct BackboneObjective<'a> {
    pub params: &'a BackboneParams,
    pub layers: Vec<LayerId>,
    pub batch: &'a [Sample],
}

impl BackboneObjective<'_> {
    fn deltas(&self, point: &[Matrix]) -> Result<DeltaMap> {
        if point.len() != self.layers.len() {
            return Err(Error::dim(format!(
                "{} matrices for {} layers",
                point.len(),
                self.layers.len()
            )));
        }
        Ok(self.layers.iter().copied().zip(point.iter().cloned()).collect())
    }
}

impl MatrixObjective for BackboneObjective<'_> {
    fn value(&self, point: &[Matrix]) -> Result<f64> {
        mean_loss(self.params, &self.deltas(point)?, self.batch)
    }

    fn gradient(&self, point: &[Matrix]) -> Result<Vec<Matrix>> {
        let (_, g) = grad_effective(self.params, &self.deltas(point)?, self.batch)?;
        Ok(self.layers.iter().map(|l| g[l].clone()).collect())
    }
}

fn check_shapes(a: &[Matrix], b: &[Matrix]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.dim() != y.dim()) {
        return Err(Error::dim("point shapes differ from objective"));
    }
    Ok(())
}

/// Frobenius inner product summed over layers.
pub fn point_inner(a: &[Matrix], b: &[Matrix]) -> Result<f64> {
    check_shapes(a, b)?;
    a.iter().zip(b).map(|(x, y)| frob_inner(x, y)).sum()
}

pub fn point_norm(a: &[Matrix]) -> f64 {
    a.iter()
        .flat_map(|m| m.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// `base + Σ_j α_j D_j`
pub fn combine_point(base: &[Matrix], directions: &[Vec<Matrix>], alpha: &[f64]) -> Result<Vec<Matrix>> {
    if directions.len() != alpha.len() {
        return Err(Error::contract(format!(
            "{} directions for {} weights",
            directions.len(),
            alpha.len()
        )));
    }
    let mut out: Vec<Matrix> = base.to_vec();
    for (d, &a) in directions.iter().zip(alpha) {
        check_shapes(&out, d)?;
        for (o, m) in out.iter_mut().zip(d) {
            o.scaled_add(a, m);
        }
    }
    Ok(out)
}

/// Central difference `(F(α + h e_j) − F(α − h e_j)) / 2h`.
pub fn finite_diff_alpha_grad<F>(loss: F, alpha: &[f64], j: usize, h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step {h} must be positive")));
    }
    if j >= alpha.len() {
        return Err(Error::contract(format!("index {j} outside {} weights", alpha.len())));
    }
    let mut plus = alpha.to_vec();
    plus[j] += h;
    let mut minus = alpha.to_vec();
    minus[j] -= h;
    let (fp, fm) = (loss(&plus)?, loss(&minus)?);
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss while differencing weight {j}"
        )));
    }
    Ok((fp - fm) / (2.0 * h))
}

/// `|a − b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Least-squares coordinates of a target in the span of some directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanFit {
    pub coefficients: Vec<f64>,
    pub residual: f64,
    /// The Gram matrix was rank deficient; `coefficients` is the minimum-norm solution.
    pub degenerate: bool,
}

fn flatten(m: &Matrix) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.iter().copied())
}

/// Solves `min_α ‖Σ α_j D_j − target‖_F` through the normal equations.
pub fn span_coordinates(directions: &[Matrix], target: &Matrix) -> Result<SpanFit> {
    if directions.is_empty() {
        return Err(Error::contract("span_coordinates needs at least one direction"));
    }
    if directions.iter().any(|d| d.dim() != target.dim()) {
        return Err(Error::dim("directions and target differ in shape"));
    }
    let n = directions.len();
    let cols: Vec<DVector<f64>> = directions.iter().map(flatten).collect();
    let t = flatten(target);
    let gram = DMatrix::from_fn(n, n, |i, j| cols[i].dot(&cols[j]));
    let rhs = DVector::from_fn(n, |i, _| cols[i].dot(&t));
    let svd = gram.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let cutoff = s_max * 1e-12 * n as f64;
    let degenerate = s_max == 0.0 || svd.singular_values.iter().any(|&s| s <= cutoff);
    let coeffs = if s_max == 0.0 {
        DVector::zeros(n)
    } else {
        svd.solve(&rhs, cutoff)
            .map_err(|e| Error::Numeric(format!("normal equations: {e}")))?
    };
    let mut fit = -t;
    for (c, col) in coeffs.iter().zip(&cols) {
        fit += col * *c;
    }
    Ok(SpanFit {
        coefficients: coeffs.iter().copied().collect(),
        residual: fit.norm(),
        degenerate,
    })
}

/// Best fit of every target by a scaled copy of one shared combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedFit {
    pub beta: Vec<f64>,
    pub scales: Vec<f64>,
    pub residual_sq: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SharedFit {
    pub fn residual(&self) -> f64 {
        self.residual_sq.sqrt()
    }
}

pub const ALS_TOLERANCE: f64 = 1e-10;
pub const ALS_MAX_ITERATIONS: usize = 500;

/// Fits `ΔW_i ≈ c_i · Σ_j β_j D_j` by alternating least squares over
/// `β` and the per-target scales `c_i`.
pub fn shared_direction_residual(directions: &[Matrix], targets: &[Matrix]) -> Result<SharedFit> {
    if targets.is_empty() {
        return Err(Error::contract("shared fit needs at least one target"));
    }
    if directions.is_empty() {
        return Err(Error::contract("shared fit needs at least one direction"));
    }
    let shape = directions[0].dim();
    if directions.iter().chain(targets).any(|m| m.dim() != shape) {
        return Err(Error::dim("directions and targets differ in shape"));
    }
    let n = directions.len();
    let cols: Vec<DVector<f64>> = directions.iter().map(flatten).collect();
    let tvecs: Vec<DVector<f64>> = targets.iter().map(flatten).collect();
    let basis = DMatrix::from_columns(&cols);
    let gram = basis.transpose() * &basis;
    let gram_pinv = gram
        .clone()
        .pseudo_inverse(1e-12 * gram.norm().max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numeric(e.to_string()))?;
    // ⟨D_j, T_i⟩ for every target, as columns.
    let proj: Vec<DVector<f64>> = tvecs.iter().map(|t| basis.transpose() * t).collect();

    let total_sq: f64 = tvecs.iter().map(|t| t.norm_squared()).sum();
    let start = tvecs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_squared().total_cmp(&b.1.norm_squared()))
        .map(|(i, _)| i)
        .expect("non-empty");
    let mut beta = &gram_pinv * &proj[start];
    let objective = |beta: &DVector<f64>| -> (f64, Vec<f64>) {
        let m = &basis * beta;
        let mm = m.norm_squared();
        if mm == 0.0 {
            return (total_sq, vec![0.0; tvecs.len()]);
        }
        let scales: Vec<f64> = tvecs.iter().map(|t| t.dot(&m) / mm).collect();
        let res: f64 = tvecs
            .iter()
            .zip(&scales)
            .map(|(t, c)| (t - &m * *c).norm_squared())
            .sum();
        (res, scales)
    };
    let (mut best, mut scales) = objective(&beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < ALS_MAX_ITERATIONS {
        iterations += 1;
        let cc: f64 = scales.iter().map(|c| c * c).sum();
        if cc == 0.0 {
            converged = true;
            break;
        }
        let mut rhs = DVector::zeros(n);
        for (p, c) in proj.iter().zip(&scales) {
            rhs += p * *c;
        }
        let mut next = &gram_pinv * rhs / cc;
        let m_norm = (&basis * &next).norm();
        if m_norm > 0.0 {
            next /= m_norm;
        }
        let (res, next_scales) = objective(&next);
        let improvement = best - res;
        beta = next;
        scales = next_scales;
        best = res;
        if improvement.abs() <= ALS_TOLERANCE * best.max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(SharedFit {
        beta: beta.iter().copied().collect(),
        scales,
        residual_sq: best.max(0.0),
        iterations,
        converged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Pass,
    Skip,
    Fail,
}

/// Outcome of one gradient step on a single personalized weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignCheck {
    pub index: usize,
    /// `⟨∇F(W₀), D_j⟩`
    pub alignment_at_base: f64,
    /// `⟨∇F(W₀ + ΔW(α)), D_j⟩`
    pub alignment_at_iterate: f64,
    /// Central-difference `∂F/∂α_j` actually used for the step.
    pub step_gradient: f64,
    pub alpha_before: f64,
    pub alpha_after: f64,
    pub status: CaseStatus,
}

/// Takes one descent step on `α_j` and checks it moves against the sign of
/// the alignment coefficient. Cases where the sign at the iterate differs
/// from the sign at the base point are skipped.
pub fn descent_sign_check(
    objective: &dyn MatrixObjective,
    base: &[Matrix],
    directions: &[Vec<Matrix>],
    alpha: &[f64],
    eta: f64,
    j: usize,
) -> Result<SignCheck> {
    if !(eta > 0.0) {
        return Err(Error::config(format!("step size {eta} must be positive")));
    }
    if j >= directions.len() {
        return Err(Error::contract(format!("index {j} outside {} directions", directions.len())));
    }
    let g0 = point_inner(&objective.gradient(base)?, &directions[j])?;
    let iterate = combine_point(base, directions, alpha)?;
    let gt = point_inner(&objective.gradient(&iterate)?, &directions[j])?;
    let step_gradient = finite_diff_alpha_grad(
        |a| objective.value(&combine_point(base, directions, a)?),
        alpha,
        j,
        DEFAULT_FD_STEP,
    )?;
    let before = alpha[j];
    let after = before - eta * step_gradient;
    let status = if g0 == 0.0 || gt == 0.0 || g0.signum() != gt.signum() {
        CaseStatus::Skip
    } else if (g0 > 0.0 && after < before) || (g0 < 0.0 && after > before) {
        CaseStatus::Pass
    } else {
        CaseStatus::Fail
    };
    Ok(SignCheck {
        index: j,
        alignment_at_base: g0,
        alignment_at_iterate: gt,
        step_gradient,
        alpha_before: before,
        alpha_after: after,
        status,
    })
}

/// First-order Taylor remainders along one direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorTable {
    /// `(t, |F(W₀ + tΔ) − F(W₀) − t⟨∇F(W₀), Δ⟩|)`
    pub rows: Vec<(f64, f64)>,
    /// Scales dropped from the fit because the remainder hit the noise floor.
    pub excluded: Vec<f64>,
    /// Log-log slope of remainder against `t`; `None` with fewer than two usable points.
    pub slope: Option<f64>,
}

pub fn first_order_residual(
    objective: &dyn MatrixObjective,
    base: &[Matrix],
    delta: &[Matrix],
    scales: &[f64],
) -> Result<TaylorTable> {
    if scales.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::config("Taylor scales must be positive"));
    }
    if scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("Taylor scales must be strictly decreasing"));
    }
    let f0 = objective.value(base)?;
    let slope0 = point_inner(&objective.gradient(base)?, delta)?;
    let mut rows = Vec::with_capacity(scales.len());
    let mut excluded = Vec::new();
    let mut fit = Vec::new();
    for &t in scales {
        let moved = combine_point(base, &[delta.to_vec()], &[t])?;
        let r = (objective.value(&moved)? - f0 - t * slope0).abs();
        rows.push((t, r));
        if r < NOISE_FLOOR {
            excluded.push(t);
        } else {
            fit.push((t.ln(), r.ln()));
        }
    }
    let slope = (fit.len() >= 2).then(|| {
        let n = fit.len() as f64;
        let mx = fit.iter().map(|p| p.0).sum::<f64>() / n;
        let my = fit.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = fit.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = fit.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    });
    Ok(TaylorTable {
        rows,
        excluded,
        slope,
    })
}

/// One line of an oracle report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub case: String,
    pub params: serde_json::Value,
    pub measured: serde_json::Value,
    pub status: CaseStatus,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(i: usize, j: usize) -> Matrix {
        let mut m = Matrix::zeros((2, 2));
        m[[i, j]] = 1.0;
        m
    }

    #[test]
    fn quadratic_alpha_gradient_matches_closed_form() {
        let d = array![[0.6, 0.0], [0.0, 0.8]];
        let w_star = array![[1.0, 2.0], [-1.0, 0.5]];
        let q = QuadraticSurrogate {
            optimum: vec![w_star.clone()],
        };
        let base = vec![Matrix::zeros((2, 2))];
        for alpha in [-1.5, 0.0, 0.3, 2.0] {
            let fd = finite_diff_alpha_grad(
                |a| q.value(&combine_point(&base, &[vec![d.clone()]], a)?),
                &[alpha],
                0,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let analytic = frob_inner(&(&d * alpha - &w_star), &d).unwrap();
            assert!((fd - analytic).abs() < 1e-8, "{fd} vs {analytic}");
        }
        // Stationary point: α* = ⟨W*, D⟩ / ‖D‖².
        let stat = frob_inner(&w_star, &d).unwrap() / frob_inner(&d, &d).unwrap();
        let fd = finite_diff_alpha_grad(
            |a| q.value(&combine_point(&base, &[vec![d.clone()]], a)?),
            &[stat],
            0,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(fd.abs() < 1e-8);
    }

    #[test]
    fn finite_diff_rejects_bad_inputs() {
        let f = |_: &[f64]| Ok(1.0);
        assert!(finite_diff_alpha_grad(f, &[1.0], 0, 0.0).is_err());
        assert!(finite_diff_alpha_grad(f, &[1.0], 1, 1e-5).is_err());
        let nan = |_: &[f64]| Ok(f64::NAN);
        assert!(matches!(
            finite_diff_alpha_grad(nan, &[1.0], 0, 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn span_recovers_orthogonal_coordinates() {
        let d1 = unit(0, 0);
        let d2 = unit(1, 1);
        let target = &d1 * 3.0 - &d2 * 2.0;
        let fit = span_coordinates(&[d1, d2], &target).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-12);
        assert!((fit.coefficients[1] + 2.0).abs() < 1e-12);
        assert!(fit.residual < 1e-10);
        assert!(!fit.degenerate);
    }

    #[test]
    fn span_of_orthogonal_target_is_zero() {
        let target = unit(0, 1) * 2.5;
        let fit = span_coordinates(&[unit(0, 0), unit(1, 1)], &target).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-15));
        assert!((fit.residual - 2.5).abs() < 1e-12);
    }

    #[test]
    fn span_flags_rank_deficiency() {
        let d = unit(0, 0);
        let fit = span_coordinates(&[d.clone(), &d * 2.0], &(&d * 5.0)).unwrap();
        assert!(fit.degenerate);
        // Minimum-norm solution of a + 2b = 5 is (1, 2).
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-9);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-9);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn span_generate_then_recover() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let dirs: Vec<Matrix> = (0..3)
                .map(|_| Matrix::from_shape_simple_fn((8, 8), || rng.random_range(-1.0..1.0)))
                .collect();
            let coeffs: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut target = Matrix::zeros((8, 8));
            for (d, c) in dirs.iter().zip(&coeffs) {
                target.scaled_add(*c, d);
            }
            let fit = span_coordinates(&dirs, &target).unwrap();
            for (a, b) in fit.coefficients.iter().zip(&coeffs) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!(fit.residual < 1e-10);
        }
    }

    #[test]
    fn shared_fit_colinear_and_single_targets() {
        let d1 = array![[1.0, 0.5], [0.0, 0.0]];
        let d2 = array![[0.0, 0.0], [0.3, 1.0]];
        let t = &d1 * 0.4 + &d2 * 1.3;
        let fit = shared_direction_residual(&[d1.clone(), d2.clone()], &[t.clone(), &t * -2.0]).unwrap();
        assert!(fit.residual() < 1e-8);
        let single = shared_direction_residual(&[d1, d2], &[t]).unwrap();
        assert!(single.residual() < 1e-8);
    }

    #[test]
    fn shared_fit_orthonormal_pair_by_grid() {
        // Brute force over unit shared directions M(θ) = cosθ D₁ + sinθ D₂ with
        // optimal scales c_i = ⟨T_i, M⟩ gives residual² = 2 − (cos²θ + sin²θ) = 1.
        let d1 = unit(0, 0);
        let d2 = unit(1, 1);
        let mut grid_best = f64::INFINITY;
        for k in 0..=3600 {
            let th = k as f64 * std::f64::consts::PI / 3600.0;
            let m = &d1 * th.cos() + &d2 * th.sin();
            let mut r = 0.0;
            for t in [&d1, &d2] {
                let c = frob_inner(t, &m).unwrap();
                r += (t - &(&m * c)).iter().map(|v| v * v).sum::<f64>();
            }
            grid_best = grid_best.min(r);
        }
        assert!((grid_best - 1.0).abs() < 1e-9);
        let fit = shared_direction_residual(&[d1.clone(), d2.clone()], &[d1, d2]).unwrap();
        assert!(fit.converged);
        assert!((fit.residual_sq - grid_best).abs() < 1e-3);
    }

    #[test]
    fn sign_check_aligned_and_anti_aligned() {
        // ∇F(W₀) = W₀ − W* = −W*, so g = −⟨W*, D⟩.
        let d = unit(0, 0);
        let base = vec![Matrix::zeros((2, 2))];
        let harmful = QuadraticSurrogate {
            optimum: vec![unit(0, 0) * -1.0],
        };
        let c = descent_sign_check(&harmful, &base, &[vec![d.clone()]], &[0.1], 0.1, 0).unwrap();
        assert!(c.alignment_at_base > 0.0);
        assert_eq!(c.status, CaseStatus::Pass);
        assert!(c.alpha_after < c.alpha_before);

        let beneficial = QuadraticSurrogate {
            optimum: vec![unit(0, 0)],
        };
        let c = descent_sign_check(&beneficial, &base, &[vec![d.clone()]], &[0.1], 0.1, 0).unwrap();
        assert!(c.alignment_at_base < 0.0);
        assert_eq!(c.status, CaseStatus::Pass);
        assert!(c.alpha_after > c.alpha_before);

        // Past the optimum the sign flips and the case is skipped.
        let c = descent_sign_check(&beneficial, &base, &[vec![d]], &[3.0], 0.1, 0).unwrap();
        assert_eq!(c.status, CaseStatus::Skip);
    }

    #[test]
    fn taylor_remainder_of_quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = || Matrix::from_shape_simple_fn((3, 3), || rng.random_range(-1.0..1.0));
        let q = QuadraticSurrogate { optimum: vec![m()] };
        let base = vec![m()];
        let delta = vec![m()];
        let nsq = point_norm(&delta).powi(2);
        let table = first_order_residual(&q, &base, &delta, &DEFAULT_TAYLOR_SCALES).unwrap();
        for &(t, r) in &table.rows {
            assert!((r - 0.5 * t * t * nsq).abs() < 1e-12);
        }
        assert!((table.slope.unwrap() - 2.0).abs() < 1e-6);

        let zero = vec![Matrix::zeros((3, 3))];
        let table = first_order_residual(&q, &base, &zero, &DEFAULT_TAYLOR_SCALES).unwrap();
        assert!(table.rows.iter().all(|&(_, r)| r == 0.0));
        assert_eq!(table.excluded.len(), 3);
        assert_eq!(table.slope, None);
    }

    #[test]
    fn taylor_scales_validated() {
        let q = QuadraticSurrogate {
            optimum: vec![Matrix::zeros((1, 1))],
        };
        let p = vec![Matrix::zeros((1, 1))];
        assert!(first_order_residual(&q, &p, &p, &[1e-3, 1e-2]).is_err());
        assert!(first_order_residual(&q, &p, &p, &[-1.0]).is_err());
    }
}
