//! Low-rank adapter algebra.
//!
//! An adapter perturbs a frozen weight `W` (shape `d_out × d_in`) by the
//! product `B·A`, with `A: r × d_in` and `B: d_out × r`. The server turns raw
//! pairs into [`DirectionalComponent`]s by jointly rescaling both factors so
//! the composed product has unit Frobenius norm.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::LayerId;
use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Composed updates with a Frobenius norm at or below this are treated as zero.
pub const ZERO_UPDATE_THRESHOLD: f64 = 1e-12;

/// One layer's raw low-rank update factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub layer_id: LayerId,
    /// `r × d_in`
    pub a_mat: Matrix,
    /// `d_out × r`
    pub b_mat: Matrix,
}

impl AdapterPair {
    /// Builds a pair after checking shapes, rank bounds and finiteness.
    pub fn new(layer_id: LayerId, a_mat: Matrix, b_mat: Matrix) -> Result<Self> {
        let pair = Self {
            layer_id,
            a_mat,
            b_mat,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn zeros(layer_id: LayerId, rank: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            layer_id,
            a_mat: Matrix::zeros((rank, d_in)),
            b_mat: Matrix::zeros((d_out, rank)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a_mat.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a_mat.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b_mat.nrows()
    }

    /// Number of scalar parameters carried by the pair.
    pub fn param_count(&self) -> usize {
        self.a_mat.len() + self.b_mat.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.a_mat.nrows();
        if self.b_mat.ncols() != r {
            return Err(Error::dim(format!(
                "layer {}: A has {} rows but B has {} columns",
                self.layer_id,
                r,
                self.b_mat.ncols()
            )));
        }
        if r == 0 || r > self.d_in().min(self.d_out()) {
            return Err(Error::dim(format!(
                "layer {}: rank {} outside [1, min({}, {})]",
                self.layer_id,
                r,
                self.d_in(),
                self.d_out()
            )));
        }
        if !self.a_mat.iter().chain(self.b_mat.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "layer {}: non-finite adapter entry",
                self.layer_id
            )));
        }
        Ok(())
    }

    /// Multiplies both factors by `s`, scaling the composition by `s²`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            layer_id: self.layer_id,
            a_mat: &self.a_mat * s,
            b_mat: &self.b_mat * s,
        }
    }
}

/// `B·A` for one adapter pair.
pub fn compose(adapter: &AdapterPair) -> Result<Matrix> {
    if adapter.b_mat.ncols() != adapter.a_mat.nrows() {
        return Err(Error::dim(format!(
            "layer {}: cannot multiply B ({}×{}) by A ({}×{})",
            adapter.layer_id,
            adapter.b_mat.nrows(),
            adapter.b_mat.ncols(),
            adapter.a_mat.nrows(),
            adapter.a_mat.ncols()
        )));
    }
    Ok(adapter.b_mat.dot(&adapter.a_mat))
}

/// Frobenius inner product `trace(m1ᵀ m2)`.
pub fn frob_inner(m1: &Matrix, m2: &Matrix) -> Result<f64> {
    if m1.dim() != m2.dim() {
        return Err(Error::dim(format!(
            "Frobenius inner product of {:?} and {:?}",
            m1.dim(),
            m2.dim()
        )));
    }
    Ok(Zip::from(m1).and(m2).fold(0.0, |acc, x, y| acc + x * y))
}

pub fn frob_norm(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A normalized adapter pair whose composition has unit Frobenius norm.
///
/// Fields are read-only once built; the server publishes these values and
/// clients only ever copy them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalComponent {
    source_client: usize,
    round: usize,
    layer_id: LayerId,
    a_tilde: Matrix,
    b_tilde: Matrix,
    source_magnitude: f64,
}

impl DirectionalComponent {
    pub fn source_client(&self) -> usize {
        self.source_client
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn layer_id(&self) -> LayerId {
        self.layer_id
    }

    pub fn a_tilde(&self) -> &Matrix {
        &self.a_tilde
    }

    pub fn b_tilde(&self) -> &Matrix {
        &self.b_tilde
    }

    /// `‖BA‖_F` of the raw update; kept for diagnostics, never broadcast.
    pub fn source_magnitude(&self) -> f64 {
        self.source_magnitude
    }

    /// `B̃·Ã`
    pub fn composition(&self) -> Matrix {
        self.b_tilde.dot(&self.a_tilde)
    }

    /// The normalized factors as a plain adapter pair.
    pub fn to_pair(&self) -> AdapterPair {
        AdapterPair {
            layer_id: self.layer_id,
            a_mat: self.a_tilde.clone(),
            b_mat: self.b_tilde.clone(),
        }
    }
}

/// Jointly rescales `A` and `B` by `s = ‖BA‖_F^{-1/2}` so that `‖B̃Ã‖_F = 1`.
pub fn normalize_direction(
    adapter: &AdapterPair,
    source_client: usize,
    round: usize,
) -> Result<DirectionalComponent> {
    normalize_direction_with_threshold(adapter, source_client, round, ZERO_UPDATE_THRESHOLD)
}

pub fn normalize_direction_with_threshold(
    adapter: &AdapterPair,
    source_client: usize,
    round: usize,
    threshold: f64,
) -> Result<DirectionalComponent> {
    let magnitude = frob_norm(&compose(adapter)?);
    if !magnitude.is_finite() {
        return Err(Error::Numeric(format!(
            "layer {}: non-finite update norm",
            adapter.layer_id
        )));
    }
    if magnitude <= threshold {
        return Err(Error::ZeroUpdate {
            layer: adapter.layer_id,
            norm: magnitude,
            threshold,
        });
    }
    let s = (1.0 / magnitude).sqrt();
    Ok(DirectionalComponent {
        source_client,
        round,
        layer_id: adapter.layer_id,
        a_tilde: &adapter.a_mat * s,
        b_tilde: &adapter.b_mat * s,
        source_magnitude: magnitude,
    })
}

/// `Σ_j weights[j] · B̃_j Ã_j` over components of a single layer.
pub fn weighted_combine(components: &[DirectionalComponent], weights: &[f64]) -> Result<Matrix> {
    if components.is_empty() {
        return Err(Error::contract("weighted_combine needs at least one component"));
    }
    if components.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} components but {} weights",
            components.len(),
            weights.len()
        )));
    }
    let first = &components[0];
    let shape = (first.b_tilde.nrows(), first.a_tilde.ncols());
    let mut out = Matrix::zeros(shape);
    for (c, &w) in components.iter().zip(weights) {
        if c.layer_id != first.layer_id {
            return Err(Error::dim(format!(
                "mixed layers {} and {} in one combination",
                first.layer_id, c.layer_id
            )));
        }
        let d = c.composition();
        if d.dim() != shape {
            return Err(Error::dim(format!(
                "component from client {} has shape {:?}, expected {:?}",
                c.source_client,
                d.dim(),
                shape
            )));
        }
        out.scaled_add(w, &d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lid() -> LayerId {
        LayerId(0)
    }

    fn example_pair() -> AdapterPair {
        AdapterPair::new(lid(), array![[0.0, 1.5]], array![[2.0], [0.0]]).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng, r: usize, d_in: usize, d_out: usize) -> AdapterPair {
        let a = Matrix::from_shape_fn((r, d_in), |_| rng.random_range(-1.0..1.0));
        let b = Matrix::from_shape_fn((d_out, r), |_| rng.random_range(-1.0..1.0));
        AdapterPair::new(lid(), a, b).unwrap()
    }

    #[test]
    fn compose_small_product() {
        let m = compose(&example_pair()).unwrap();
        assert_eq!(m, array![[0.0, 3.0], [0.0, 0.0]]);
    }

    #[test]
    fn compose_zero_b_annihilates() {
        let mut p = example_pair();
        p.b_mat.fill(0.0);
        assert!(compose(&p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pair(&mut rng, 2, 3, 3);
        let m = compose(&p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += p.b_mat[[i, k]] * p.a_mat[[k, j]];
                }
                assert!((m[[i, j]] - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let p = AdapterPair {
            layer_id: lid(),
            a_mat: Matrix::zeros((2, 3)),
            b_mat: Matrix::zeros((3, 1)),
        };
        assert!(matches!(compose(&p), Err(Error::Dimension(_))));
        assert!(p.validate().is_err());
    }

    #[test]
    fn new_rejects_bad_rank_and_nan() {
        assert!(AdapterPair::new(lid(), Matrix::zeros((3, 2)), Matrix::zeros((2, 3))).is_err());
        let mut a = Matrix::zeros((1, 2));
        a[[0, 0]] = f64::NAN;
        assert!(AdapterPair::new(lid(), a, Matrix::zeros((2, 1))).is_err());
    }

    #[test]
    fn frob_inner_examples() {
        let eye = Matrix::eye(2);
        assert_eq!(frob_inner(&eye, &eye).unwrap(), 2.0);
        let m = array![[0.0, 3.0], [0.0, 0.0]];
        assert_eq!(frob_inner(&m, &m).unwrap(), 9.0);
        assert_eq!(frob_norm(&m), 3.0);
        let e11 = array![[1.0, 0.0], [0.0, 0.0]];
        let e22 = array![[0.0, 0.0], [0.0, 1.0]];
        assert_eq!(frob_inner(&e11, &e22).unwrap(), 0.0);
        assert!(frob_inner(&e11, &Matrix::zeros((2, 3))).is_err());
    }

    #[test]
    fn normalize_example_pair() {
        let c = normalize_direction(&example_pair(), 0, 1).unwrap();
        let s = 3f64.powf(-0.5);
        assert!((c.a_tilde()[[0, 1]] - 1.5 * s).abs() < 1e-15);
        assert!((c.b_tilde()[[0, 0]] - 2.0 * s).abs() < 1e-15);
        assert!((frob_norm(&c.composition()) - 1.0).abs() < 1e-12);
        assert_eq!(c.source_magnitude(), 3.0);
    }

    #[test]
    fn normalize_unit_pair_is_fixed_point() {
        let p = AdapterPair::new(lid(), array![[0.0, 1.0]], array![[1.0], [0.0]]).unwrap();
        let c = normalize_direction(&p, 0, 0).unwrap();
        assert_eq!(c.a_tilde(), &p.a_mat);
        assert_eq!(c.b_tilde(), &p.b_mat);
    }

    #[test]
    fn normalize_zero_pair_errors() {
        let p = AdapterPair::zeros(lid(), 1, 2, 2);
        assert!(matches!(
            normalize_direction(&p, 4, 2),
            Err(Error::ZeroUpdate { .. })
        ));
    }

    #[test]
    fn normalize_rank_deficient_product() {
        // Rank-2 factors whose product has rank 1.
        let a = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = array![[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]];
        let p = AdapterPair::new(lid(), a, b).unwrap();
        let c = normalize_direction(&p, 0, 0).unwrap();
        assert!((frob_norm(&c.composition()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let comps: Vec<_> = (0..3)
            .map(|j| normalize_direction(&random_pair(&mut rng, 2, 4, 4), j, 0).unwrap())
            .collect();
        let sel = weighted_combine(&comps, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(sel, comps[0].composition());
        let zero = weighted_combine(&comps, &[0.0; 3]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let d1 = AdapterPair::new(lid(), array![[1.0, 0.0]], array![[1.0], [0.0]]).unwrap();
        let d2 = AdapterPair::new(lid(), array![[0.0, 1.0]], array![[0.0], [1.0]]).unwrap();
        let orth = vec![
            normalize_direction(&d1, 0, 0).unwrap(),
            normalize_direction(&d2, 1, 0).unwrap(),
        ];
        let m = weighted_combine(&orth, &[3.0, 4.0]).unwrap();
        assert!((frob_norm(&m) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn combine_rejects_empty_and_mismatch() {
        assert!(matches!(weighted_combine(&[], &[]), Err(Error::Contract(_))));
        let c1 = normalize_direction(&example_pair(), 0, 0).unwrap();
        let other = AdapterPair::new(lid(), array![[1.0, 0.0, 0.0]], array![[1.0], [0.0], [0.0]])
            .unwrap();
        let c2 = normalize_direction(&other, 1, 0).unwrap();
        assert!(matches!(
            weighted_combine(&[c1.clone(), c2], &[1.0, 1.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            weighted_combine(&[c1], &[1.0, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    fn pair_strategy() -> impl Strategy<Value = AdapterPair> {
        (1usize..4, 4usize..8, 4usize..8, any::<u64>()).prop_map(|(r, di, dout, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_pair(&mut rng, r, di, dout)
        })
    }

    proptest! {
        #[test]
        fn normalized_product_is_rescaled_source(p in pair_strategy()) {
            let c = normalize_direction(&p, 0, 0).unwrap();
            let n = frob_norm(&c.composition());
            prop_assert!((n - 1.0).abs() <= 1e-6);
            let s2 = 1.0 / c.source_magnitude();
            let src = compose(&p).unwrap();
            for (x, y) in c.composition().iter().zip(src.iter()) {
                prop_assert!((x - s2 * y).abs() <= 1e-12 * (s2 * y).abs().max(1e-300) + 1e-15);
            }
        }

        #[test]
        fn normalization_is_idempotent(p in pair_strategy()) {
            let once = normalize_direction(&p, 0, 0).unwrap();
            let twice = normalize_direction(&once.to_pair(), 0, 0).unwrap();
            for (x, y) in once.a_tilde().iter().zip(twice.a_tilde().iter()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            for (x, y) in once.b_tilde().iter().zip(twice.b_tilde().iter()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn combine_is_linear_in_weights(seed in any::<u64>(), u in prop::collection::vec(-3.0f64..3.0, 3), v in prop::collection::vec(-3.0f64..3.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let comps: Vec<_> = (0..3)
                .map(|j| normalize_direction(&random_pair(&mut rng, 2, 5, 5), j, 0).unwrap())
                .collect();
            let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
            let lhs = weighted_combine(&comps, &uv).unwrap();
            let rhs = weighted_combine(&comps, &u).unwrap() + weighted_combine(&comps, &v).unwrap();
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn frobenius_geometry(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = || Matrix::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
            let (x, y, z) = (m(), m(), m());
            let xy = frob_inner(&x, &y).unwrap();
            prop_assert!((xy - frob_inner(&y, &x).unwrap()).abs() < 1e-12);
            let lhs = frob_inner(&(&x * 2.0 + &z), &y).unwrap();
            let rhs = 2.0 * xy + frob_inner(&z, &y).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
            prop_assert!(frob_norm(&(&x + &y)) <= frob_norm(&x) + frob_norm(&y) + 1e-12);
            prop_assert!(frob_norm(&(&x - &z)) <= frob_norm(&(&x - &y)) + frob_norm(&(&y - &z)) + 1e-12);
        }
    }
}
