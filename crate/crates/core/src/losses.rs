//! Tuple losses over embedding space: triplet and quadruplet hinges on
//! squared Euclidean distances, plus fixed and batch-adaptive margins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tuple loss a pipeline realization trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Quadruplet,
}

impl LossKind {
    pub fn display_name(&self) -> &'static str {
        match self {
            LossKind::Triplet => "Triplet",
            LossKind::Quadruplet => "Quadruplet",
        }
    }
}

/// Margin selection mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    Fixed,
    Adaptive,
}

/// Hinge margins for the tuple losses.
///
/// In fixed mode `alpha1`/`alpha2` are used as-is. In adaptive mode the
/// margins are recomputed per mini-batch as the gap between mean
/// anchor-negative and mean anchor-positive squared distances, floored at
/// `floor1`/`floor2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub mode: MarginMode,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    #[serde(default = "default_alpha2")]
    pub alpha2: f64,
    #[serde(default = "default_alpha1")]
    pub floor1: f64,
    #[serde(default = "default_alpha2")]
    pub floor2: f64,
}

fn default_alpha1() -> f64 {
    0.8
}

fn default_alpha2() -> f64 {
    0.4
}

impl Default for MarginSpec {
    fn default() -> Self {
        MarginSpec::fixed(default_alpha1(), default_alpha2())
    }
}

impl MarginSpec {
    pub fn fixed(alpha1: f64, alpha2: f64) -> Self {
        MarginSpec {
            mode: MarginMode::Fixed,
            alpha1,
            alpha2,
            floor1: alpha1,
            floor2: alpha2,
        }
    }

    pub fn adaptive(floor1: f64, floor2: f64) -> Self {
        MarginSpec {
            mode: MarginMode::Adaptive,
            alpha1: floor1,
            alpha2: floor2,
            floor1,
            floor2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha1 <= 0.0 || self.alpha2 <= 0.0 || self.floor1 <= 0.0 || self.floor2 <= 0.0 {
            return Err(Error::Argument(
                "margins and floors must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn display_name(&self) -> &'static str {
        match self.mode {
            MarginMode::Fixed => "Fixed",
            MarginMode::Adaptive => "Adaptive",
        }
    }
}

/// A loss value with the gradient per participating embedding,
/// ordered (anchor, positive, negative[, second negative]).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Squared Euclidean distance between two equal-length vectors.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len(), "sq_dist dimension mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn axpy(out: &mut [f64], scale: f64, x: &[f64], y: &[f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
        *o += scale * (a - b);
    }
}

/// Triplet hinge `max(0, d(a,p)^2 - d(a,n)^2 + alpha)`.
///
/// When the hinge is active the gradients are
/// `d/da = 2(n - p)`, `d/dp = 2(p - a)`, `d/dn = 2(a - n)`; all zero
/// otherwise (the hinge boundary counts as inactive).
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], alpha: f64) -> LossOutput {
    let dim = anchor.len();
    let hinge = sq_dist(anchor, positive) - sq_dist(anchor, negative) + alpha;
    let mut grads = vec![vec![0.0; dim]; 3];
    if hinge <= 0.0 {
        return LossOutput {
            value: 0.0,
            grads,
        };
    }
    axpy(&mut grads[0], 2.0, negative, positive);
    axpy(&mut grads[1], 2.0, positive, anchor);
    axpy(&mut grads[2], 2.0, anchor, negative);
    LossOutput {
        value: hinge,
        grads,
    }
}

/// Quadruplet loss: the triplet hinge plus a second hinge
/// `max(0, d(a,p)^2 - d(q,n)^2 + alpha2)` pushing the negative away from a
/// third class `q` as well. Gradients are the sum of each active hinge's
/// gradients. Output order: anchor, positive, negative, second negative.
pub fn quadruplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    second_negative: &[f64],
    alpha1: f64,
    alpha2: f64,
) -> LossOutput {
    let dim = anchor.len();
    let first = triplet_loss(anchor, positive, negative, alpha1);
    let mut grads = first.grads;
    grads.push(vec![0.0; dim]);
    let mut value = first.value;

    let hinge2 = sq_dist(anchor, positive) - sq_dist(second_negative, negative) + alpha2;
    if hinge2 > 0.0 {
        value += hinge2;
        axpy(&mut grads[0], 2.0, anchor, positive);
        axpy(&mut grads[1], 2.0, positive, anchor);
        axpy(&mut grads[2], 2.0, second_negative, negative);
        axpy(&mut grads[3], 2.0, negative, second_negative);
    }
    LossOutput { value, grads }
}

/// Batch-adaptive margin: `max(floor, mean(negative dists) - mean(positive dists))`,
/// recomputed per mini-batch over squared distances.
pub fn adaptive_margin(
    anchor_negative_sqdists: &[f64],
    anchor_positive_sqdists: &[f64],
    floor: f64,
) -> Result<f64> {
    if anchor_negative_sqdists.is_empty() || anchor_positive_sqdists.is_empty() {
        return Err(Error::Argument(
            "adaptive margin needs non-empty distance lists".into(),
        ));
    }
    if floor <= 0.0 {
        return Err(Error::Argument("adaptive margin floor must be > 0".into()));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(floor.max(mean(anchor_negative_sqdists) - mean(anchor_positive_sqdists)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent scalar oracles, kept deliberately one-line.
    fn sq(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    }
    fn trip_oracle(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> f64 {
        f64::max(0.0, sq(a, p) - sq(a, n) + alpha)
    }
    fn quad_oracle(a: &[f64], p: &[f64], n: &[f64], q: &[f64], a1: f64, a2: f64) -> f64 {
        f64::max(0.0, sq(a, p) - sq(a, n) + a1) + f64::max(0.0, sq(a, p) - sq(q, n) + a2)
    }

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    #[test]
    fn sq_dist_identity_orthonormal_antipodal() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        let neg = [-1.0, 0.0, 0.0];
        assert_eq!(sq_dist(&e1, &e1), 0.0);
        assert!((sq_dist(&e1, &e2) - 2.0).abs() < 1e-15);
        assert!((sq_dist(&e1, &neg) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn triplet_inactive_hinge_is_zero_with_zero_grads() {
        // d_ap^2 = 0, d_an^2 = 1.0, alpha = 0.8 -> hinge argument -0.2
        let a = [1.0, 0.0];
        let p = [1.0, 0.0];
        let angle = (1.0f64 - 1.0 / 2.0).acos(); // d^2 = 2 - 2 cos = 1.0
        let n = [angle.cos(), angle.sin()];
        let out = triplet_loss(&a, &p, &n, 0.8);
        assert_eq!(out.value, 0.0);
        assert!(out.grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_matches_scalar_oracle_at_fixed_point() {
        // d_ap^2 = 1.0 and d_an^2 = 1.0, alpha = 0.8 -> 0.8
        let a = [1.0, 0.0];
        let angle = (0.5f64).acos();
        let p = [angle.cos(), angle.sin()];
        let n = [angle.cos(), -angle.sin()];
        let out = triplet_loss(&a, &p, &n, 0.8);
        assert!((out.value - 0.8).abs() < 1e-12);
        assert!((out.value - trip_oracle(&a, &p, &n, 0.8)).abs() < 1e-12);
    }

    #[test]
    fn triplet_hinge_boundary_is_zero() {
        // choose points with d_an^2 exactly d_ap^2 + alpha
        let a = [1.0, 0.0];
        let p = [0.0, 1.0]; // d_ap^2 = 2
        let n = [-1.0, 0.0]; // d_an^2 = 4
        let out = triplet_loss(&a, &p, &n, 2.0);
        assert_eq!(out.value, 0.0);
        assert!(out.grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn quadruplet_both_hinges_match_oracle() {
        // all three squared distances 1.0 -> 0.8 + 0.4 = 1.2
        let angle = (0.5f64).acos();
        let a = vec![1.0, 0.0];
        let p = vec![angle.cos(), angle.sin()];
        let n = vec![angle.cos(), -angle.sin()];
        // place q so that d(q,n)^2 = 1.0 as well
        let q = vec![1.0, 0.0]; // d(q,n)^2 = d(a,n)^2 = 1.0
        let out = quadruplet_loss(&a, &p, &n, &q, 0.8, 0.4);
        assert!((out.value - 1.2).abs() < 1e-12);
        assert!((out.value - quad_oracle(&a, &p, &n, &q, 0.8, 0.4)).abs() < 1e-12);
    }

    #[test]
    fn quadruplet_inactive_is_zero() {
        let a = [1.0, 0.0];
        let p = [1.0, 0.0];
        let n = [-1.0, 0.0]; // d_an^2 = 4
        let q = [0.0, 1.0]; // d_qn^2 = 2
        let out = quadruplet_loss(&a, &p, &n, &q, 0.8, 0.4);
        assert_eq!(out.value, 0.0);
        assert!(out.grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn quadruplet_second_term_limit_at_tiny_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (a, p, n, q) = (
                unit(&mut rng, 4),
                unit(&mut rng, 4),
                unit(&mut rng, 4),
                unit(&mut rng, 4),
            );
            let tiny = 1e-12;
            let out = quadruplet_loss(&a, &p, &n, &q, 0.8, tiny);
            let second = out.value - triplet_loss(&a, &p, &n, 0.8).value;
            let expect = f64::max(0.0, sq(&a, &p) - sq(&q, &n));
            assert!((second - expect).abs() < 1e-9, "{second} vs {expect}");
        }
    }

    #[test]
    fn adaptive_margin_values() {
        assert_eq!(adaptive_margin(&[2.0], &[0.5], 0.8).unwrap(), 1.5);
        assert_eq!(adaptive_margin(&[0.4], &[0.5], 0.8).unwrap(), 0.8);
        assert!((adaptive_margin(&[1.0], &[0.1], 0.8).unwrap() - 0.9).abs() < 1e-12);
        assert!(matches!(
            adaptive_margin(&[], &[0.1], 0.8),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn triplet_equals_first_quadruplet_hinge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (a, p, n, q) = (
                unit(&mut rng, 6),
                unit(&mut rng, 6),
                unit(&mut rng, 6),
                unit(&mut rng, 6),
            );
            let alpha = rng.gen_range(0.1..1.5);
            let trip = triplet_loss(&a, &p, &n, alpha);
            let quad = quadruplet_loss(&a, &p, &n, &q, alpha, 1e9);
            // with a huge alpha2 the second hinge is d_ap^2 - d_qn^2 + 1e9;
            // subtract it back out to isolate the first hinge
            let second = sq(&a, &p) - sq(&q, &n) + 1e9;
            assert!((quad.value - second - trip.value).abs() < 1e-6);
        }
    }

    /// Central-difference check of the loss gradients through sq_dist,
    /// sampled away from the hinge kink.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let dim = 5;
            let mut pts = [
                unit(&mut rng, dim),
                unit(&mut rng, dim),
                unit(&mut rng, dim),
                unit(&mut rng, dim),
            ];
            let a1 = rng.gen_range(0.2..1.2);
            let a2 = rng.gen_range(0.1..0.8);
            let arg1 = sq(&pts[0], &pts[1]) - sq(&pts[0], &pts[2]) + a1;
            let arg2 = sq(&pts[0], &pts[1]) - sq(&pts[3], &pts[2]) + a2;
            if arg1.abs() < 1e-3 || arg2.abs() < 1e-3 {
                continue;
            }
            checked += 1;
            let analytic =
                quadruplet_loss(&pts[0], &pts[1], &pts[2], &pts[3], a1, a2).grads;
            for who in 0..4 {
                for k in 0..dim {
                    let orig = pts[who][k];
                    pts[who][k] = orig + h;
                    let up = quad_oracle(&pts[0], &pts[1], &pts[2], &pts[3], a1, a2);
                    pts[who][k] = orig - h;
                    let down = quad_oracle(&pts[0], &pts[1], &pts[2], &pts[3], a1, a2);
                    pts[who][k] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let got = analytic[who][k];
                    let denom = got.abs().max(numeric.abs()).max(1.0);
                    assert!(
                        ((got - numeric) / denom).abs() < 1e-6,
                        "grad mismatch who={who} k={k}: {got} vs {numeric}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn loss_values_are_non_negative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, p, n, q) = (
                unit(&mut rng, 3),
                unit(&mut rng, 3),
                unit(&mut rng, 3),
                unit(&mut rng, 3),
            );
            let alpha = rng.gen_range(0.01..2.0);
            prop_assert!(triplet_loss(&a, &p, &n, alpha).value >= 0.0);
            prop_assert!(quadruplet_loss(&a, &p, &n, &q, alpha, alpha / 2.0).value >= 0.0);
        }

        #[test]
        fn adaptive_margin_respects_floor(
            an in proptest::collection::vec(0.0f64..4.0, 1..20),
            ap in proptest::collection::vec(0.0f64..4.0, 1..20),
            floor in 0.01f64..2.0,
        ) {
            let m = adaptive_margin(&an, &ap, floor).unwrap();
            prop_assert!(m >= floor);
        }

        #[test]
        fn triplet_zero_iff_separated(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
            let (a, p, n) = (unit(&mut rng, 4), unit(&mut rng, 4), unit(&mut rng, 4));
            let alpha = rng.gen_range(0.01..2.0);
            let out = triplet_loss(&a, &p, &n, alpha);
            let separated = sq(&a, &n) >= sq(&a, &p) + alpha;
            prop_assert_eq!(out.value == 0.0, separated);
        }
    }
}
