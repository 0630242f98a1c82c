//! Coordinate-wise fusion, applied identically by every aggregator to its
//! partition.
//!
//! Accumulation always runs in party-registration order so that a partitioned
//! run and a single-aggregator run perform the same floating-point operations
//! per coordinate and agree bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionAlgorithm {
    WeightedAverage,
    GradientSum,
    CoordinateMedian,
    Krum,
    Paillier,
}

impl FusionAlgorithm {
    pub const ALL: [FusionAlgorithm; 5] = [
        FusionAlgorithm::WeightedAverage,
        FusionAlgorithm::GradientSum,
        FusionAlgorithm::CoordinateMedian,
        FusionAlgorithm::Krum,
        FusionAlgorithm::Paillier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionAlgorithm::WeightedAverage => "weighted_average",
            FusionAlgorithm::GradientSum => "gradient_sum",
            FusionAlgorithm::CoordinateMedian => "coordinate_median",
            FusionAlgorithm::Krum => "krum",
            FusionAlgorithm::Paillier => "paillier",
        }
    }

    /// Whether output coordinate j depends only on input coordinate j.
    pub fn is_coordinate_wise(self) -> bool {
        !matches!(self, FusionAlgorithm::Krum)
    }

    /// Parties upload gradients (FedSGD) rather than trained parameters.
    pub fn uploads_gradients(self) -> bool {
        matches!(self, FusionAlgorithm::GradientSum)
    }
}

impl fmt::Display for FusionAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion algorithm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub algorithm: FusionAlgorithm,
    pub party_weights: Vec<u64>,
    #[serde(default)]
    pub byzantine_f: usize,
    pub learning_rate: f64,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.party_weights.is_empty() {
            return Err(Error::invalid("no parties"));
        }
        if self.party_weights.contains(&0) {
            return Err(Error::invalid("party weights must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.algorithm == FusionAlgorithm::Krum {
            check_krum_size(self.party_weights.len(), self.byzantine_f)?;
        }
        Ok(())
    }
}

fn check_shapes<V: AsRef<[f64]>>(updates: &[V]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| Error::invalid("empty update set"))?
        .as_ref()
        .len();
    if let Some(i) = updates.iter().position(|u| u.as_ref().len() != first) {
        return Err(Error::invalid(format!(
            "update {i} has length {}, expected {first}",
            updates[i].as_ref().len()
        )));
    }
    Ok(first)
}

/// `out[j] = Σ_i (n_i / n) · updates[i][j]`, accumulated in slice order.
pub fn fuse_weighted_average<V: AsRef<[f64]>>(updates: &[V], weights: &[u64]) -> Result<Vec<f64>> {
    let len = check_shapes(updates)?;
    if weights.len() != updates.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if weights.contains(&0) {
        return Err(Error::invalid("party weights must be positive"));
    }
    let total: u64 = weights.iter().sum();
    let fractions: Vec<f64> = weights.iter().map(|&w| w as f64 / total as f64).collect();

    let mut out = vec![0.0; len];
    for (u, &w) in updates.iter().zip(&fractions) {
        for (o, &x) in out.iter_mut().zip(u.as_ref()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `out[j] = Σ_i gradients[i][j]`.
pub fn fuse_gradient_sum<V: AsRef<[f64]>>(gradients: &[V]) -> Result<Vec<f64>> {
    let len = check_shapes(gradients)?;
    let mut out = vec![0.0; len];
    for g in gradients {
        for (o, &x) in out.iter_mut().zip(g.as_ref()) {
            *o += x;
        }
    }
    Ok(out)
}

/// Party-side FedSGD step `θ ← θ − η · fused`.
pub fn apply_gradient_step(theta: &mut [f64], fused: &[f64], learning_rate: f64) -> Result<()> {
    if theta.len() != fused.len() {
        return Err(Error::invalid("model and fused gradient lengths differ"));
    }
    for (t, &g) in theta.iter_mut().zip(fused) {
        *t -= learning_rate * g;
    }
    Ok(())
}

/// Per-coordinate median; even counts take the midpoint of the middle pair.
pub fn fuse_coordinate_median<V: AsRef<[f64]>>(updates: &[V]) -> Result<Vec<f64>> {
    let len = check_shapes(updates)?;
    let n = updates.len();
    let mut column = vec![0.0; n];
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.as_ref()[j];
        }
        column.sort_unstable_by(f64::total_cmp);
        let mid = n / 2;
        out.push(if n % 2 == 1 {
            column[mid]
        } else {
            (column[mid - 1] + column[mid]) / 2.0
        });
    }
    Ok(out)
}

fn check_krum_size(n: usize, f: usize) -> Result<()> {
    if n <= 2 * f + 2 {
        return Err(Error::invalid(format!(
            "krum needs more than 2f + 2 = {} updates, got {n}",
            2 * f + 2
        )));
    }
    Ok(())
}

/// Krum scores: sum of squared distances to the `n − f − 2` nearest others.
///
/// Scoring only needs one neighbour (`n ≥ f + 3`); the Byzantine bound
/// `n > 2f + 2` is enforced by [`krum_select`].
pub fn krum_scores<V: AsRef<[f64]>>(updates: &[V], f: usize) -> Result<Vec<f64>> {
    check_shapes(updates)?;
    let n = updates.len();
    if n < f + 3 {
        return Err(Error::invalid(format!(
            "krum scoring needs at least f + 3 = {} updates, got {n}",
            f + 3
        )));
    }
    let neighbours = n - f - 2;

    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = updates[i]
                .as_ref()
                .iter()
                .zip(updates[j].as_ref())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            d.sort_unstable_by(f64::total_cmp);
            d[..neighbours].iter().sum()
        })
        .collect())
}

/// Returns the lowest-index minimiser of the Krum score and its update.
pub fn krum_select<V: AsRef<[f64]>>(updates: &[V], f: usize) -> Result<(usize, Vec<f64>)> {
    check_krum_size(updates.len(), f)?;
    let best = krum_argmin(&krum_scores(updates, f)?);
    Ok((best, updates[best].as_ref().to_vec()))
}

/// Lowest index holding the minimum score.
pub fn krum_argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    best
}

/// Dispatches a plaintext fusion. Paillier fusion operates on ciphertexts and
/// is handled by [`crate::he::fuse_encrypted`].
pub fn fuse<V: AsRef<[f64]>>(
    algorithm: FusionAlgorithm,
    updates: &[V],
    weights: &[u64],
    byzantine_f: usize,
) -> Result<Vec<f64>> {
    match algorithm {
        FusionAlgorithm::WeightedAverage => fuse_weighted_average(updates, weights),
        FusionAlgorithm::GradientSum => fuse_gradient_sum(updates),
        FusionAlgorithm::CoordinateMedian => fuse_coordinate_median(updates),
        FusionAlgorithm::Krum => krum_select(updates, byzantine_f).map(|(_, v)| v),
        FusionAlgorithm::Paillier => Err(Error::invalid(
            "paillier fusion runs on ciphertexts, not plaintext vectors",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_updates(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect()
    }

    #[test]
    fn weighted_average_by_hand() {
        let out = fuse_weighted_average(&[vec![0.0, 0.0], vec![4.0, 8.0]], &[1, 3]).unwrap();
        assert_eq!(out, vec![3.0, 6.0]);
    }

    #[test]
    fn single_party_average_is_identity() {
        let u = vec![0.1, -7.25, 3e-9];
        let out = fuse_weighted_average(&[u.clone()], &[17]).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn equal_weight_average_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let updates = random_updates(&mut rng, 5, 40);
        let out = fuse_weighted_average(&updates, &[2; 5]).unwrap();
        for j in 0..40 {
            let mut acc = 0.0;
            for u in &updates {
                acc += 0.2 * u[j];
            }
            assert_eq!(out[j].to_bits(), acc.to_bits());
        }
    }

    #[test]
    fn gradient_sum_and_step() {
        assert_eq!(
            fuse_gradient_sum(&[vec![1.0, -1.0], vec![1.0, 3.0]]).unwrap(),
            vec![2.0, 2.0]
        );
        assert_eq!(fuse_gradient_sum(&[vec![4.5]]).unwrap(), vec![4.5]);
        let mut theta = vec![1.0, 1.0];
        apply_gradient_step(&mut theta, &[2.0, -2.0], 0.5).unwrap();
        assert_eq!(theta, vec![0.0, 2.0]);
    }

    #[test]
    fn median_examples() {
        let out = fuse_coordinate_median(&[
            vec![1.0, 10.0],
            vec![2.0, 20.0],
            vec![9.0, 30.0],
        ])
        .unwrap();
        assert_eq!(out, vec![2.0, 20.0]);
        assert_eq!(fuse_coordinate_median(&[vec![3.0]]).unwrap(), vec![3.0]);
    }

    #[test]
    fn even_median_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let updates = random_updates(&mut rng, 4, 25);
        let out = fuse_coordinate_median(&updates).unwrap();
        for j in 0..25 {
            let mut col: Vec<f64> = updates.iter().map(|u| u[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(out[j], (col[1] + col[2]) / 2.0);
        }
    }

    #[test]
    fn empty_and_ragged_inputs_fail() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(fuse_gradient_sum(&empty).is_err());
        assert!(fuse_coordinate_median(&empty).is_err());
        assert!(fuse_weighted_average(&empty, &[]).is_err());
        let ragged = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(fuse_gradient_sum(&ragged).is_err());
        assert!(fuse_weighted_average(&ragged, &[1, 1]).is_err());
        assert!(fuse_weighted_average(&[vec![1.0]], &[0]).is_err());
    }

    #[test]
    fn krum_one_dimensional_example() {
        let updates = vec![vec![0.0], vec![0.1], vec![0.2], vec![100.0]];
        let scores = krum_scores(&updates, 1).unwrap();
        // Brute-force enumeration: nearest-neighbour squared distances.
        assert_eq!(scores[0], 0.010000000000000002);
        assert_eq!(scores[1], 0.010000000000000002);
        assert_eq!(scores[2], 0.010000000000000002);
        assert_eq!(scores[3], 9960.039999999999);
        assert_eq!(krum_argmin(&scores), 0);
        // Four updates do not meet the n > 2f + 2 bound for f = 1.
        assert!(krum_select(&updates, 1).is_err());
        // Exact in binary: scores 5, 2, 2, 5, 9410; tie between 1 and 2.
        let five = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![100.0]];
        let (idx, v) = krum_select(&five, 1).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn krum_identical_updates_pick_first() {
        let updates = vec![vec![1.0, 2.0]; 5];
        assert_eq!(krum_select(&updates, 1).unwrap().0, 0);
    }

    #[test]
    fn krum_rejects_small_populations() {
        let updates = vec![vec![1.0]; 4];
        assert!(krum_select(&updates, 1).is_err());
        assert!(krum_select(&updates[..2], 0).is_err());
        assert!(krum_select(&updates[..3], 0).is_ok());
    }

    #[test]
    fn krum_is_invariant_under_common_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let updates = random_updates(&mut rng, 7, 30);
        let spec = crate::tensor::derive_permutation(&[4; 32], 2, 0, 30);
        let permuted: Vec<Vec<f64>> = updates.iter().map(|u| spec.permute(u).unwrap()).collect();
        let (a, _) = krum_select(&updates, 2).unwrap();
        let (b, v) = krum_select(&permuted, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(spec.unpermute(&v).unwrap(), updates[a]);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in FusionAlgorithm::ALL {
            assert_eq!(a.as_str().parse::<FusionAlgorithm>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.as_str()));
        }
        assert!("fedprox".parse::<FusionAlgorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = FusionConfig {
            algorithm: FusionAlgorithm::Krum,
            party_weights: vec![1, 1, 1, 1],
            byzantine_f: 1,
            learning_rate: 0.1,
        };
        assert!(cfg.validate().is_err());
        cfg.byzantine_f = 0;
        assert!(cfg.validate().is_ok());
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }
}
