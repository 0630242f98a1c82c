//! Reconstruction attacks against what a curious aggregator observes, and
//! the fidelity metrics used to score them.
//!
//! For a single dense softmax layer and batch size 1 the gradient-matching
//! problem has a closed-form minimiser: `dL/dW = (p − y)·xᵀ` and
//! `dL/db = p − y`, so `x_j = (dL/dW)_{ij} / (dL/db)_i` for any row with a
//! nonzero bias gradient, and the true label is the only negative entry of
//! `dL/db`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::aggregator::UploadRecord;
use crate::mesh::wire::{decode_body, WireMessage};
use crate::tensor::{
    build_mapper, decode_f64_payload, derive_permutation, parse_seed_hex, ModelMapper, Seed,
};
use crate::trainer::Example;

/// What the attacker sees and knows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakScenario {
    pub name: String,
    /// Aggregators whose view the attacker holds.
    pub leaked_partitions: Vec<usize>,
    #[serde(default)]
    pub knows_mapper: bool,
    #[serde(default)]
    pub knows_permutation: bool,
}

impl LeakScenario {
    pub fn new(name: &str, leaked_partitions: Vec<usize>, knows_mapper: bool, knows_permutation: bool) -> Self {
        Self {
            name: name.into(),
            leaked_partitions,
            knows_mapper,
            knows_permutation,
        }
    }

    /// Fraction of coordinates held by the leaked aggregators.
    pub fn leaked_fraction(&self, mapper: &ModelMapper) -> f64 {
        let held: usize = self.leaked_partitions.iter().map(|&a| mapper.count(a)).sum();
        held as f64 / mapper.model_size() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub x_hat: Vec<f64>,
    /// Per feature: whether some visible row determined it.
    pub recovered: Vec<bool>,
    pub label: Option<usize>,
    pub mse: f64,
    pub cosine_distance: Option<f64>,
}

impl ReconstructionResult {
    pub fn possible(&self) -> bool {
        self.recovered.iter().any(|&r| r)
    }
}

/// Closed-form input recovery from a (partially visible) flattened gradient
/// laid out as `W` row-major then `b`. Each feature uses the visible row with
/// the largest nonzero `|dL/db_i|`; features without one stay 0.
pub fn invert_dense_layer(observed: &[Option<f64>], classes: usize, features: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    if observed.len() != classes * features + classes {
        return Err(Error::invalid(format!(
            "observation has {} coordinates, a {classes}x{features} layer has {}",
            observed.len(),
            classes * features + classes
        )));
    }
    let bias = &observed[classes * features..];
    let mut rows: Vec<(usize, f64)> = bias
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.filter(|v| *v != 0.0).map(|v| (i, v)))
        .collect();
    rows.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));

    let mut x = vec![0.0; features];
    let mut recovered = vec![false; features];
    for j in 0..features {
        for &(i, b) in &rows {
            if let Some(w) = observed[i * features + j] {
                x[j] = w / b;
                recovered[j] = true;
                break;
            }
        }
    }
    Ok((x, recovered))
}

/// Index of the unique negative visible entry, if there is exactly one.
pub fn infer_label(observed_bias: &[Option<f64>]) -> Option<usize> {
    let mut negatives = observed_bias
        .iter()
        .enumerate()
        .filter(|(_, b)| matches!(b, Some(v) if *v < 0.0));
    let first = negatives.next()?;
    if negatives.next().is_some() {
        return None;
    }
    Some(first.0)
}

/// `1 − ⟨a,b⟩ / sqrt(‖a‖²‖b‖²)`, clamped to [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine distance is undefined for a zero vector"));
    }
    Ok((1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

pub const MSE_BUCKETS: [&str; 6] = ["[0,1e-3)", "[1e-3,1e-2)", "[1e-2,1e-1)", "[1e-1,1)", "[1,1e2)", ">=1e2"];
const MSE_EDGES: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 1e2];

pub const COSINE_BANDS: [&str; 6] = ["[0,0.01)", "[0.01,0.2)", "[0.2,0.4)", "[0.4,0.6)", "[0.6,0.8)", "[0.8,2]"];
const COSINE_EDGES: [f64; 5] = [0.01, 0.2, 0.4, 0.6, 0.8];

pub fn mse_bucket(v: f64) -> usize {
    MSE_EDGES.iter().position(|&e| v < e).unwrap_or(MSE_EDGES.len())
}

pub fn cosine_band(v: f64) -> usize {
    COSINE_EDGES.iter().position(|&e| v < e).unwrap_or(COSINE_EDGES.len())
}

/// Session facts an attacker may or may not be granted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub model_size: usize,
    pub classes: usize,
    pub features: usize,
    pub proportions: Vec<f64>,
    pub permute: bool,
    pub mapper_seed_hex: String,
    pub permutation_key_hex: String,
}

/// A party's true batch and upload in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub round_id: u64,
    pub party_id: String,
    pub batch: Vec<Example>,
    pub update: Vec<f64>,
}

/// Recorded session: upload frames exactly as each aggregator received them,
/// plus ground truth for scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub header: TraceHeader,
    pub uploads: Vec<UploadRecord>,
    pub truth: Vec<GroundTruth>,
}

/// Builds the attacker's aligned view of the flattened update from the
/// partitions it holds. Without the mapper, the attacker lays the leaked
/// values out in natural order starting at coordinate 0; without the key,
/// it takes each partition's order at face value.
pub fn attacker_view(
    leaked: &BTreeMap<usize, Vec<f64>>,
    scenario: &LeakScenario,
    model_size: usize,
    mapper: &ModelMapper,
    key: Option<&Seed>,
    round_id: u64,
) -> Vec<Option<f64>> {
    let mut view = vec![None; model_size];
    let mut cursor = 0;
    for (&a, values) in leaked {
        let ordered = match (scenario.knows_permutation, key) {
            (true, Some(k)) => derive_permutation(k, round_id, a as u32, values.len())
                .unpermute(values)
                .expect("partition length matches its permutation"),
            _ => values.clone(),
        };
        if scenario.knows_mapper {
            for (&pos, v) in mapper.positions(a).iter().zip(ordered) {
                view[pos] = Some(v);
            }
        } else {
            for v in ordered {
                if cursor < model_size {
                    view[cursor] = Some(v);
                }
                cursor += 1;
            }
        }
    }
    view
}

pub fn reconstruct(
    view: &[Option<f64>],
    classes: usize,
    features: usize,
    truth: &Example,
    true_update: &[f64],
) -> Result<ReconstructionResult> {
    let (x_hat, recovered) = invert_dense_layer(view, classes, features)?;
    let label = infer_label(&view[classes * features..]);
    let dense: Vec<f64> = view.iter().map(|v| v.unwrap_or(0.0)).collect();
    Ok(ReconstructionResult {
        mse: mse(&x_hat, &truth.x),
        x_hat,
        recovered,
        label,
        cosine_distance: cosine_distance(true_update, &dense).ok(),
    })
}

/// One JSON-lines record per (scenario, round, party).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scenario: String,
    pub round_id: u64,
    pub party_id: String,
    pub mse: f64,
    pub label_correct: bool,
    pub cosine_distance: Option<f64>,
    pub bucket: String,
    pub cosine_band: Option<String>,
    pub recovered_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub leaked_fraction: f64,
    pub knows_mapper: bool,
    pub knows_permutation: bool,
    pub trials: usize,
    /// Count per MSE bucket, in [`MSE_BUCKETS`] order.
    pub mse_buckets: Vec<usize>,
    /// Count per cosine band, in [`COSINE_BANDS`] order; trials with an
    /// undefined distance are not counted.
    pub cosine_bands: Vec<usize>,
    pub label_accuracy: f64,
}

impl ScenarioSummary {
    pub fn mse_fraction(&self, bucket: usize) -> f64 {
        self.mse_buckets[bucket] as f64 / self.trials.max(1) as f64
    }

    pub fn cosine_fraction(&self, band: usize) -> f64 {
        let total: usize = self.cosine_bands.iter().sum();
        self.cosine_bands[band] as f64 / total.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub summaries: Vec<ScenarioSummary>,
    pub trials: Vec<TrialRecord>,
}

fn decode_upload(record: &UploadRecord) -> Result<Option<Vec<f64>>> {
    let raw = B64
        .decode(&record.frame_b64)
        .map_err(|e| Error::invalid(format!("trace frame is not base64: {e}")))?;
    match decode_body(&raw)? {
        WireMessage::Upload {
            payload_b64: Some(p), ..
        } => Ok(Some(decode_f64_payload(&p)?)),
        // Ciphertexts reveal nothing to an aggregator.
        WireMessage::Upload { .. } => Ok(None),
        other => Err(Error::invalid(format!("trace frame holds {}, not an upload", other.kind()))),
    }
}

pub fn run_attack_suite(trace: &Trace, scenarios: &[LeakScenario]) -> Result<AttackReport> {
    let h = &trace.header;
    let mapper = build_mapper(h.model_size, &h.proportions, parse_seed_hex(&h.mapper_seed_hex)?)?;
    let key = if h.permute {
        Some(parse_seed_hex(&h.permutation_key_hex)?)
    } else {
        None
    };
    let a_count = h.proportions.len();

    let mut frames: BTreeMap<(u64, &str, usize), &UploadRecord> = BTreeMap::new();
    for r in &trace.uploads {
        frames.insert((r.round_id, r.party_id.as_str(), r.agg_index), r);
    }
    for t in &trace.truth {
        if t.batch.len() != 1 {
            return Err(Error::invalid(format!(
                "attacks assume batch size 1; {} used {}",
                t.party_id,
                t.batch.len()
            )));
        }
        if (0..a_count).any(|a| !frames.contains_key(&(t.round_id, t.party_id.as_str(), a))) {
            return Err(Error::invalid(format!(
                "trace is missing round {} uploads from {}",
                t.round_id, t.party_id
            )));
        }
    }

    let mut summaries = Vec::new();
    let mut trials = Vec::new();
    for s in scenarios {
        if let Some(&a) = s.leaked_partitions.iter().find(|&&a| a >= a_count) {
            return Err(Error::invalid(format!("scenario {:?} leaks missing partition {a}", s.name)));
        }
        let mut summary = ScenarioSummary {
            scenario: s.name.clone(),
            leaked_fraction: s.leaked_fraction(&mapper),
            knows_mapper: s.knows_mapper,
            knows_permutation: s.knows_permutation,
            trials: 0,
            mse_buckets: vec![0; MSE_BUCKETS.len()],
            cosine_bands: vec![0; COSINE_BANDS.len()],
            label_accuracy: 0.0,
        };
        let mut correct = 0;
        for t in &trace.truth {
            let mut leaked = BTreeMap::new();
            for &a in &s.leaked_partitions {
                if let Some(v) = decode_upload(frames[&(t.round_id, t.party_id.as_str(), a)])? {
                    leaked.insert(a, v);
                }
            }
            let view = attacker_view(&leaked, s, h.model_size, &mapper, key.as_ref(), t.round_id);
            let ex = &t.batch[0];
            let r = reconstruct(&view, h.classes, h.features, ex, &t.update)?;
            let bucket = mse_bucket(r.mse);
            summary.mse_buckets[bucket] += 1;
            let band = r.cosine_distance.map(cosine_band);
            if let Some(b) = band {
                summary.cosine_bands[b] += 1;
            }
            let label_correct = r.label == Some(ex.y);
            correct += label_correct as usize;
            summary.trials += 1;
            trials.push(TrialRecord {
                scenario: s.name.clone(),
                round_id: t.round_id,
                party_id: t.party_id.clone(),
                mse: r.mse,
                label_correct,
                cosine_distance: r.cosine_distance,
                bucket: MSE_BUCKETS[bucket].into(),
                cosine_band: band.map(|b| COSINE_BANDS[b].to_string()),
                recovered_fraction: r.recovered.iter().filter(|&&v| v).count() as f64
                    / h.features.max(1) as f64,
            });
        }
        summary.label_accuracy = correct as f64 / summary.trials.max(1) as f64;
        summaries.push(summary);
    }
    Ok(AttackReport { summaries, trials })
}

impl AttackReport {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Percentage tables: MSE buckets, then cosine bands, one row per
    /// scenario.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, cells: Vec<f64>, extra: String| {
            let _ = write!(out, "{name:<28}");
            for c in cells {
                let _ = write!(out, "{:>13}", format!("{:.1}%", 100.0 * c));
            }
            let _ = writeln!(out, "{extra}");
        };
        let _ = write!(out, "{:<28}", "MSE (fraction of trials)");
        for b in MSE_BUCKETS {
            let _ = write!(out, "{b:>13}");
        }
        let _ = writeln!(out, "{:>10}{:>8}", "label", "leak");
        for s in &self.summaries {
            row(
                &mut out,
                &s.scenario,
                (0..MSE_BUCKETS.len()).map(|b| s.mse_fraction(b)).collect(),
                format!("{:>9.1}%{:>7.0}%", 100.0 * s.label_accuracy, 100.0 * s.leaked_fraction),
            );
        }
        let _ = writeln!(out);
        let _ = write!(out, "{:<28}", "cosine distance");
        for b in COSINE_BANDS {
            let _ = write!(out, "{b:>13}");
        }
        let _ = writeln!(out);
        for s in &self.summaries {
            let defined: usize = s.cosine_bands.iter().sum();
            if defined == 0 {
                let _ = writeln!(out, "{:<28}{:>13}", s.scenario, "n/a");
                continue;
            }
            row(
                &mut out,
                &s.scenario,
                (0..COSINE_BANDS.len()).map(|b| s.cosine_fraction(b)).collect(),
                String::new(),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PermutationSpec;
    use crate::trainer::{gradient, DenseSoftmaxModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn hand_worked_inversion() {
        // x = [1, 2], c = 2, W = 0: p = [0.5, 0.5], y = 0.
        let m = DenseSoftmaxModel::zeros(2, 2);
        let ex = Example { x: vec![1.0, 2.0], y: 0 };
        let g = gradient(&m, &[ex.clone()]).unwrap();
        assert_eq!(&g[4..], &[-0.5, 0.5]);
        assert_eq!(&g[..2], &[-0.5, -1.0]);
        let r = reconstruct(&full(&g), 2, 2, &ex, &g).unwrap();
        assert_eq!(r.x_hat, vec![1.0, 2.0]);
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.label, Some(0));
        assert_eq!(r.cosine_distance, Some(0.0));
    }

    #[test]
    fn nothing_visible_yields_zero_vector() {
        let ex = Example { x: vec![1.0, -3.0, 2.0], y: 1 };
        let view = vec![None; 2 * 3 + 2];
        let r = reconstruct(&view, 2, 3, &ex, &[1.0; 8]).unwrap();
        assert_eq!(r.x_hat, vec![0.0; 3]);
        assert!(!r.possible());
        assert_eq!(r.mse, (1.0 + 9.0 + 4.0) / 3.0);
        assert_eq!(r.label, None);
        assert_eq!(r.cosine_distance, None);
    }

    #[test]
    fn label_sign_rule() {
        assert_eq!(infer_label(&full(&[0.2, -0.5, 0.3])), Some(1));
        assert_eq!(infer_label(&[Some(0.2), None, Some(0.3)]), None);
        assert_eq!(infer_label(&full(&[-0.2, -0.5, 0.3])), None);
    }

    #[test]
    fn cosine_reference_values() {
        let g = vec![0.3, -1.2, 4.0];
        assert_eq!(cosine_distance(&g, &g).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(mse_bucket(0.0), 0);
        assert_eq!(mse_bucket(1e-3), 1);
        assert_eq!(mse_bucket(0.5), 3);
        assert_eq!(mse_bucket(1e2), 5);
        assert_eq!(cosine_band(0.0), 0);
        assert_eq!(cosine_band(0.8), 5);
        assert_eq!(cosine_band(2.0), 5);
    }

    #[test]
    fn permuted_full_leak_scrambles_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, d) = (10, 64);
        let mut scrambled = 0;
        for trial in 0..100 {
            let flat: Vec<f64> = (0..c * d + c).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let m = DenseSoftmaxModel::from_flat(c, d, &flat).unwrap();
            let ex = Example {
                x: (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                y: rng.gen_range(0..c),
            };
            let g = gradient(&m, &[ex.clone()]).unwrap();
            let spec = derive_permutation(&[trial as u8; 32], 1, 0, g.len());
            let seen = spec.permute(&g).unwrap();
            let r = reconstruct(&full(&seen), c, d, &ex, &g).unwrap();
            let mean = ex.x.iter().sum::<f64>() / d as f64;
            let var = ex.x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            if r.mse >= 0.5 * var {
                scrambled += 1;
            }
        }
        assert!(scrambled >= 95, "{scrambled}");
    }

    #[test]
    fn attacker_view_layouts() {
        let mapper = build_mapper(6, &[0.5, 0.5], [4; 32]).unwrap();
        let g = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0];
        let parts = crate::tensor::partition(&g, &mapper).unwrap();
        let key = [8; 32];
        let mut leaked = BTreeMap::new();
        for a in 0..2 {
            let p = derive_permutation(&key, 3, a as u32, mapper.count(a));
            leaked.insert(a, p.permute(&parts.parts[a]).unwrap());
        }
        let all_known = LeakScenario::new("k", vec![0, 1], true, true);
        let view = attacker_view(&leaked, &all_known, 6, &mapper, Some(&key), 3);
        assert_eq!(view, full(&g));
        let blind = LeakScenario::new("b", vec![0], false, false);
        let mut only0 = leaked.clone();
        only0.remove(&1);
        let view = attacker_view(&only0, &blind, 6, &mapper, Some(&key), 3);
        assert_eq!(view.iter().filter(|v| v.is_some()).count(), 3);
        assert!(view[..3].iter().all(Option::is_some));
        let _ = PermutationSpec::identity(0);
    }
}
