//! Unified observation/action spaces across embodiments: zero-padding,
//! validity masks, and quantile MinMax normalization.
//!
//! Every embodiment's native vectors are padded with zeros up to the
//! elementwise maximum dimension over the active set. A per-embodiment
//! binary action mask (1 = valid, 0 = padded) travels with every sample.
//! Normalization maps the 5th/95th percentile of each dimension onto
//! [−1, 1] without clipping; constant dimensions map to 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("empty embodiment list")]
    EmptySpecs,
    #[error("vector of length {got} does not fit target dimension {target}")]
    PadOverflow { got: usize, target: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("need at least {need} samples per dimension, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

/// Per-embodiment dimensions and identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub id: u32,
    pub name: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub command_dim: usize,
    pub privileged_dim: usize,
}

/// Binary action-validity mask: `action_dim` leading ones, zeros after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityMask {
    bits: Vec<f32>,
}

impl ValidityMask {
    pub fn new(bits: Vec<f32>) -> Self {
        debug_assert!(bits.iter().all(|&b| b == 0.0 || b == 1.0));
        ValidityMask { bits }
    }

    pub fn bits(&self) -> &[f32] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1.0).count()
    }

    pub fn is_valid(&self, dim: usize) -> bool {
        self.bits[dim] == 1.0
    }
}

/// Unified dimensions are the elementwise maxima over the active specs.
pub fn unified_dims(specs: &[EmbodimentSpec]) -> Result<(usize, usize), AlignError> {
    if specs.is_empty() {
        return Err(AlignError::EmptySpecs);
    }
    let obs = specs.iter().map(|s| s.obs_dim).max().unwrap();
    let act = specs.iter().map(|s| s.action_dim).max().unwrap();
    Ok((obs, act))
}

/// Copy `vec` into the leading entries of a zero vector of length `target`.
pub fn pad(vec: &[f32], target: usize) -> Result<Vec<f32>, AlignError> {
    if vec.len() > target {
        return Err(AlignError::PadOverflow { got: vec.len(), target });
    }
    let mut out = vec![0.0; target];
    out[..vec.len()].copy_from_slice(vec);
    Ok(out)
}

/// Inverse of [`pad`]: the leading `native_dim` entries.
pub fn unpad(vec: &[f32], native_dim: usize) -> Vec<f32> {
    vec[..native_dim].to_vec()
}

pub fn make_mask(spec: &EmbodimentSpec, unified_action_dim: usize) -> Result<ValidityMask, AlignError> {
    if spec.action_dim > unified_action_dim {
        return Err(AlignError::PadOverflow { got: spec.action_dim, target: unified_action_dim });
    }
    let mut bits = vec![0.0; unified_action_dim];
    for b in bits.iter_mut().take(spec.action_dim) {
        *b = 1.0;
    }
    Ok(ValidityMask::new(bits))
}

/// One training record in the unified spaces. Padded entries are exactly
/// zero; values are raw (pre-normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSample {
    /// H_obs rows of unified_obs_dim, row-major.
    pub obs_window: Vec<f32>,
    /// H_pred rows of unified_action_dim, row-major.
    pub action_chunk: Vec<f32>,
    pub command: Vec<f32>,
    pub embodiment_id: u32,
    pub mask: ValidityMask,
}

/// Per-dimension q05/q95 for one space. Dimensions with q05 == q95 are
/// flagged constant and normalize to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub q05: Vec<f32>,
    pub q95: Vec<f32>,
}

impl DimStats {
    pub fn dim(&self) -> usize {
        self.q05.len()
    }

    pub fn is_constant(&self, i: usize) -> bool {
        self.q05[i] == self.q95[i]
    }
}

/// Normalization statistics for the three unified spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs: DimStats,
    pub action: DimStats,
    pub command: DimStats,
}

/// Minimum sample count per dimension for a stable quantile fit.
pub const MIN_QUANTILE_SAMPLES: usize = 20;

/// Empirical quantile with linear interpolation on the sorted values:
/// index h = q·(n−1), value = s[⌊h⌋] + frac(h)·(s[⌊h⌋+1] − s[⌊h⌋]).
pub fn empirical_quantile(sorted: &[f32], q: f64) -> f32 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = (h - lo as f64) as f32;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn fit_dim_stats(columns: &[Vec<f32>]) -> Result<DimStats, AlignError> {
    let mut q05 = Vec::with_capacity(columns.len());
    let mut q95 = Vec::with_capacity(columns.len());
    for col in columns {
        if col.len() < MIN_QUANTILE_SAMPLES {
            return Err(AlignError::TooFewSamples { need: MIN_QUANTILE_SAMPLES, got: col.len() });
        }
        let mut sorted = col.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in normalization data"));
        q05.push(empirical_quantile(&sorted, 0.05));
        q95.push(empirical_quantile(&sorted, 0.95));
    }
    Ok(DimStats { q05, q95 })
}

/// Merge per-embodiment stats covering the same unified dimension: q05 by
/// min, q95 by max, so no embodiment's range is crushed by another's.
fn merge_dim_stats(parts: Vec<(usize, DimStats)>, unified_dim: usize) -> DimStats {
    let mut q05 = vec![f32::INFINITY; unified_dim];
    let mut q95 = vec![f32::NEG_INFINITY; unified_dim];
    let mut covered = vec![false; unified_dim];
    for (native_dim, stats) in parts {
        for i in 0..native_dim {
            q05[i] = q05[i].min(stats.q05[i]);
            q95[i] = q95[i].max(stats.q95[i]);
            covered[i] = true;
        }
    }
    for i in 0..unified_dim {
        if !covered[i] {
            // No embodiment uses this dimension; treat as constant zero.
            q05[i] = 0.0;
            q95[i] = 0.0;
        }
    }
    DimStats { q05, q95 }
}

/// Fit [`NormStats`] over a dataset of unified samples.
///
/// Quantiles are computed per embodiment over its native (valid) entries
/// only, then merged across embodiments by min/max. Every observation row
/// of the window contributes. Errors if any covered dimension has fewer
/// than [`MIN_QUANTILE_SAMPLES`] values.
pub fn fit_norm_stats(
    samples: &[UnifiedSample],
    specs: &[EmbodimentSpec],
) -> Result<NormStats, AlignError> {
    let (u_obs, u_act) = unified_dims(specs)?;
    let cmd_dim = specs[0].command_dim;

    let mut obs_parts = Vec::new();
    let mut act_parts = Vec::new();
    let mut cmd_parts = Vec::new();
    for spec in specs {
        let mut obs_cols: Vec<Vec<f32>> = vec![Vec::new(); spec.obs_dim];
        let mut act_cols: Vec<Vec<f32>> = vec![Vec::new(); spec.action_dim];
        let mut cmd_cols: Vec<Vec<f32>> = vec![Vec::new(); cmd_dim];
        for s in samples.iter().filter(|s| s.embodiment_id == spec.id) {
            for row in s.obs_window.chunks(u_obs) {
                for (i, col) in obs_cols.iter_mut().enumerate() {
                    col.push(row[i]);
                }
            }
            for row in s.action_chunk.chunks(u_act) {
                for (i, col) in act_cols.iter_mut().enumerate() {
                    col.push(row[i]);
                }
            }
            for (i, col) in cmd_cols.iter_mut().enumerate() {
                col.push(s.command[i]);
            }
        }
        if obs_cols.iter().all(|c| c.is_empty()) {
            continue; // embodiment absent from this dataset
        }
        obs_parts.push((spec.obs_dim, fit_dim_stats(&obs_cols)?));
        act_parts.push((spec.action_dim, fit_dim_stats(&act_cols)?));
        cmd_parts.push((cmd_dim, fit_dim_stats(&cmd_cols)?));
    }
    if obs_parts.is_empty() {
        return Err(AlignError::TooFewSamples { need: MIN_QUANTILE_SAMPLES, got: 0 });
    }
    Ok(NormStats {
        obs: merge_dim_stats(obs_parts, u_obs),
        action: merge_dim_stats(act_parts, u_act),
        command: merge_dim_stats(cmd_parts, cmd_dim),
    })
}

/// x_norm = 2·(x − q05)/(q95 − q05) − 1, no clipping. Constant dims → 0.
pub fn normalize(x: &[f32], stats: &DimStats) -> Result<Vec<f32>, AlignError> {
    if x.len() != stats.dim() {
        return Err(AlignError::DimMismatch { expected: stats.dim(), got: x.len() });
    }
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if stats.is_constant(i) {
                0.0
            } else {
                2.0 * (v - stats.q05[i]) / (stats.q95[i] - stats.q05[i]) - 1.0
            }
        })
        .collect())
}

/// Inverse of [`normalize`]; constant dims recover their constant.
pub fn denormalize(x: &[f32], stats: &DimStats) -> Result<Vec<f32>, AlignError> {
    if x.len() != stats.dim() {
        return Err(AlignError::DimMismatch { expected: stats.dim(), got: x.len() });
    }
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if stats.is_constant(i) {
                stats.q05[i]
            } else {
                (v + 1.0) * 0.5 * (stats.q95[i] - stats.q05[i]) + stats.q05[i]
            }
        })
        .collect())
}

/// Normalize a whole [H, dim] window row by row.
pub fn normalize_rows(window: &[f32], stats: &DimStats) -> Result<Vec<f32>, AlignError> {
    let d = stats.dim();
    if window.len() % d != 0 {
        return Err(AlignError::DimMismatch { expected: d, got: window.len() });
    }
    let mut out = Vec::with_capacity(window.len());
    for row in window.chunks(d) {
        out.extend(normalize(row, stats)?);
    }
    Ok(out)
}

/// Condition vector: flatten(normalized obs window) ++ normalized command.
/// Length = H_obs·unified_obs_dim + command_dim.
pub fn build_condition(
    obs_window: &[f32],
    command: &[f32],
    stats: &NormStats,
) -> Result<Vec<f32>, AlignError> {
    let mut out = normalize_rows(obs_window, &stats.obs)?;
    out.extend(normalize(command, &stats.command)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: u32, obs: usize, act: usize) -> EmbodimentSpec {
        EmbodimentSpec {
            id,
            name: format!("e{id}"),
            obs_dim: obs,
            action_dim: act,
            command_dim: 3,
            privileged_dim: obs + 3,
        }
    }

    #[test]
    fn unified_dims_match_the_four_robot_setup() {
        // 26/28/68/44 obs and 6/8/20/12 act unify to (68, 20).
        let specs = vec![spec(0, 26, 6), spec(1, 28, 8), spec(2, 68, 20), spec(3, 44, 12)];
        assert_eq!(unified_dims(&specs).unwrap(), (68, 20));
    }

    #[test]
    fn unified_dims_edge_cases() {
        assert_eq!(unified_dims(&[spec(0, 5, 2)]).unwrap(), (5, 2));
        let specs = vec![spec(0, 4, 2), spec(1, 4, 3), spec(2, 4, 6)];
        assert_eq!(unified_dims(&specs).unwrap().1, 6);
        assert!(matches!(unified_dims(&[]), Err(AlignError::EmptySpecs)));
    }

    #[test]
    fn pad_definition_and_errors() {
        assert_eq!(pad(&[1.0, 2.0], 4).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(pad(&[1.0, 2.0], 2).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pad(&[], 3).unwrap(), vec![0.0, 0.0, 0.0]);
        assert!(pad(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn pad_unpad_round_trip() {
        let v = vec![0.5, -1.5, 3.25];
        assert_eq!(unpad(&pad(&v, 7).unwrap(), 3), v);
    }

    #[test]
    fn mask_shapes() {
        // 12 of 20 gives twelve ones then eight zeros.
        let m = make_mask(&spec(0, 44, 12), 20).unwrap();
        assert_eq!(m.valid_count(), 12);
        assert!(m.bits()[..12].iter().all(|&b| b == 1.0));
        assert!(m.bits()[12..].iter().all(|&b| b == 0.0));

        let full = make_mask(&spec(0, 4, 3), 3).unwrap();
        assert!(full.bits().iter().all(|&b| b == 1.0));

        assert_eq!(make_mask(&spec(0, 4, 1), 3).unwrap().bits(), &[1.0, 0.0, 0.0]);
        assert!(make_mask(&spec(0, 4, 5), 3).is_err());
    }

    #[test]
    fn quantiles_on_integer_ramp() {
        let vals: Vec<f32> = (0..=100).map(|v| v as f32).collect();
        assert_eq!(empirical_quantile(&vals, 0.05), 5.0);
        assert_eq!(empirical_quantile(&vals, 0.95), 95.0);
    }

    #[test]
    fn normalize_endpoints_midpoint_and_overshoot() {
        let stats = DimStats { q05: vec![5.0], q95: vec![95.0] };
        assert_eq!(normalize(&[5.0], &stats).unwrap()[0], -1.0);
        assert_eq!(normalize(&[95.0], &stats).unwrap()[0], 1.0);
        assert_eq!(normalize(&[50.0], &stats).unwrap()[0], 0.0);
        let over = normalize(&[100.0], &stats).unwrap()[0];
        assert!((over - 1.1111f32).abs() < 1e-4, "got {over}");
    }

    #[test]
    fn constant_dims_normalize_to_zero_and_back() {
        let stats = DimStats { q05: vec![7.0], q95: vec![7.0] };
        assert_eq!(normalize(&[7.0], &stats).unwrap()[0], 0.0);
        assert_eq!(normalize(&[123.0], &stats).unwrap()[0], 0.0);
        assert_eq!(denormalize(&[0.0], &stats).unwrap()[0], 7.0);
    }

    #[test]
    fn condition_length_is_window_times_obs_plus_command() {
        let stats = NormStats {
            obs: DimStats { q05: vec![-1.0; 12], q95: vec![1.0; 12] },
            action: DimStats { q05: vec![-1.0; 6], q95: vec![1.0; 6] },
            command: DimStats { q05: vec![-1.0; 3], q95: vec![1.0; 3] },
        };
        let cond = build_condition(&vec![0.0; 120], &[0.0; 3], &stats).unwrap();
        assert_eq!(cond.len(), 123);
    }

    #[test]
    fn zero_input_condition_hits_formula_value() {
        // x = 0 normalizes to −2·q05/(q95−q05) − 1 per dimension.
        let stats = NormStats {
            obs: DimStats { q05: vec![2.0], q95: vec![6.0] },
            action: DimStats { q05: vec![-1.0], q95: vec![1.0] },
            command: DimStats { q05: vec![-4.0], q95: vec![4.0] },
        };
        let cond = build_condition(&[0.0], &[0.0], &stats).unwrap();
        assert_eq!(cond.len(), 2);
        assert!((cond[0] - (-2.0 * 2.0 / 4.0 - 1.0)).abs() < 1e-6);
        assert!((cond[1] - 0.0).abs() < 1e-6);
    }

    #[test]
    fn fit_rejects_small_datasets() {
        let specs = vec![spec(0, 2, 2)];
        let mask = make_mask(&specs[0], 2).unwrap();
        let samples: Vec<UnifiedSample> = (0..5)
            .map(|i| UnifiedSample {
                obs_window: vec![i as f32; 2],
                action_chunk: vec![i as f32; 2],
                command: vec![0.0; 3],
                embodiment_id: 0,
                mask: mask.clone(),
            })
            .collect();
        assert!(fit_norm_stats(&samples, &specs).is_err());
    }

    #[test]
    fn fit_ignores_padded_action_entries() {
        // One embodiment with 1 valid action dim in a unified width of 2:
        // the padded column must not produce stats from its zeros.
        let specs = vec![spec(0, 2, 1), spec(1, 2, 2)];
        let m0 = make_mask(&specs[0], 2).unwrap();
        let m1 = make_mask(&specs[1], 2).unwrap();
        let mut samples = Vec::new();
        for i in 0..40 {
            let x = i as f32;
            samples.push(UnifiedSample {
                obs_window: vec![x, x],
                action_chunk: vec![x, 0.0],
                command: vec![0.0, 1.0, x],
                embodiment_id: 0,
                mask: m0.clone(),
            });
            samples.push(UnifiedSample {
                obs_window: vec![x, x],
                action_chunk: vec![-x, 100.0 + x],
                command: vec![0.0, 1.0, x],
                embodiment_id: 1,
                mask: m1.clone(),
            });
        }
        let stats = fit_norm_stats(&samples, &specs).unwrap();
        // Dim 1 stats come only from embodiment 1 (values 100..139).
        assert!(stats.action.q05[1] >= 100.0, "q05[1] = {}", stats.action.q05[1]);
        // Dim 0 merges [0..39] and [-39..0].
        assert!(stats.action.q05[0] < 0.0 && stats.action.q95[0] > 0.0);
    }

    #[test]
    fn symmetric_data_has_antisymmetric_quantiles() {
        let mut vals: Vec<f32> = (-50..=50).map(|v| v as f32).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = empirical_quantile(&vals, 0.05);
        let hi = empirical_quantile(&vals, 0.95);
        assert!((lo + hi).abs() < 1e-6);
    }
}
