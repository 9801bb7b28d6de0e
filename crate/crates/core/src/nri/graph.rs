//! Pair structure and per-simulation model inputs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Ablation;
use crate::error::{Error, Result};
use crate::synth::SeverityConvention;
use crate::tape::Mat;
use crate::track::{ScalingParams, TrajectoryTensor, EXIST_INDEX, NUM_FEATURES};

/// `allowed[j * n + i]` is true when the directed edge `j → i` may carry a
/// relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalMask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl CausalMask {
    /// Every off-diagonal pair among real rows.
    pub fn unordered(real: &[bool]) -> Self {
        let n = real.len();
        let mut allowed = vec![false; n * n];
        for j in 0..n {
            for i in 0..n {
                allowed[j * n + i] = j != i && real[j] && real[i];
            }
        }
        CausalMask { n, allowed }
    }

    /// `j → i` iff `j ≠ i` and `birth(j) ≤ birth(i)`; rows that never exist
    /// take part in no edge.
    pub fn from_births(births: &[usize], real: &[bool]) -> Self {
        let mut m = Self::unordered(real);
        let n = m.n;
        for j in 0..n {
            for i in 0..n {
                if births[j] > births[i] {
                    m.allowed[j * n + i] = false;
                }
            }
        }
        m
    }

    #[inline]
    pub fn allowed(&self, sender: usize, receiver: usize) -> bool {
        self.allowed[sender * self.n + receiver]
    }

    pub fn num_edges(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Valid pairs, grouped by receiver then sender.
    pub fn edges(&self) -> EdgeIndex {
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.allowed(j, i) {
                    senders.push(j);
                    receivers.push(i);
                }
            }
        }
        EdgeIndex {
            senders: Arc::from(senders),
            receivers: Arc::from(receivers),
        }
    }
}

pub fn build_causal_mask(tensor: &TrajectoryTensor) -> CausalMask {
    let real: Vec<bool> = (0..tensor.n).map(|i| tensor.is_real(i)).collect();
    CausalMask::from_births(&tensor.births, &real)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeIndex {
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.senders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }
}

/// Mean over co-existing timesteps of `ω_i r_i² / max(‖x_i − x_j‖, ε)`,
/// computed on physical (unscaled) features. Zero if the pair never
/// co-exists.
pub fn pair_energy(tensor: &TrajectoryTensor, i: usize, j: usize, eps: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..tensor.t {
        if !(tensor.exists(i, t) && tensor.exists(j, t)) {
            continue;
        }
        let a = tensor.row(i, t);
        let b = tensor.row(j, t);
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        total += a[3] * a[2] * a[2] / d.max(eps);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Sign-preserving log compression.
pub fn compress_energy(e: f64) -> f64 {
    e.signum() * e.abs().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for EnergyStats {
    fn default() -> Self {
        EnergyStats { mean: 0.0, std: 1.0 }
    }
}

impl EnergyStats {
    pub fn standardize(&self, e: f64) -> f64 {
        (compress_energy(e) - self.mean) / self.std
    }
}

/// Mean and standard deviation of compressed energies over every ordered
/// pair of real rows in the training tensors. A degenerate spread falls
/// back to 1.
pub fn fit_energy_stats<'a>(tensors: impl IntoIterator<Item = &'a TrajectoryTensor>, eps: f64) -> EnergyStats {
    let mut values = Vec::new();
    for tensor in tensors {
        let mask = CausalMask::unordered(&(0..tensor.n).map(|i| tensor.is_real(i)).collect::<Vec<_>>());
        for j in 0..tensor.n {
            for i in 0..tensor.n {
                if mask.allowed(j, i) {
                    values.push(compress_energy(pair_energy(tensor, j, i, eps)));
                }
            }
        }
    }
    if values.is_empty() {
        return EnergyStats::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    EnergyStats { mean, std }
}

/// Everything the model needs for one simulation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub n: usize,
    pub t: usize,
    /// `n × (t·8)` scaled features, timestep-major within a row.
    pub features: Mat,
    /// `n × t` existence.
    pub exist: Mat,
    pub real: Vec<bool>,
    pub births: Vec<usize>,
    /// Severity raw value and its `[0,1]` normalisation.
    pub severity: f64,
    pub severity_norm: f64,
    pub mask: CausalMask,
    pub edges: EdgeIndex,
    /// `P × 1` standardised energy of each valid pair, sender's strength.
    pub energy: Mat,
}

impl Sample {
    /// `physical` is the unscaled tensor; features are scaled with
    /// `scaling` and energies computed on the physical values.
    pub fn new(
        physical: &TrajectoryTensor,
        scaling: &ScalingParams,
        stats: &EnergyStats,
        convention: SeverityConvention,
        ablation: &Ablation,
        eps: f64,
    ) -> Result<Self> {
        physical.validate()?;
        let scaled = scaling.apply(physical);
        let (n, t) = (physical.n, physical.t);
        let features = Mat::from_shape_vec((n, t * NUM_FEATURES), scaled.features).expect("tensor layout");
        let exist = Mat::from_shape_fn((n, t), |(i, s)| physical.mask[i * t + s] as f64);
        let real: Vec<bool> = (0..n).map(|i| physical.is_real(i)).collect();
        let mask = if ablation.birth_ordering() {
            CausalMask::from_births(&physical.births, &real)
        } else {
            CausalMask::unordered(&real)
        };
        let edges = mask.edges();
        let energy = Mat::from_shape_fn((edges.len(), 1), |(p, _)| {
            stats.standardize(pair_energy(physical, edges.senders[p], edges.receivers[p], eps))
        });
        let severity = physical.severity;
        let severity_norm = convention.normalize(severity);
        if !severity_norm.is_finite() {
            return Err(Error::input("severity is not finite"));
        }
        debug_assert!(features.column(EXIST_INDEX).iter().all(|&e| e == 0.0 || e == 1.0));
        Ok(Sample {
            n,
            t,
            features,
            exist,
            real,
            births: physical.births.clone(),
            severity,
            severity_norm,
            mask,
            edges,
            energy,
        })
    }

    /// Copy with a different severity; data, mask and energies unchanged.
    pub fn with_severity(&self, severity: f64, convention: SeverityConvention) -> Sample {
        let mut s = self.clone();
        s.severity = severity;
        s.severity_norm = convention.normalize(severity);
        s
    }

    pub fn num_real(&self) -> usize {
        self.real.iter().filter(|&&r| r).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn birth_order_example() {
        // births [0,5,3] become [0,3,5] after sorting
        let m = CausalMask::from_births(&[0, 3, 5], &[true; 3]);
        let e = m.edges();
        let pairs: Vec<_> = e.senders.iter().zip(e.receivers.iter()).map(|(&s, &r)| (s + 1, r + 1)).collect();
        assert_eq!(pairs, vec![(1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn equal_births_full_mask() {
        let m = CausalMask::from_births(&[2; 4], &[true; 4]);
        assert_eq!(m.num_edges(), 12);
        assert!((0..4).all(|i| !m.allowed(i, i)));
    }

    #[test]
    fn single_and_padded_rows() {
        assert_eq!(CausalMask::from_births(&[0], &[true]).num_edges(), 0);
        let m = CausalMask::from_births(&[0, 1, 4], &[true, true, false]);
        assert_eq!(m.num_edges(), 1);
        assert!(m.allowed(0, 1));
    }

    #[test]
    fn compression_is_odd() {
        assert_eq!(compress_energy(0.0), 0.0);
        assert!((compress_energy(-3.0) + compress_energy(3.0)).abs() < 1e-15);
        assert!((compress_energy(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
    }
}
