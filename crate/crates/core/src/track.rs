//! Frame-to-frame association of detections into tracks and assembly of the
//! zero-padded trajectory tensor.
//!
//! Feature layout per (vortex, timestep):
//! `[x, y, r, ω, CCW, CW, NONE, existence]`.

use serde::{Deserialize, Serialize};

use crate::detect::{detect_sequence, DetectConfig, Orientation, VortexObservation};
use crate::field::VelocityField;
use crate::error::{Error, Result};

pub const NUM_FEATURES: usize = 8;
pub const NUM_CONTINUOUS: usize = 4;
pub const ORIENT_OFFSET: usize = 4;
pub const EXIST_INDEX: usize = 7;
pub const CONTINUOUS_NAMES: [&str; NUM_CONTINUOUS] = ["x", "y", "r", "omega"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VortexTrack {
    pub id: usize,
    pub observations: Vec<VortexObservation>,
}

impl VortexTrack {
    pub fn birth(&self) -> usize {
        self.observations[0].frame
    }

    /// Exclusive.
    pub fn death(&self) -> usize {
        self.observations.last().map_or(0, |o| o.frame + 1)
    }

    pub fn orientation(&self) -> Orientation {
        self.observations[0].orientation
    }

    fn last(&self) -> &VortexObservation {
        self.observations.last().expect("tracks are never empty")
    }
}

/// Greedy overlap association between consecutive frames.
///
/// An observation continues a track that ended on the previous frame when
/// both have the same orientation and their disks overlap
/// (`‖c_a − c_b‖ < r_a + r_b`). Candidate pairs are accepted in order of
/// increasing centre distance; leftovers start new tracks. A track that is
/// not continued is closed for good.
pub fn associate(frames: &[Vec<VortexObservation>]) -> Vec<VortexTrack> {
    let mut tracks: Vec<VortexTrack> = Vec::new();
    let mut open: Vec<usize> = Vec::new();
    for obs in frames {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (slot, &tid) in open.iter().enumerate() {
            let prev = tracks[tid].last();
            for (k, o) in obs.iter().enumerate() {
                if o.orientation != prev.orientation {
                    continue;
                }
                let d = ((o.center.0 - prev.center.0).powi(2) + (o.center.1 - prev.center.1).powi(2)).sqrt();
                if d < o.radius + prev.radius {
                    candidates.push((d, slot, k));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut slot_used = vec![false; open.len()];
        let mut obs_used = vec![false; obs.len()];
        let mut next_open = Vec::new();
        for (_, slot, k) in candidates {
            if slot_used[slot] || obs_used[k] {
                continue;
            }
            slot_used[slot] = true;
            obs_used[k] = true;
            let tid = open[slot];
            tracks[tid].observations.push(obs[k]);
            next_open.push(tid);
        }
        for (k, o) in obs.iter().enumerate() {
            if !obs_used[k] {
                tracks.push(VortexTrack {
                    id: tracks.len(),
                    observations: vec![*o],
                });
                next_open.push(tracks.len() - 1);
            }
        }
        open = next_open;
    }
    tracks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTensor {
    pub n: usize,
    pub t: usize,
    /// Row-major `[n][t][8]`.
    pub features: Vec<f64>,
    /// Row-major `[n][t]`, values 0 or 1.
    pub mask: Vec<u8>,
    pub severity: f64,
    pub noise_sigma: f64,
    /// Birth frame per row; `t` for rows that never exist (padding).
    pub births: Vec<usize>,
}

impl TrajectoryTensor {
    pub fn empty(t: usize, severity: f64, noise_sigma: f64) -> Self {
        TrajectoryTensor {
            n: 0,
            t,
            features: Vec::new(),
            mask: Vec::new(),
            severity,
            noise_sigma,
            births: Vec::new(),
        }
    }

    #[inline]
    pub fn offset(&self, i: usize, t: usize) -> usize {
        (i * self.t + t) * NUM_FEATURES
    }

    #[inline]
    pub fn row(&self, i: usize, t: usize) -> &[f64] {
        let o = self.offset(i, t);
        &self.features[o..o + NUM_FEATURES]
    }

    #[inline]
    pub fn exists(&self, i: usize, t: usize) -> bool {
        self.mask[i * self.t + t] == 1
    }

    /// Rows that exist at least once.
    pub fn is_real(&self, i: usize) -> bool {
        (0..self.t).any(|t| self.exists(i, t))
    }

    /// Appends `count` never-existing rows.
    pub fn pad_to(&mut self, n: usize) {
        while self.n < n {
            for _ in 0..self.t {
                self.features.extend_from_slice(&absent_row());
                self.mask.push(0);
            }
            self.births.push(self.t);
            self.n += 1;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.n * self.t * NUM_FEATURES
            || self.mask.len() != self.n * self.t
            || self.births.len() != self.n
        {
            return Err(Error::input("trajectory tensor shape mismatch"));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::input("trajectory tensor contains non-finite values"));
        }
        for i in 0..self.n {
            for t in 0..self.t {
                let row = self.row(i, t);
                let onehots = row[ORIENT_OFFSET..ORIENT_OFFSET + 3].iter().filter(|&&v| v == 1.0).count();
                if onehots != 1 {
                    return Err(Error::input(format!("row ({i},{t}) must have exactly one orientation class")));
                }
                let e = self.mask[i * self.t + t];
                if e > 1 || row[EXIST_INDEX] != e as f64 {
                    return Err(Error::input(format!("row ({i},{t}) existence disagrees with mask")));
                }
            }
            let first = (0..self.t).find(|&t| self.exists(i, t)).unwrap_or(self.t);
            if first != self.births[i] {
                return Err(Error::input(format!("row {i} birth frame disagrees with mask")));
            }
        }
        if self.births.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::input("rows are not ordered by birth frame"));
        }
        Ok(())
    }
}

fn absent_row() -> [f64; NUM_FEATURES] {
    let mut r = [0.0; NUM_FEATURES];
    r[ORIENT_OFFSET + 2] = 1.0;
    r
}

fn observed_row(o: &VortexObservation) -> [f64; NUM_FEATURES] {
    let mut r = [0.0; NUM_FEATURES];
    r[0] = o.center.0;
    r[1] = o.center.1;
    r[2] = o.radius;
    r[3] = o.vorticity;
    match o.orientation {
        Orientation::Ccw => r[ORIENT_OFFSET] = 1.0,
        Orientation::Cw => r[ORIENT_OFFSET + 1] = 1.0,
    }
    r[EXIST_INDEX] = 1.0;
    r
}

/// Zero-padded tensor with rows sorted by birth frame (stable, so ties keep
/// first-detection order).
pub fn assemble_tensor(tracks: &[VortexTrack], t: usize, severity: f64, noise_sigma: f64) -> Result<TrajectoryTensor> {
    if t == 0 {
        return Err(Error::input("trajectory tensor needs at least one timestep"));
    }
    let mut order: Vec<&VortexTrack> = tracks.iter().collect();
    order.sort_by_key(|tr| tr.birth());
    let mut out = TrajectoryTensor::empty(t, severity, noise_sigma);
    for tr in order {
        if tr.observations.is_empty() {
            continue;
        }
        let mut rows = vec![absent_row(); t];
        let mut mask = vec![0u8; t];
        for o in &tr.observations {
            if o.frame >= t {
                return Err(Error::input(format!("observation frame {} outside T = {t}", o.frame)));
            }
            rows[o.frame] = observed_row(o);
            mask[o.frame] = 1;
        }
        out.features.extend(rows.iter().flatten());
        out.mask.extend(mask);
        out.births.push(tr.birth());
        out.n += 1;
    }
    Ok(out)
}

/// Detection, association and assembly for one field sequence.
pub fn track_sequence(
    fields: &[VelocityField],
    cfg: &DetectConfig,
    severity: f64,
    noise_sigma: f64,
) -> Result<(Vec<VortexTrack>, TrajectoryTensor)> {
    let frames = detect_sequence(fields, cfg)?;
    let tracks = associate(&frames);
    let tensor = assemble_tensor(&tracks, fields.len(), severity, noise_sigma)?;
    Ok((tracks, tensor))
}

/// Per continuous feature `(min, max)` fitted on existing entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub min: [f64; NUM_CONTINUOUS],
    pub max: [f64; NUM_CONTINUOUS],
}

pub fn fit_scaling<'a>(tensors: impl IntoIterator<Item = &'a TrajectoryTensor>) -> Result<ScalingParams> {
    let mut min = [f64::INFINITY; NUM_CONTINUOUS];
    let mut max = [f64::NEG_INFINITY; NUM_CONTINUOUS];
    for tensor in tensors {
        for i in 0..tensor.n {
            for t in 0..tensor.t {
                if !tensor.exists(i, t) {
                    continue;
                }
                let row = tensor.row(i, t);
                for f in 0..NUM_CONTINUOUS {
                    min[f] = min[f].min(row[f]);
                    max[f] = max[f].max(row[f]);
                }
            }
        }
    }
    for f in 0..NUM_CONTINUOUS {
        if !min[f].is_finite() {
            return Err(Error::input("no existing entries to fit feature scaling on"));
        }
        if max[f] <= min[f] {
            return Err(Error::input(format!(
                "feature '{}' is constant ({}) on the training split and cannot be scaled",
                CONTINUOUS_NAMES[f], min[f]
            )));
        }
    }
    Ok(ScalingParams { min, max })
}

impl ScalingParams {
    #[inline]
    pub fn scale(&self, f: usize, x: f64) -> f64 {
        2.0 * (x - self.min[f]) / (self.max[f] - self.min[f]) - 1.0
    }

    #[inline]
    pub fn unscale(&self, f: usize, y: f64) -> f64 {
        (y + 1.0) * 0.5 * (self.max[f] - self.min[f]) + self.min[f]
    }

    /// Maps existing continuous entries to `[-1, 1]` (no clipping); absent
    /// entries stay zero.
    pub fn apply(&self, tensor: &TrajectoryTensor) -> TrajectoryTensor {
        self.map(tensor, |f, x| self.scale(f, x))
    }

    pub fn invert(&self, tensor: &TrajectoryTensor) -> TrajectoryTensor {
        self.map(tensor, |f, y| self.unscale(f, y))
    }

    fn map(&self, tensor: &TrajectoryTensor, g: impl Fn(usize, f64) -> f64) -> TrajectoryTensor {
        let mut out = tensor.clone();
        for i in 0..tensor.n {
            for t in 0..tensor.t {
                let o = tensor.offset(i, t);
                let exists = tensor.exists(i, t);
                for f in 0..NUM_CONTINUOUS {
                    out.features[o + f] = if exists { g(f, tensor.features[o + f]) } else { 0.0 };
                }
            }
        }
        out
    }
}
