//! Latent-graph entropy markers and their relationship to severity.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::nri::{encode, LatentEdgePosterior, Model, ModelParams, Sample};
use crate::synth::SeverityConvention;

pub const EDGE_TYPE_NAMES: [&str; 2] = ["no_interaction", "interaction"];

/// Shannon entropy of edge-type `k` weights normalised over valid pairs.
pub fn edge_entropy(posterior: &LatentEdgePosterior, k: usize) -> Result<f64> {
    if posterior.num_edges() == 0 {
        return Err(Error::input("entropy needs at least one valid pair"));
    }
    Ok(weight_entropy(posterior.probs.column(k).iter().copied()))
}

/// `−Σ q ln q` with `q = w / Σw`; zero total weight gives 0.
pub fn weight_entropy(weights: impl Iterator<Item = f64> + Clone) -> f64 {
    let total: f64 = weights.clone().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -weights
        .filter(|&w| w > 0.0)
        .map(|w| {
            let q = w / total;
            q * q.ln()
        })
        .sum::<f64>()
}

/// 1-based average ranks.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            out[k] = avg;
        }
        start = end;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman ρ and its two-sided p-value from the t statistic with `n − 2`
/// degrees of freedom. `p` is floored at the smallest positive double.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::input("spearman inputs differ in length"));
    }
    if xs.len() < 3 {
        return Err(Error::input("spearman needs at least three pairs"));
    }
    let rho = pearson(&ranks(xs), &ranks(ys))
        .ok_or_else(|| Error::input("spearman is undefined for constant input"))?;
    let df = (xs.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        2.0 * dist.sf(t.abs())
    };
    Ok((rho, p.clamp(f64::MIN_POSITIVE, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
}

/// Fraction of consecutive severity levels whose mean entropy moves in
/// `direction`; equal means count as inconsistent.
pub fn monotonicity(severities: &[f64], entropies: &[f64], direction: Direction) -> Result<f64> {
    if severities.len() != entropies.len() {
        return Err(Error::input("monotonicity inputs differ in length"));
    }
    let means = level_means(severities, entropies);
    if means.len() < 2 {
        return Err(Error::input("monotonicity needs at least two severity levels"));
    }
    let good = means
        .windows(2)
        .filter(|w| match direction {
            Direction::Increasing => w[1].1 > w[0].1,
            Direction::Decreasing => w[1].1 < w[0].1,
        })
        .count();
    Ok(good as f64 / (means.len() - 1) as f64)
}

/// `(level, mean)` sorted by level.
pub fn level_means(severities: &[f64], values: &[f64]) -> Vec<(f64, f64)> {
    let mut levels: Vec<f64> = severities.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
        .into_iter()
        .map(|l| {
            let group: Vec<f64> = severities
                .iter()
                .zip(values)
                .filter(|(s, _)| **s == l)
                .map(|(_, v)| *v)
                .collect();
            (l, group.iter().sum::<f64>() / group.len() as f64)
        })
        .collect()
}

/// Coefficient of determination of the least-squares line, clamped to
/// `[0, 1]`. Constant `ys` give 0.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::input("r_squared needs at least two paired values"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::input("r_squared is undefined for constant xs"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(0.0);
    }
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok((1.0 - ss_res / ss_tot).clamp(0.0, 1.0))
}

fn entropies(posterior: &LatentEdgePosterior) -> Result<[f64; 2]> {
    Ok([edge_entropy(posterior, 0)?, edge_entropy(posterior, 1)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub severity: f64,
    pub lower: f64,
    pub upper: f64,
    pub h_lower: [f64; 2],
    pub h: [f64; 2],
    pub h_upper: [f64; 2],
}

impl Perturbation {
    /// `H(s + δ) − H(s)` per edge type.
    pub fn delta_up(&self) -> [f64; 2] {
        [self.h_upper[0] - self.h[0], self.h_upper[1] - self.h[1]]
    }

    /// `H(s − δ) − H(s)` per edge type.
    pub fn delta_down(&self) -> [f64; 2] {
        [self.h_lower[0] - self.h[0], self.h_lower[1] - self.h[1]]
    }

    /// Largest absolute entropy change for edge type `k`.
    pub fn magnitude(&self, k: usize) -> f64 {
        self.delta_up()[k].abs().max(self.delta_down()[k].abs())
    }
}

/// Re-encodes `sample` at `s ± δ` (clamped to the convention's range) with
/// the data unchanged.
pub fn perturb_severity(
    model: &Model,
    params: &ModelParams,
    sample: &Sample,
    delta: f64,
    convention: SeverityConvention,
) -> Result<Perturbation> {
    if !model.ablation.severity_conditioning() {
        return Err(Error::config("severity perturbation needs severity conditioning enabled"));
    }
    let s = sample.severity;
    let lower = convention.clamp(s - delta);
    let upper = convention.clamp(s + delta);
    let at = |sev: f64| entropies(&encode(model, params, &sample.with_severity(sev, convention))?);
    Ok(Perturbation {
        severity: s,
        lower,
        upper,
        h_lower: at(lower)?,
        h: at(s)?,
        h_upper: at(upper)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRow {
    pub id: String,
    pub severity: f64,
    pub noise_sigma: f64,
    pub num_edges: usize,
    pub entropy: [f64; 2],
    /// Mean posterior probability of each edge type over valid pairs.
    pub mean_prob: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeTypeStats {
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub monotonicity: Option<f64>,
    pub r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerReport {
    pub rows: Vec<MarkerRow>,
    /// Simulations without any valid pair.
    pub skipped: Vec<String>,
    pub stats: [EdgeTypeStats; 2],
    pub direction: Direction,
    pub delta: Option<f64>,
    pub perturbations: Vec<(String, Perturbation)>,
}

pub struct LabeledSample<'a> {
    pub id: &'a str,
    pub noise_sigma: f64,
    pub sample: &'a Sample,
}

/// Entropies for every simulation, dataset statistics per edge type and,
/// when `delta` is given and conditioning is enabled, the perturbation
/// table.
pub fn marker_report(
    model: &Model,
    params: &ModelParams,
    items: &[LabeledSample],
    direction: Direction,
    delta: Option<f64>,
    convention: SeverityConvention,
) -> Result<MarkerReport> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut perturbations = Vec::new();
    for item in items {
        let post = encode(model, params, item.sample)?;
        if post.num_edges() == 0 {
            skipped.push(item.id.to_string());
            continue;
        }
        let m = post.num_edges() as f64;
        rows.push(MarkerRow {
            id: item.id.to_string(),
            severity: item.sample.severity,
            noise_sigma: item.noise_sigma,
            num_edges: post.num_edges(),
            entropy: entropies(&post)?,
            mean_prob: [post.probs.column(0).sum() / m, post.probs.column(1).sum() / m],
        });
        if let Some(d) = delta {
            if model.ablation.severity_conditioning() {
                perturbations.push((item.id.to_string(), perturb_severity(model, params, item.sample, d, convention)?));
            }
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.severity).collect();
    let stats = [0, 1].map(|k| {
        let ys: Vec<f64> = rows.iter().map(|r| r.entropy[k]).collect();
        let (rho, p) = match spearman(&xs, &ys) {
            Ok((r, p)) => (Some(r), Some(p)),
            Err(_) => (None, None),
        };
        EdgeTypeStats {
            rho,
            p_value: p,
            monotonicity: monotonicity(&xs, &ys, direction).ok(),
            r_squared: r_squared(&xs, &ys).ok(),
        }
    });
    Ok(MarkerReport {
        rows,
        skipped,
        stats,
        direction,
        delta,
        perturbations,
    })
}
