//! Synthetic vortical channel flow.
//!
//! Lamb-Oseen cores live inside a straight channel whose half-width shrinks
//! with severity. Cores are advected by every other live core and by their
//! mirror images in the two channel walls (one reflection per wall), which
//! is the desingularised point-vortex (Biot-Savart) system integrated with
//! classical RK4. Cores are born by a Poisson process, die after a geometric
//! lifetime or when they leave the grid, and the sampled velocity field can
//! be corrupted with unit-mean multiplicative Rayleigh noise.
//!
//! Narrow channels shed more vortices: the effective birth rate is
//! `birth_rate * confinement^shedding_exponent`, where confinement is the
//! unobstructed half-width divided by the current half-width. With the
//! default exponent of 2 this is Strouhal shedding (`f ~ U / D`) with the jet
//! speed inversely proportional to the opening.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, VelocityField};
use crate::seed;

const STREAM_BIRTH: u64 = 0x6269_7274;
const STREAM_NOISE: u64 = 0x6e6f_6973;
const PLACEMENT_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityConvention {
    /// Severity is the narrowed radius as a percentage of baseline, 30..=100.
    Coa,
    /// Severity is a support level, one of 0, 0.5, 1.
    Lvad,
}

impl SeverityConvention {
    pub fn range(self) -> (f64, f64) {
        match self {
            SeverityConvention::Coa => (30.0, 100.0),
            SeverityConvention::Lvad => (0.0, 1.0),
        }
    }

    /// Severity mapped to `[0, 1]` for the model.
    pub fn normalize(self, severity: f64) -> f64 {
        match self {
            SeverityConvention::Coa => severity / 100.0,
            SeverityConvention::Lvad => severity,
        }
    }

    pub fn clamp(self, severity: f64) -> f64 {
        let (lo, hi) = self.range();
        severity.clamp(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: Grid,
    pub severity: f64,
    pub convention: SeverityConvention,
    pub num_frames: usize,
    pub dt: f64,
    /// RK4 steps per frame interval.
    pub substeps: usize,
    /// Expected births per frame in the unobstructed channel.
    pub birth_rate: f64,
    pub shedding_exponent: f64,
    /// Mean lifetime in frames.
    pub mean_lifetime: f64,
    /// Circulation scale; individual cores draw |Γ| uniformly in [0.7, 1.3]·Γ0.
    pub circulation: f64,
    pub core_radius: f64,
    /// Channel half-width at severity 100 (CoA) or full support (LVAD).
    pub full_half_width: f64,
    pub walls: bool,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: Grid {
                nx: 128,
                ny: 48,
                dx: 0.125,
                dy: 0.125,
                origin: (0.0, -3.0),
            },
            severity: 100.0,
            convention: SeverityConvention::Coa,
            num_frames: 16,
            dt: 0.2,
            substeps: 4,
            birth_rate: 1.0,
            shedding_exponent: 2.0,
            mean_lifetime: 6.0,
            circulation: 1.5,
            core_radius: 0.3,
            full_half_width: 3.0,
            walls: true,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Half-width of the channel at the configured severity. Strictly
    /// increasing in severity under both conventions.
    pub fn channel_half_width(&self) -> f64 {
        match self.convention {
            SeverityConvention::Coa => self.full_half_width * self.severity / 100.0,
            SeverityConvention::Lvad => self.full_half_width * (0.4 + 0.6 * self.severity),
        }
    }

    pub fn confinement(&self) -> f64 {
        self.full_half_width / self.channel_half_width()
    }

    pub fn effective_birth_rate(&self) -> f64 {
        self.birth_rate * self.confinement().powf(self.shedding_exponent)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.num_frames < 2 {
            return Err(Error::config("num_frames must be at least 2"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt must be positive"));
        }
        if self.substeps == 0 {
            return Err(Error::config("substeps must be at least 1"));
        }
        if !(self.birth_rate >= 0.0 && self.birth_rate.is_finite()) {
            return Err(Error::config("birth_rate must be non-negative"));
        }
        if !(self.mean_lifetime >= 1.0 && self.mean_lifetime.is_finite()) {
            return Err(Error::config("mean_lifetime must be at least one frame"));
        }
        if !(self.core_radius > 0.0 && self.core_radius.is_finite()) {
            return Err(Error::config("core_radius must be positive"));
        }
        if !(self.circulation >= 0.0 && self.circulation.is_finite()) {
            return Err(Error::config("circulation must be non-negative"));
        }
        if !self.shedding_exponent.is_finite() {
            return Err(Error::config("shedding_exponent must be finite"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        let (lo, hi) = self.convention.range();
        let valid_severity = match self.convention {
            SeverityConvention::Coa => (lo..=hi).contains(&self.severity),
            SeverityConvention::Lvad => [0.0, 0.5, 1.0].contains(&self.severity),
        };
        if !valid_severity {
            return Err(Error::config(format!(
                "severity {} outside the {:?} convention",
                self.severity, self.convention
            )));
        }
        if self.walls {
            let h = self.channel_half_width();
            if !(self.full_half_width > 0.0) {
                return Err(Error::config("full_half_width must be positive"));
            }
            if h < self.core_radius {
                return Err(Error::config(format!(
                    "channel half-width {h} cannot hold a core of radius {}",
                    self.core_radius
                )));
            }
            if 2.0 * self.full_half_width > self.grid.height() + 1e-12 {
                return Err(Error::config("channel does not fit inside the grid"));
            }
        }
        Ok(())
    }
}

/// Ground-truth record of one synthetic core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVortexState {
    pub id: usize,
    pub circulation: f64,
    pub core_radius: f64,
    pub birth: usize,
    /// Exclusive.
    pub death: usize,
    /// Centre at each frame in `birth..death`.
    pub trajectory: Vec<(f64, f64)>,
}

impl LatentVortexState {
    pub fn center(&self) -> (f64, f64) {
        self.trajectory[0]
    }

    pub fn center_at(&self, frame: usize) -> Option<(f64, f64)> {
        if frame < self.birth || frame >= self.death {
            return None;
        }
        self.trajectory.get(frame - self.birth).copied()
    }

    pub fn is_alive(&self, frame: usize) -> bool {
        self.birth <= frame && frame < self.death
    }
}

/// A core to place at frame 0 that lives for the whole run (unless it leaves
/// the grid).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedVortex {
    pub center: (f64, f64),
    pub circulation: f64,
    pub core_radius: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub fields: Vec<VelocityField>,
    pub vortices: Vec<LatentVortexState>,
}

/// Lamb-Oseen velocity induced at `point` by a core at `center`.
/// Tangential speed is `Γ/(2πd)·(1 − exp(−d²/r_c²))`, counter-clockwise for
/// positive circulation; the removable singularity at `d = 0` gives zero.
pub fn lamb_oseen_velocity(
    center: (f64, f64),
    circulation: f64,
    core_radius: f64,
    point: (f64, f64),
) -> (f64, f64) {
    let rx = point.0 - center.0;
    let ry = point.1 - center.1;
    let d2 = rx * rx + ry * ry;
    if d2 == 0.0 {
        return (0.0, 0.0);
    }
    // u_θ / d, written to stay accurate for d << r_c.
    let a = d2 / (core_radius * core_radius);
    let factor = circulation / (2.0 * PI * d2) * (-(-a).exp_m1());
    (-ry * factor, rx * factor)
}

/// Multiplies every velocity component by an i.i.d. Rayleigh(σ) draw divided
/// by its mean `σ√(π/2)`, so the multiplier has unit mean and a coefficient of
/// variation of `√(4/π − 1)` regardless of σ.
pub fn add_rayleigh_noise(field: &VelocityField, sigma: f64, seed: u64) -> Result<VelocityField> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(field.clone());
    }
    let mut rng = seed::rng(seed, &[STREAM_NOISE]);
    let mut out = field.clone();
    for x in out.u.iter_mut().chain(out.v.iter_mut()) {
        *x *= rayleigh_multiplier(&mut rng, sigma);
    }
    Ok(out)
}

/// One unit-mean Rayleigh multiplier.
pub fn rayleigh_multiplier<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    // 1 - U lies in (0, 1], keeping the log finite.
    let u: f64 = 1.0 - rng.random::<f64>();
    let r = sigma * (-2.0 * u.ln()).sqrt();
    r / (sigma * (PI / 2.0).sqrt())
}

#[derive(Debug, Clone, Copy)]
struct Core {
    pos: (f64, f64),
    circulation: f64,
    core_radius: f64,
}

struct Walls {
    lower: f64,
    upper: f64,
}

impl Walls {
    fn images(&self, c: &Core) -> [Core; 2] {
        [
            Core {
                pos: (c.pos.0, 2.0 * self.upper - c.pos.1),
                circulation: -c.circulation,
                core_radius: c.core_radius,
            },
            Core {
                pos: (c.pos.0, 2.0 * self.lower - c.pos.1),
                circulation: -c.circulation,
                core_radius: c.core_radius,
            },
        ]
    }

    fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

fn induced(cores: &[Core], walls: Option<&Walls>, point: (f64, f64), skip: Option<usize>) -> (f64, f64) {
    let mut u = 0.0;
    let mut v = 0.0;
    for (k, c) in cores.iter().enumerate() {
        if Some(k) != skip {
            let (du, dv) = lamb_oseen_velocity(c.pos, c.circulation, c.core_radius, point);
            u += du;
            v += dv;
        }
        if let Some(w) = walls {
            // A core's own images do advect it.
            for img in w.images(c) {
                let (du, dv) = lamb_oseen_velocity(img.pos, img.circulation, img.core_radius, point);
                u += du;
                v += dv;
            }
        }
    }
    (u, v)
}

fn core_velocities(cores: &[Core], walls: Option<&Walls>) -> Vec<(f64, f64)> {
    (0..cores.len())
        .map(|k| induced(cores, walls, cores[k].pos, Some(k)))
        .collect()
}

fn rk4_step(cores: &mut [Core], walls: Option<&Walls>, h: f64) {
    let base: Vec<(f64, f64)> = cores.iter().map(|c| c.pos).collect();
    let shifted = |cores: &mut [Core], k: &[(f64, f64)], s: f64| {
        for (c, (b, kk)) in cores.iter_mut().zip(base.iter().zip(k)) {
            c.pos = (b.0 + s * kk.0, b.1 + s * kk.1);
        }
    };
    let k1 = core_velocities(cores, walls);
    shifted(cores, &k1, 0.5 * h);
    let k2 = core_velocities(cores, walls);
    shifted(cores, &k2, 0.5 * h);
    let k3 = core_velocities(cores, walls);
    shifted(cores, &k3, h);
    let k4 = core_velocities(cores, walls);
    for (i, c) in cores.iter_mut().enumerate() {
        c.pos = (
            base[i].0 + h / 6.0 * (k1[i].0 + 2.0 * k2[i].0 + 2.0 * k3[i].0 + k4[i].0),
            base[i].1 + h / 6.0 * (k1[i].1 + 2.0 * k2[i].1 + 2.0 * k3[i].1 + k4[i].1),
        );
    }
}

/// Runs the generator with its stationary initial population.
pub fn simulate(config: &SynthConfig) -> Result<Simulation> {
    run(config, None)
}

/// Runs the generator with an explicit set of frame-0 cores in place of the
/// random initial population. Poisson births still follow `birth_rate`.
pub fn simulate_with(config: &SynthConfig, seeded: &[SeedVortex]) -> Result<Simulation> {
    run(config, Some(seeded))
}

fn run(config: &SynthConfig, seeded: Option<&[SeedVortex]>) -> Result<Simulation> {
    config.validate()?;
    let grid = config.grid;
    let t_max = config.num_frames;
    let (_, yc) = grid.midpoint();
    let walls = config.walls.then(|| {
        let h = config.channel_half_width();
        Walls {
            lower: yc - h,
            upper: yc + h,
        }
    });
    let mut rng = seed::rng(config.seed, &[STREAM_BIRTH]);
    let rate = config.effective_birth_rate();
    let lifetime = Geometric::new(1.0 / config.mean_lifetime)
        .map_err(|e| Error::config(format!("lifetime distribution: {e}")))?;

    let rc = config.core_radius;
    let x_range = (grid.origin.0 + rc, grid.origin.0 + grid.width() - rc);
    let y_range = match &walls {
        Some(w) => (w.lower + rc, w.upper - rc),
        None => (grid.origin.1 + rc, grid.origin.1 + grid.height() - rc),
    };

    let mut vortices: Vec<LatentVortexState> = Vec::new();
    // Indices into `vortices` for cores alive at the current frame, in
    // parallel with `cores`.
    let mut live: Vec<usize> = Vec::new();
    let mut cores: Vec<Core> = Vec::new();
    let mut next_sign = 1.0;
    let mut fields = Vec::with_capacity(t_max);

    for t in 0..t_max {
        let n_new = match (t, seeded) {
            (0, Some(_)) => 0,
            (0, None) => draw_poisson(&mut rng, rate * config.mean_lifetime)?,
            _ => draw_poisson(&mut rng, rate)?,
        };
        if t == 0 {
            for s in seeded.unwrap_or(&[]) {
                vortices.push(LatentVortexState {
                    id: vortices.len(),
                    circulation: s.circulation,
                    core_radius: s.core_radius,
                    birth: 0,
                    death: t_max,
                    trajectory: Vec::new(),
                });
                live.push(vortices.len() - 1);
                cores.push(Core {
                    pos: s.center,
                    circulation: s.circulation,
                    core_radius: s.core_radius,
                });
            }
        }
        for _ in 0..n_new {
            let pos = place(&mut rng, x_range, y_range, &cores, 3.0 * rc);
            let magnitude = config.circulation * rng.random_range(0.7..1.3);
            let circulation = next_sign * magnitude;
            next_sign = -next_sign;
            let life = 1 + lifetime.sample(&mut rng) as usize;
            vortices.push(LatentVortexState {
                id: vortices.len(),
                circulation,
                core_radius: rc,
                birth: t,
                death: (t + life).min(t_max),
                trajectory: Vec::new(),
            });
            live.push(vortices.len() - 1);
            cores.push(Core {
                pos,
                circulation,
                core_radius: rc,
            });
        }

        for (&id, c) in live.iter().zip(&cores) {
            vortices[id].trajectory.push(c.pos);
        }
        let mut field = VelocityField::from_fn(grid, |x, y| match &walls {
            Some(w) if !w.contains(y) => (0.0, 0.0),
            _ => induced(&cores, walls.as_ref(), (x, y), None),
        });
        if config.noise_sigma > 0.0 {
            field = add_rayleigh_noise(&field, config.noise_sigma, seed::derive(config.seed, &[t as u64]))?;
        }
        fields.push(field);

        if t + 1 == t_max {
            break;
        }
        let h = config.dt / config.substeps as f64;
        for _ in 0..config.substeps {
            rk4_step(&mut cores, walls.as_ref(), h);
        }
        // Retire cores that reached their death frame or left the grid.
        let x_lo = grid.origin.0;
        let x_hi = grid.origin.0 + grid.width();
        let mut k = 0;
        while k < live.len() {
            let id = live[k];
            let exited = !(x_lo..=x_hi).contains(&cores[k].pos.0) || !cores[k].pos.1.is_finite();
            if vortices[id].death <= t + 1 || exited {
                vortices[id].death = t + 1;
                live.remove(k);
                cores.remove(k);
            } else {
                k += 1;
            }
        }
    }
    Ok(Simulation { fields, vortices })
}

/// A grid of generator runs: every severity level crossed with every noise
/// level, `replicates` times, each with its own derived seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub base: SynthConfig,
    pub severity_levels: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepItem {
    pub id: String,
    pub config: SynthConfig,
}

impl Sweep {
    /// Items in generation order. Ids start with the item index so that
    /// sorting by name preserves that order.
    pub fn items(&self) -> Result<Vec<SweepItem>> {
        if self.severity_levels.is_empty() || self.noise_levels.is_empty() || self.replicates == 0 {
            return Err(Error::config("sweep needs at least one severity, one noise level and one replicate"));
        }
        let mut items = Vec::new();
        for (si, &severity) in self.severity_levels.iter().enumerate() {
            for (ni, &noise_sigma) in self.noise_levels.iter().enumerate() {
                for r in 0..self.replicates {
                    let config = SynthConfig {
                        severity,
                        noise_sigma,
                        seed: seed::derive(self.seed, &[si as u64, ni as u64, r as u64]),
                        ..self.base.clone()
                    };
                    config.validate()?;
                    items.push(SweepItem {
                        id: format!("{:03}_s{}_n{}_r{}", items.len(), severity, noise_sigma, r),
                        config,
                    });
                }
            }
        }
        Ok(items)
    }
}

fn draw_poisson<R: Rng>(rng: &mut R, mean: f64) -> Result<usize> {
    if mean <= 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean).map_err(|e| Error::config(format!("birth process: {e}")))?;
    Ok(d.sample(rng) as usize)
}

/// Uniform placement with rejection of spots closer than `min_gap` to a live
/// core; after a bounded number of attempts the last draw is kept.
fn place<R: Rng>(
    rng: &mut R,
    x_range: (f64, f64),
    y_range: (f64, f64),
    cores: &[Core],
    min_gap: f64,
) -> (f64, f64) {
    let mut pos = (0.0, 0.0);
    for _ in 0..PLACEMENT_ATTEMPTS {
        pos = (
            rng.random_range(x_range.0..=x_range.1),
            rng.random_range(y_range.0..=y_range.1),
        );
        let clear = cores.iter().all(|c| {
            let dx = c.pos.0 - pos.0;
            let dy = c.pos.1 - pos.1;
            dx * dx + dy * dy >= min_gap * min_gap
        });
        if clear {
            break;
        }
    }
    pos
}
