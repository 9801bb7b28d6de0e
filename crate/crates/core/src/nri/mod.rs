//! Latent interaction graph model over vortex trajectories.
//!
//! The encoder embeds each vortex trajectory, runs two rounds of
//! node-to-edge message passing over the causally allowed pairs, adds a
//! learned projection of the pair energy to the final edge embedding, and
//! scales the two edge-type logits by a learned affine function of severity.
//! Edge types are sampled with the Gumbel-softmax relaxation. The decoder
//! rolls trajectories forward one step at a time: only the interaction edge
//! type carries messages, and the node update predicts a residual for the
//! continuous features plus orientation and existence logits.

mod graph;
mod model;
mod params;

pub use graph::{
    build_causal_mask, compress_energy, fit_energy_stats, pair_energy, CausalMask, EdgeIndex, EnergyStats, Sample,
};
pub use model::{
    build_graph, decode, draw_gumbel, encode, evaluate_loss, loss_and_grad, sample_edges, EdgeMode, ForwardOptions,
    Graph, Predictions, Step,
};
pub use params::{ModelParams, ParamLayout, SliceSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

pub const NO_INTERACTION: usize = 0;
pub const INTERACTION: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Trajectory length T; the node embedding input is `T·8` wide.
    pub timesteps: usize,
    pub edge_types: usize,
    /// Prior over `[no interaction, interaction]`.
    pub prior: [f64; 2],
    pub tau: f64,
    pub output_variance: f64,
    /// Ground truth is fed to the decoder every this many steps.
    pub teacher_forcing: usize,
    pub distance_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            timesteps: 16,
            edge_types: 2,
            prior: [0.7, 0.3],
            tau: 0.5,
            output_variance: 5e-5,
            teacher_forcing: 10,
            distance_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edge_types != 2 {
            return Err(Error::config("exactly two edge types are supported"));
        }
        if self.hidden == 0 || self.timesteps < 2 {
            return Err(Error::config("hidden width must be positive and timesteps >= 2"));
        }
        if (self.prior.iter().sum::<f64>() - 1.0).abs() > 1e-12 || self.prior.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::config("edge prior must be positive and sum to 1"));
        }
        if !(self.tau > 0.0) || !(self.output_variance > 0.0) || !(self.distance_eps > 0.0) {
            return Err(Error::config("tau, output variance and distance guard must be positive"));
        }
        if self.teacher_forcing == 0 {
            return Err(Error::config("teacher forcing period must be at least 1"));
        }
        Ok(())
    }
}

/// Rewirings used by the ablation grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_ordering: bool,
    pub no_physics_gating: bool,
    pub no_severity_conditioning: bool,
    pub original_nri: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        no_ordering: false,
        no_physics_gating: false,
        no_severity_conditioning: false,
        original_nri: false,
    };

    /// The five rows of the ablation table, in order.
    pub fn grid() -> [(&'static str, Ablation); 5] {
        [
            ("None", Ablation::NONE),
            (
                "No ordering",
                Ablation {
                    no_ordering: true,
                    ..Ablation::NONE
                },
            ),
            (
                "No physics gating",
                Ablation {
                    no_physics_gating: true,
                    ..Ablation::NONE
                },
            ),
            (
                "No severity conditioning",
                Ablation {
                    no_severity_conditioning: true,
                    ..Ablation::NONE
                },
            ),
            (
                "Original NRI",
                Ablation {
                    original_nri: true,
                    ..Ablation::NONE
                },
            ),
        ]
    }

    pub fn birth_ordering(&self) -> bool {
        !(self.no_ordering || self.original_nri)
    }

    pub fn physics_gating(&self) -> bool {
        !(self.no_physics_gating || self.original_nri)
    }

    pub fn severity_conditioning(&self) -> bool {
        !(self.no_severity_conditioning || self.original_nri)
    }

    /// Unmasked Gaussian loss over all eight features instead of the mixed
    /// masked loss.
    pub fn plain_loss(&self) -> bool {
        self.original_nri
    }
}

/// A configured model: hyperparameters, rewiring and parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub layout: ParamLayout,
}

impl Model {
    pub fn new(config: ModelConfig, ablation: Ablation) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config, &ablation);
        Ok(Model {
            config,
            ablation,
            layout,
        })
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.layout, seed)
    }
}

/// Per valid ordered pair `sender → receiver`, a categorical distribution
/// over the two edge types.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEdgePosterior {
    pub n: usize,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// `P×2` conditioned logits.
    pub logits: Mat,
    /// `P×2` probabilities.
    pub probs: Mat,
}

impl LatentEdgePosterior {
    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }

    /// Probability of edge type `k` on pair `sender → receiver`, if valid.
    pub fn prob(&self, sender: usize, receiver: usize, k: usize) -> Option<f64> {
        self.senders
            .iter()
            .zip(&self.receivers)
            .position(|(&s, &r)| s == sender && r == receiver)
            .map(|p| self.probs[[p, k]])
    }

    pub fn edge_type_probs(&self, k: usize) -> Vec<f64> {
        self.probs.column(k).to_vec()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_continuous: f64,
    pub rec_orientation: f64,
    pub exist: f64,
    pub kl: f64,
    pub lambda_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rec_continuous, self.rec_orientation, self.exist, self.kl, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.rec_continuous += weight * other.rec_continuous;
        self.rec_orientation += weight * other.rec_orientation;
        self.exist += weight * other.exist;
        self.kl += weight * other.kl;
        self.total += weight * other.total;
        self.lambda_kl = other.lambda_kl;
    }
}
