//! Named slices of the flat parameter vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::seed;
use crate::tape::Mat;
use crate::track::NUM_FEATURES;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl SliceSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub slices: Vec<SliceSpec>,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig, ablation: &Ablation) -> Self {
        let h = config.hidden;
        let ne = config.edge_types;
        let f = NUM_FEATURES;
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
            shapes.push((format!("{name}.w"), fan_in, fan_out));
            shapes.push((format!("{name}.b"), 1, fan_out));
        };
        linear("enc.node.fc1", config.timesteps * f, h);
        linear("enc.node.fc2", h, h);
        linear("enc.edge1.fc1", 2 * h, h);
        linear("enc.edge1.fc2", h, h);
        linear("enc.node2.fc1", h, h);
        linear("enc.node2.fc2", h, h);
        linear("enc.edge2.fc1", 3 * h, h);
        linear("enc.edge2.fc2", h, h);
        linear("enc.out", h, ne);
        if ablation.physics_gating() {
            linear("g_e", 1, h);
        }
        if ablation.severity_conditioning() {
            linear("g_s", 1, ne);
        }
        linear("dec.msg.fc1", 2 * f, h);
        linear("dec.msg.fc2", h, h);
        linear("dec.out.fc1", f + h, h);
        linear("dec.out.fc2", h, h);
        linear("dec.out.fc3", h, f);

        let mut offset = 0;
        let slices = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let s = SliceSpec {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += s.len();
                s
            })
            .collect();
        ParamLayout { slices }
    }

    pub fn len(&self) -> usize {
        self.slices.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&SliceSpec> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.get(name).is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

impl ModelParams {
    /// Xavier-normal weights, 0.1 biases, the neutral conditioning head
    /// `g_s(s) = 0·s + 1`, and a zero message output layer so the decoder
    /// starts from independent per-vortex dynamics.
    pub fn init(layout: &ParamLayout, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, &[0x696e_6974]);
        let mut values = vec![0.0; layout.len()];
        for s in &layout.slices {
            let dst = &mut values[s.range()];
            if s.name.starts_with("dec.msg.fc2") {
                dst.fill(0.0);
            } else if s.name.starts_with("g_s") {
                let v = if s.name.ends_with(".b") { 1.0 } else { 0.0 };
                dst.fill(v);
            } else if s.name.ends_with(".b") {
                let v = if s.name.starts_with("g_e") { 0.0 } else { 0.1 };
                dst.fill(v);
            } else {
                let std = (2.0 / (s.rows + s.cols) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                for x in dst.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        ModelParams { values }
    }

    pub fn zeros(layout: &ParamLayout) -> Self {
        ModelParams {
            values: vec![0.0; layout.len()],
        }
    }

    pub fn slice(&self, spec: &SliceSpec) -> &[f64] {
        &self.values[spec.range()]
    }

    pub fn slice_mut(&mut self, spec: &SliceSpec) -> &mut [f64] {
        &mut self.values[spec.range()]
    }

    pub fn matrix(&self, spec: &SliceSpec) -> Mat {
        Mat::from_shape_vec((spec.rows, spec.cols), self.slice(spec).to_vec()).expect("slice shape")
    }

    pub fn validate(&self, layout: &ParamLayout) -> Result<()> {
        if self.values.len() != layout.len() {
            return Err(Error::input(format!(
                "parameter vector has {} entries, layout expects {}",
                self.values.len(),
                layout.len()
            )));
        }
        if let Some(k) = self.values.iter().position(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("non-finite parameter at index {k}")));
        }
        Ok(())
    }

    /// Adds `N(0, scale²)` noise to every entry; used to leave the
    /// initialisation contract in tests.
    pub fn perturb<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        for x in &mut self.values {
            *x += normal.sample(rng);
        }
    }
}
