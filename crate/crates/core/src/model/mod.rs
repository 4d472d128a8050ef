//! The full predictor: scene encoder, pruning heads and trajectory decoder.

pub mod decoder;
pub mod encoder;
pub mod heads;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scene::{NormalizedScene, Point, AGENT_FEATURES, POINT_FEATURES, RELATIVE_FEATURES};
use crate::tensor::{Checkpoint, ParameterStore, Tape};

pub use decoder::{DecoderSettings, LayerVars, Pruning, Selection, TrajectoryDecoder};
pub use encoder::{EncodedVars, EncoderInputs, SceneEncoder};
pub use heads::{select_top, utility_psi};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub kernel_sizes: Vec<usize>,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub knn_k: usize,
    pub dropout: f64,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_hidden: usize,
    /// Hidden width of the intention / occupancy output MLPs.
    pub head_hidden: usize,
    pub num_modes: usize,
    pub top_m: usize,
    pub top_n: usize,
    pub future_steps: usize,
    /// Multiplier on predicted means, so unit-scale outputs cover metres.
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-width configuration.
    pub fn full() -> Self {
        Self {
            d_model: 256,
            kernel_sizes: vec![1, 3, 5],
            encoder_layers: 6,
            encoder_heads: 8,
            knn_k: 16,
            dropout: 0.1,
            decoder_layers: 6,
            decoder_heads: 8,
            decoder_hidden: 512,
            head_hidden: 256,
            num_modes: 6,
            top_m: 24,
            top_n: 192,
            future_steps: 80,
            output_scale: 1.0,
        }
    }

    /// Reduced model for desk-scale training.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            dropout: 0.0,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_hidden: 128,
            head_hidden: 64,
            output_scale: 10.0,
            ..Self::full()
        }
    }

    /// Very small widths for finite-difference checks.
    pub fn tiny(future_steps: usize) -> Self {
        Self {
            d_model: 8,
            kernel_sizes: vec![1, 3],
            encoder_layers: 1,
            encoder_heads: 2,
            knn_k: 4,
            dropout: 0.0,
            decoder_layers: 2,
            decoder_heads: 2,
            decoder_hidden: 8,
            head_hidden: 8,
            num_modes: 2,
            top_m: 24,
            top_n: 192,
            future_steps,
            output_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        ensure!(d > 0 && d % 4 == 0, Config, "d_model must be a positive multiple of 4, got {d}");
        ensure!(
            self.encoder_heads > 0 && d % self.encoder_heads == 0,
            Config,
            "d_model {d} not divisible by encoder_heads {}",
            self.encoder_heads
        );
        ensure!(
            self.decoder_heads > 0 && d % self.decoder_heads == 0,
            Config,
            "d_model {d} not divisible by decoder_heads {}",
            self.decoder_heads
        );
        ensure!(
            self.decoder_hidden % self.decoder_heads == 0,
            Config,
            "decoder_hidden {} not divisible by decoder_heads {}",
            self.decoder_hidden,
            self.decoder_heads
        );
        ensure!(!self.kernel_sizes.is_empty(), Config, "kernel_sizes is empty");
        ensure!(
            self.kernel_sizes.iter().all(|k| k % 2 == 1),
            Config,
            "kernel sizes must be odd: {:?}",
            self.kernel_sizes
        );
        ensure!(self.knn_k >= 1, Config, "knn_k must be at least 1");
        ensure!(self.num_modes >= 1, Config, "num_modes must be at least 1");
        ensure!(self.top_m >= 1 && self.top_n >= 1, Config, "top_m and top_n must be at least 1");
        ensure!(self.decoder_layers >= 1, Config, "decoder_layers must be at least 1");
        ensure!(self.future_steps >= 1, Config, "future_steps must be at least 1");
        ensure!(self.decoder_hidden >= 1 && self.head_hidden >= 1, Config, "hidden widths must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout must be in [0, 1)");
        ensure!(self.output_scale > 0.0, Config, "output_scale must be positive");
        Ok(())
    }

    pub fn pruning(&self) -> Pruning {
        Pruning::TopK {
            agents: self.top_m,
            polylines: self.top_n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: SceneEncoder,
    pub decoder: TrajectoryDecoder,
}

/// Full forward pass on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub encoded: EncodedVars,
    pub layers: Vec<LayerVars>,
}

impl Model {
    /// Builds the model and a freshly initialized store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new(seed);
        let model = Self::declare(config, &mut store)?;
        Ok((model, store))
    }

    /// Builds the model and loads parameters from a checkpoint.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<(Self, ParameterStore)> {
        let (model, mut store) = Self::new(config, ck.seed)?;
        store.load_values_from(&ParameterStore::from_checkpoint(ck)?)?;
        Ok((model, store))
    }

    fn declare(config: ModelConfig, store: &mut ParameterStore) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let encoder = SceneEncoder::new(
            store,
            AGENT_FEATURES,
            POINT_FEATURES,
            RELATIVE_FEATURES,
            c.d_model,
            &c.kernel_sizes,
            c.encoder_layers,
        )?;
        let decoder = TrajectoryDecoder::new(
            store,
            c.d_model,
            c.num_modes,
            c.decoder_layers,
            c.decoder_hidden,
            c.head_hidden,
            c.future_steps,
        )?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn settings(&self, pruning: Pruning) -> DecoderSettings {
        DecoderSettings {
            heads: self.config.decoder_heads,
            future_steps: self.config.future_steps,
            output_scale: self.config.output_scale,
            dropout: self.config.dropout,
            pruning,
        }
    }

    /// Places the scene's arrays on the tape in row layout.
    pub fn inputs<'a>(&self, tape: &mut Tape, scene: &'a NormalizedScene) -> Result<EncoderInputs<'a>> {
        let n_a = scene.num_agents();
        let n_l = scene.num_polylines();
        let n_p = scene.points_per_polyline();
        let t_p = scene.agents.shape()[1];
        ensure!(
            scene.relative.shape()[1] == t_p,
            Dimension,
            "relative movement has {} steps, agents have {t_p}",
            scene.relative.shape()[1]
        );
        Ok(EncoderInputs {
            agents: tape.constant(vec![n_a * t_p, AGENT_FEATURES], scene.agents.values().to_vec())?,
            num_agents: n_a,
            history_steps: t_p,
            polylines: tape.constant(vec![n_l * n_p, POINT_FEATURES], scene.polylines.values().to_vec())?,
            num_polylines: n_l,
            points_per_polyline: n_p,
            point_valid: &scene.point_valid,
            relative: tape.constant(vec![n_l * t_p, RELATIVE_FEATURES], scene.relative.values().to_vec())?,
            agent_positions: &scene.agent_positions,
            polyline_positions: &scene.polyline_centroids,
        })
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, scene: &NormalizedScene) -> Result<EncodedVars> {
        let inp = self.inputs(tape, scene)?;
        let c = &self.config;
        self.encoder
            .forward(tape, store, &inp, c.d_model, c.knn_k, c.encoder_heads, c.dropout)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        scene: &NormalizedScene,
        pruning: Pruning,
    ) -> Result<ForwardVars> {
        let encoded = self.encode(tape, store, scene)?;
        let s = self.settings(pruning);
        let layers = self
            .decoder
            .forward(tape, store, encoded.agents, encoded.map, scene.target_index, &s)?;
        Ok(ForwardVars { encoded, layers })
    }

    /// Evaluation-mode prediction with the configured pruning.
    pub fn predict(&self, store: &ParameterStore, scene: &NormalizedScene) -> Result<Prediction> {
        self.predict_with(store, scene, self.config.pruning())
    }

    pub fn predict_with(&self, store: &ParameterStore, scene: &NormalizedScene, pruning: Pruning) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fv = self.forward(&mut tape, store, scene, pruning)?;
        let layers = fv
            .layers
            .iter()
            .map(|lv| LayerPrediction {
                gmm: tape.value(lv.gmm).to_vec(),
                scores: tape.value(lv.scores).to_vec(),
                intentions: tape.value(lv.intentions).to_vec(),
                occupancy: tape.value(lv.occupancy).to_vec(),
                selection: lv.selection.clone(),
            })
            .collect();
        Ok(Prediction {
            num_modes: self.config.num_modes,
            future_steps: self.config.future_steps,
            num_agents: scene.num_agents(),
            num_polylines: scene.num_polylines(),
            agent_tokens: tape.value(fv.encoded.agents).to_vec(),
            map_tokens: tape.value(fv.encoded.map).to_vec(),
            layers,
        })
    }
}

/// Per-layer outputs as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrediction {
    /// `K * T_f * 5`.
    pub gmm: Vec<f64>,
    /// `K` logits.
    pub scores: Vec<f64>,
    /// `K * N_a * 4`.
    pub intentions: Vec<f64>,
    /// `K * N_l`.
    pub occupancy: Vec<f64>,
    pub selection: Selection,
}

/// Model outputs in the normalized frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub num_modes: usize,
    pub future_steps: usize,
    pub num_agents: usize,
    pub num_polylines: usize,
    /// Encoder agent tokens `N_a * D`.
    pub agent_tokens: Vec<f64>,
    /// Encoder map tokens `N_l * D`.
    pub map_tokens: Vec<f64>,
    pub layers: Vec<LayerPrediction>,
}

impl Prediction {
    pub fn final_layer(&self) -> &LayerPrediction {
        self.layers.last().expect("at least one decoder layer")
    }

    /// Mean trajectory of mode `k` from the final layer.
    pub fn means(&self, k: usize) -> Vec<Point> {
        let t_f = self.future_steps;
        self.final_layer().gmm[k * t_f * 5..(k + 1) * t_f * 5]
            .chunks(5)
            .map(|r| [r[0], r[1]])
            .collect()
    }

    pub fn all_means(&self) -> Vec<Vec<Point>> {
        (0..self.num_modes).map(|k| self.means(k)).collect()
    }

    /// Final-layer intention probabilities of mode `k`, agent `a`.
    pub fn intention(&self, k: usize, a: usize) -> [f64; 4] {
        let p = &self.final_layer().intentions[(k * self.num_agents + a) * 4..][..4];
        [p[0], p[1], p[2], p[3]]
    }

    pub fn occupancy(&self, k: usize, j: usize) -> f64 {
        self.final_layer().occupancy[k * self.num_polylines + j]
    }

    /// Mode with the highest final score (ties to the lower index).
    pub fn best_mode(&self) -> usize {
        let s = &self.final_layer().scores;
        (0..s.len()).fold(0, |b, k| if s[k] > s[b] { k } else { b })
    }

    /// Largest absolute difference over every output value.
    pub fn max_abs_diff(&self, other: &Prediction) -> f64 {
        let mut m: f64 = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in [(&a.gmm, &b.gmm), (&a.scores, &b.scores), (&a.intentions, &b.intentions), (&a.occupancy, &b.occupancy)] {
                for (u, v) in x.iter().zip(y) {
                    m = m.max((u - v).abs());
                }
            }
        }
        m
    }

    /// Dump with means mapped back to raw coordinates.
    pub fn to_dump(&self, scene: &NormalizedScene) -> PredictionDump {
        let fl = self.final_layer();
        let frame = scene.frame;
        let trajectories = (0..self.num_modes)
            .map(|k| self.means(k).into_iter().map(|p| frame.to_global(p)).collect())
            .collect();
        let t_f = self.future_steps;
        let gmm = (0..self.num_modes)
            .map(|k| {
                fl.gmm[k * t_f * 5..(k + 1) * t_f * 5]
                    .chunks(5)
                    .map(|r| [r[0], r[1], r[2], r[3], r[4]])
                    .collect()
            })
            .collect();
        PredictionDump {
            frame,
            trajectories,
            gmm,
            scores: fl.scores.clone(),
            intentions: (0..self.num_modes)
                .map(|k| (0..self.num_agents).map(|a| self.intention(k, a)).collect())
                .collect(),
            occupancy: (0..self.num_modes)
                .map(|k| (0..self.num_polylines).map(|j| self.occupancy(k, j)).collect())
                .collect(),
        }
    }
}

/// Per-scenario prediction JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionDump {
    pub frame: crate::scene::Frame,
    /// Raw-frame means `K x T_f x 2`.
    pub trajectories: Vec<Vec<Point>>,
    /// Normalized-frame `(mu_x, mu_y, sigma_x, sigma_y, rho)`, `K x T_f x 5`.
    pub gmm: Vec<Vec<[f64; 5]>>,
    /// Final-layer score logits.
    pub scores: Vec<f64>,
    /// Final-layer intention probabilities `K x N_a x 4`.
    pub intentions: Vec<Vec<[f64; 4]>>,
    /// Final-layer occupancy probabilities `K x N_l`.
    pub occupancy: Vec<Vec<f64>>,
}
