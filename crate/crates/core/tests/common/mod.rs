#![allow(dead_code)]

use motion_intent::model::{Model, ModelConfig};
use motion_intent::scene::{normalize_scene, NormalizedScene, Scenario, SceneConfig};
use motion_intent::synth::{generate_scenario, GeneratorConfig};
use motion_intent::tensor::ParameterStore;

pub const SHORT_HORIZON: usize = 8;

pub fn short_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        future_steps: SHORT_HORIZON,
        ..GeneratorConfig::default()
    }
}

pub fn scenario(seed: u64, index: usize) -> Scenario {
    generate_scenario(&short_generator(seed), index).unwrap().0
}

pub fn crowded_scenario(seed: u64, agents: usize) -> Scenario {
    let cfg = GeneratorConfig {
        min_agents: agents,
        max_agents: agents,
        ..short_generator(seed)
    };
    generate_scenario(&cfg, 0).unwrap().0
}

pub fn normalized(s: &Scenario) -> NormalizedScene {
    normalize_scene(s, &SceneConfig::default()).unwrap()
}

pub fn tiny_model(seed: u64) -> (Model, ParameterStore) {
    Model::new(ModelConfig::tiny(SHORT_HORIZON), seed).unwrap()
}
