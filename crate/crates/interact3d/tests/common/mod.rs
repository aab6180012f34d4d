#![allow(dead_code)]

use candle_core::{Tensor, Var};
use interact3d::network::{Network, NetworkConfig};
use interact3d::predict::{MANIFEST_SCHEMA, RESPONSE_SCHEMA};
use interact3d::trainer::{batch_loss, prepare};
use interact3d_core::datamodel::{pad_queries, MAX_QUERIES};
use interact3d_core::losses::LossConfig;
use interact3d_core::synthgen::generate_one;
use interact3d_core::{QueryPoint, SceneSample};
use serde_json::Value;

/// A network small enough for quick tests.
pub fn small_config() -> NetworkConfig {
    NetworkConfig {
        input_h: 96,
        input_w: 128,
        embed_dim: 32,
        encoder_depth: 1,
        decoder_depth: 1,
        num_heads: 2,
        mask_res: [24, 32],
        pixel_dim: 16,
        stem_channels: [16, 24],
        fourier_features: 16,
        ..NetworkConfig::toy()
    }
}

pub fn sample(seed: u64, index: usize) -> SceneSample {
    generate_one(seed, index, 128, 96).unwrap().sample
}

fn check(schema: &str, instance: &Value) -> Result<(), String> {
    let schema: Value = serde_json::from_str(schema).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join("; "))
    }
}

pub fn check_response(instance: &Value) -> Result<(), String> {
    check(RESPONSE_SCHEMA, instance)
}

pub fn check_manifest(instance: &Value) -> Result<(), String> {
    check(MANIFEST_SCHEMA, instance)
}

/// Output rows of every per-query head for one image, flattened per slot.
fn slot_outputs(net: &Network, image: &Tensor, points: &Tensor) -> Vec<Vec<f32>> {
    let out = net.forward(image, points).unwrap();
    let n = points.dim(1).unwrap();
    let parts = out.parts();
    (0..n)
        .map(|q| {
            parts[..8]
                .iter()
                .flat_map(|t| t.get(0).unwrap().get(q).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .collect()
        })
        .collect()
}

/// Largest change of any per-query output when six queries are permuted.
pub fn permutation_drift(net: &Network, s: &SceneSample) -> f32 {
    let points: Vec<QueryPoint> = (0..6).map(|i| QueryPoint::new(0.1 + 0.13 * i as f64, 0.8 - 0.1 * i as f64)).collect();
    let image = net.image_tensor(&s.image).unwrap().unsqueeze(0).unwrap();
    let tensor = |pts: &[QueryPoint]| net.points_tensor(&pad_queries(pts).unwrap().0).unwrap().unsqueeze(0).unwrap();
    let base = slot_outputs(net, &image, &tensor(&points));
    let perm = [3, 0, 5, 1, 4, 2];
    let shuffled: Vec<QueryPoint> = perm.iter().map(|&i| points[i]).collect();
    let moved = slot_outputs(net, &image, &tensor(&shuffled));
    perm.iter()
        .enumerate()
        .flat_map(|(slot, &i)| base[i].iter().zip(&moved[slot]).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f32::max)
}

#[derive(Debug)]
pub struct PaddedGradients {
    /// Largest loss gradient on a padded slot's outputs.
    pub padded_output: f32,
    /// Largest gradient of the valid outputs w.r.t. padded point inputs.
    pub padded_input: f32,
    /// Same w.r.t. the valid point inputs, to show the probe is live.
    pub valid_input: f32,
}

fn max_abs(t: &Tensor) -> f32 {
    t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
}

pub fn padded_gradients(net: &Network, s: SceneSample) -> PaddedGradients {
    let pts: Vec<QueryPoint> = s.queries.iter().map(|q| q.point).collect();
    let n = pts.len();
    let slots = MAX_QUERIES;
    let data = prepare(net, vec![s]).unwrap();
    let (_, _, grads) = batch_loss(net, &[&data[0]], &LossConfig::default()).unwrap();
    let padded_output = grads[..8].iter().map(|g| max_abs(&g.narrow(1, n, slots - n).unwrap())).fold(0.0, f32::max);

    let image = net.image_tensor(&data[0].sample.image).unwrap().unsqueeze(0).unwrap();
    let points = Var::from_tensor(&net.points_tensor(&pad_queries(&pts).unwrap().0).unwrap().unsqueeze(0).unwrap()).unwrap();
    let out = net.forward(&image, points.as_tensor()).unwrap();
    let mut surrogate = out.depth.sum_all().unwrap();
    for t in &out.parts()[..8] {
        surrogate = (surrogate + t.narrow(1, 0, n).unwrap().sum_all().unwrap()).unwrap();
    }
    let gs = surrogate.backward().unwrap();
    let g = gs.get(points.as_tensor()).unwrap();
    PaddedGradients {
        padded_output,
        padded_input: max_abs(&g.narrow(1, n, slots - n).unwrap()),
        valid_input: max_abs(&g.narrow(1, 0, n).unwrap()),
    }
}
