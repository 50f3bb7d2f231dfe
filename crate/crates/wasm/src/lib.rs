//! WebAssembly bindings for the browser demo in `www/`. Every export returns
//! a JSON string.

// `!(x > 0.0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demo;

use std::sync::OnceLock;

use serde::Serialize;
use tdk_core::handmodel::HandModel;
use wasm_bindgen::prelude::*;

fn model() -> &'static HandModel {
    static MODEL: OnceLock<HandModel> = OnceLock::new();
    MODEL.get_or_init(demo::model)
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsError::new(&e))
}

/// Joint names, ranges and rest pose of the built-in hand.
#[wasm_bindgen]
pub fn hand_info() -> Result<String, JsError> {
    to_json(Ok(demo::hand_info(model())))
}

/// Rotation reward term over a range of rates; `direction` is `pos` or `neg`.
#[wasm_bindgen]
pub fn reward_curve(direction: &str, lo: f64, hi: f64, n: usize) -> Result<String, JsError> {
    to_json(demo::reward_curve(direction, lo, hi, n))
}

/// Link segments, fingertips and tendon lengths at joint angles `q`.
#[wasm_bindgen]
pub fn hand_pose(q: &[f64]) -> Result<String, JsError> {
    to_json(demo::hand_pose(model(), q))
}

/// EKF tracking of a sinusoidal joint trajectory from noisy tendon lengths.
#[wasm_bindgen]
pub fn ekf_demo(sigma: f64, q_vel: f64, seconds: f64, joint: usize, seed: u64) -> Result<String, JsError> {
    to_json(demo::ekf_demo(model(), sigma, q_vel, seconds, joint, seed))
}
