//! WebAssembly bindings for the static demo page in `www/`.

pub mod ops;

use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js<T: Serialize>(r: isolayer::Result<T>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn fit_target(target: &str, n: usize, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(ops::fit_target(target, n, epochs, seed.into()))
}

#[wasm_bindgen]
pub fn position_curves(positions: usize, n: usize, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(ops::position_curves(positions, n, epochs, seed.into()))
}

#[wasm_bindgen]
pub fn random_layer(seed: u32) -> Result<String, JsError> {
    to_js(ops::random_layer(seed.into()))
}
