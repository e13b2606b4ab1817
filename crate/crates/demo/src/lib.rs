//! Browser bindings for the synthetic scene generator and the attention
//! cost model. Compiles natively for tests and to wasm32 for the page in
//! `www/`.

use wasm_bindgen::prelude::*;

/// Placeholder until the scene generator lands.
#[wasm_bindgen]
pub fn demo_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}
