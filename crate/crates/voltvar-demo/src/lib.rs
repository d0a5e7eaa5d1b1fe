use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub fn placeholder() -> u32 { 1 }
