//! Browser bindings: DCT sampling masks, a small unrolled reconstruction with
//! its per-step PSNR curve, and loss weights per step.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: demun::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `k * k` bytes, 1 where the DCT coefficient is measured.
#[wasm_bindgen]
pub fn sampling_mask(k: usize, rate: f64, seed: u32) -> Result<Vec<u8>, JsError> {
    demo::sampling_mask(k, rate, seed as u64).map_err(js)
}

/// Per-step weights of a loss id (`ll`, `iw:<omega>`, `skip:<L>`).
#[wasm_bindgen]
pub fn loss_weights(loss: &str, steps: usize) -> Result<Vec<f64>, JsError> {
    demo::loss_weights(loss, steps).map_err(js)
}

#[wasm_bindgen]
pub struct Reconstruction(demo::Reconstruction);

#[wasm_bindgen]
impl Reconstruction {
    pub fn k(&self) -> usize {
        self.0.k
    }

    pub fn original(&self) -> Vec<f64> {
        self.0.original.clone()
    }

    pub fn adjoint(&self) -> Vec<f64> {
        self.0.adjoint.clone()
    }

    pub fn min_norm(&self) -> Vec<f64> {
        self.0.min_norm.clone()
    }

    /// Estimate after projection `step` (1-based).
    pub fn estimate(&self, step: usize) -> Vec<f64> {
        self.0.estimates[step.clamp(1, self.0.estimates.len()) - 1].clone()
    }

    pub fn curve(&self) -> Vec<f64> {
        self.0.curve.clone()
    }

    pub fn adjoint_psnr(&self) -> f64 {
        self.0.adjoint_psnr
    }

    pub fn min_norm_psnr(&self) -> f64 {
        self.0.min_norm_psnr
    }
}

/// Measures a generated `k x k` scene and runs an untrained unrolled network
/// whose projectors output zero, i.e. the plain gradient updates.
#[wasm_bindgen]
pub fn reconstruct(
    algorithm: &str,
    operator: &str,
    k: usize,
    rate: f64,
    steps: usize,
    sigma: f64,
    seed: u32,
) -> Result<Reconstruction, JsError> {
    let params = demo::Params {
        algorithm: algorithm.parse().map_err(js)?,
        operator: operator.parse().map_err(js)?,
        k,
        rate,
        steps,
        sigma,
        seed: seed as u64,
    };
    demo::reconstruct(&params).map(Reconstruction).map_err(js)
}
