use std::f64::consts::PI;

use crate::error::{ensure, Result};
use crate::geometry::BoxNorm;

/// `[sin(2^k·π·v), cos(2^k·π·v)]` for each coordinate `v` of the box, in
/// coordinate-major then frequency-major order; `8·num_freqs` values.
pub fn fourier_box_embedding(b: &BoxNorm, num_freqs: usize) -> Result<Vec<f64>> {
    ensure!(num_freqs >= 1, Contract, "num_freqs must be at least 1");
    let mut out = Vec::with_capacity(8 * num_freqs);
    for v in b.coords() {
        for k in 0..num_freqs {
            let arg = (1u64 << k) as f64 * PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(out)
}
