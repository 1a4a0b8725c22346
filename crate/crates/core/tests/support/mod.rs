//! Shared by the integration suites of this crate and by the acceptance
//! target of the command-line crate (included there through `#[path]`).
#![allow(dead_code)]

pub mod fixture;
pub mod oracles;

/// Mean and population variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
