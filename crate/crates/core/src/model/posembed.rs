use ndarray::Array2;

use crate::error::{Error, Result};

/// Fixed 2-D sinusoidal table for a row-major `rows × cols` grid.
///
/// The first half of each vector encodes the grid row, the second half the
/// grid column; each half is `[sin(p * w_k)..., cos(p * w_k)...]` with
/// `w_k = 10000^(-k / (dim / 4))`.
pub fn sincos_2d(dim: usize, grid: (usize, usize)) -> Result<Array2<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(
            "embed_dim",
            format!("positional embedding width {dim} must be a positive multiple of 4"),
        ));
    }
    let (rows, cols) = grid;
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut table = Array2::zeros((rows * cols, dim));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = table.row_mut(r * cols + c);
            for (k, w) in freqs.iter().enumerate() {
                row[k] = (r as f64 * w).sin();
                row[quarter + k] = (r as f64 * w).cos();
                row[2 * quarter + k] = (c as f64 * w).sin();
                row[3 * quarter + k] = (c as f64 * w).cos();
            }
        }
    }
    Ok(table)
}
