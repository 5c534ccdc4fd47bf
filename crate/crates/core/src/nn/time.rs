//! Sinusoidal step embedding.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// `[sin(w_0 t), cos(w_0 t), sin(w_1 t), cos(w_1 t), ...]` as a `[1, dim]`
/// row, with frequencies `w_k` geometric from 1 down to 1e-4.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!(
            "time embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Tensor::zeros(1, dim);
    for k in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            1e-4f64.powf(k as f64 / (half - 1) as f64)
        };
        let arg = freq * t as f64;
        out.data[2 * k] = arg.sin();
        out.data[2 * k + 1] = arg.cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_alternates() {
        let e = sinusoidal_embedding(0, 8).unwrap();
        assert_eq!(e.data, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn distinct_steps_are_separated() {
        let all: Vec<Tensor> = (1..=1000)
            .map(|t| sinusoidal_embedding(t, 16).unwrap())
            .collect();
        let mut min = f64::INFINITY;
        for a in 0..all.len() {
            for b in a + 1..all.len() {
                let d = all[a].zip_map(&all[b], |x, y| x - y).sq_norm().sqrt();
                min = min.min(d);
            }
        }
        assert!(min >= 1e-3, "closest pair {min}");
        assert_eq!(
            sinusoidal_embedding(17, 16).unwrap(),
            sinusoidal_embedding(17, 16).unwrap()
        );
    }

    #[test]
    fn odd_width_rejected() {
        assert!(sinusoidal_embedding(1, 3).is_err());
    }
}
