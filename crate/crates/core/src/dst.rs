//! Type-I discrete sine transform through a complex FFT of length `2(n+1)`.

use std::sync::Arc;

use ndarray::parallel::prelude::*;
use ndarray::{Array3, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub(crate) struct Dst1 {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Dst1 {
    pub fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(2 * (n + 1));
        Self { n, fft }
    }

    /// Unnormalized forward transform `X_k = sum_j x_j sin(pi k j / (n+1))`,
    /// `j, k = 1..=n`. Applying it twice multiplies by `(n+1)/2`.
    pub fn apply(&self, data: &mut [f64], buf: &mut Vec<Complex64>) {
        let n = self.n;
        debug_assert_eq!(data.len(), n);
        let m = 2 * (n + 1);
        buf.clear();
        buf.resize(m, Complex64::new(0.0, 0.0));
        for j in 0..n {
            buf[j + 1].re = data[j];
            buf[m - 1 - j].re = -data[j];
        }
        self.fft.process(buf);
        for k in 0..n {
            data[k] = -0.5 * buf[k + 1].im;
        }
    }
}

/// Applies the DST-I along `axis` of `a` (every lane independently).
pub(crate) fn dst_along(a: &mut Array3<f64>, axis: usize, plan: &Dst1) {
    // Parallelize over a second axis; transform lanes of each 2D slab.
    let (outer, inner) = if axis == 0 { (1, 0) } else { (0, axis - 1) };
    a.axis_iter_mut(Axis(outer)).into_par_iter().for_each_init(
        || (Vec::new(), Vec::new()),
        |(line, buf), mut slab| {
            for mut lane in slab.lanes_mut(Axis(inner)) {
                line.clear();
                line.extend(lane.iter().copied());
                plan.apply(line, buf);
                for (dst, src) in lane.iter_mut().zip(line.iter()) {
                    *dst = *src;
                }
            }
        },
    );
}
