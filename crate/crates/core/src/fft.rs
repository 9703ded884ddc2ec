//! 3D FFTs over x-fastest grids, plus k-space coordinate helpers.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::volume::{voxel_count, Dims};

/// Cached forward/inverse plans for one grid shape.
pub struct Fft3 {
    dims: Dims,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
    scratch: Vec<Complex64>,
    line: Vec<Complex64>,
}

impl Fft3 {
    pub fn new(dims: Dims) -> Self {
        let mut planner = FftPlanner::new();
        let forward = dims.map(|n| planner.plan_fft_forward(n));
        let inverse = dims.map(|n| planner.plan_fft_inverse(n));
        let scratch_len = forward
            .iter()
            .chain(&inverse)
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            dims,
            forward,
            inverse,
            scratch: vec![Complex64::default(); scratch_len],
            line: vec![Complex64::default(); *dims.iter().max().unwrap()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    /// Inverse transform including the 1/N normalization.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.transform(data, true);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn transform(&mut self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.len(), "FFT buffer does not match grid");
        let [nx, ny, nz] = self.dims;
        let plans = if inverse { &self.inverse } else { &self.forward };

        if nx > 1 {
            for row in data.chunks_exact_mut(nx) {
                plans[0].process_with_scratch(row, &mut self.scratch);
            }
        }
        if ny > 1 {
            let line = &mut self.line[..ny];
            for k in 0..nz {
                let plane = &mut data[k * nx * ny..(k + 1) * nx * ny];
                for i in 0..nx {
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = plane[i + nx * j];
                    }
                    plans[1].process_with_scratch(line, &mut self.scratch);
                    for (j, v) in line.iter().enumerate() {
                        plane[i + nx * j] = *v;
                    }
                }
            }
        }
        if nz > 1 {
            let stride = nx * ny;
            let line = &mut self.line[..nz];
            for ij in 0..stride {
                for (k, v) in line.iter_mut().enumerate() {
                    *v = data[ij + stride * k];
                }
                plans[2].process_with_scratch(line, &mut self.scratch);
                for (k, v) in line.iter().enumerate() {
                    data[ij + stride * k] = *v;
                }
            }
        }
    }

    /// Applies a real k-space multiplier to a real field: IFFT(m · FFT(x)).
    pub fn convolve_real(&mut self, input: &[f64], multiplier: &[f64]) -> Vec<f64> {
        let mut buf = to_complex(input);
        self.forward(&mut buf);
        for (v, &m) in buf.iter_mut().zip(multiplier) {
            *v *= m;
        }
        self.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}

pub fn to_complex(values: &[f64]) -> Vec<Complex64> {
    values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Frequencies (cycles per sample) in FFT order, as numpy's `fftfreq`.
pub fn fftfreq(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (0..n)
        .map(|i| {
            if i < n.div_ceil(2) {
                i as f64 / nf
            } else {
                (i as f64 - nf) / nf
            }
        })
        .collect()
}

/// k-space coordinates in cycles/mm along each axis.
pub fn kspace_axes(dims: Dims, voxel_size_mm: [f64; 3]) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|a| {
        fftfreq(dims[a])
            .into_iter()
            .map(|f| f / voxel_size_mm[a])
            .collect()
    })
}

/// Continuous Laplacian symbol −(2π)²|k|² on the FFT grid.
pub fn laplacian_symbol(dims: Dims, voxel_size_mm: [f64; 3]) -> Vec<f64> {
    let [kx, ky, kz] = kspace_axes(dims, voxel_size_mm);
    let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    let mut out = Vec::with_capacity(voxel_count(dims));
    for z in &kz {
        for y in &ky {
            for x in &kx {
                out.push(-four_pi2 * (x * x + y * y + z * z));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(data: &[Complex64], dims: Dims) -> Vec<Complex64> {
        let n = voxel_count(dims);
        let mut out = vec![Complex64::default(); n];
        let tau = 2.0 * std::f64::consts::PI;
        for (o, slot) in out.iter_mut().enumerate() {
            let [u, v, w] = crate::volume::unravel(dims, o);
            for (idx, &x) in data.iter().enumerate() {
                let [i, j, k] = crate::volume::unravel(dims, idx);
                let phase = -tau
                    * ((u * i) as f64 / dims[0] as f64
                        + (v * j) as f64 / dims[1] as f64
                        + (w * k) as f64 / dims[2] as f64);
                *slot += x * Complex64::from_polar(1.0, phase);
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        let dims = [4, 3, 5];
        let data: Vec<Complex64> = (0..60)
            .map(|i| Complex64::new((i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()))
            .collect();
        let mut fast = data.clone();
        Fft3::new(dims).forward(&mut fast);
        for (a, b) in fast.iter().zip(naive_dft(&data, dims)) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let dims = [6, 4, 2];
        let data: Vec<Complex64> = (0..48).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        let mut buf = data.clone();
        let mut fft = Fft3::new(dims);
        fft.forward(&mut buf);
        fft.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&data) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn fftfreq_matches_numpy() {
        assert_eq!(fftfreq(4), vec![0.0, 0.25, -0.5, -0.25]);
        assert_eq!(fftfreq(5), vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    }
}
