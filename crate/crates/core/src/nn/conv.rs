//! 3D convolution with "same" zero padding, kernel 1 or 3, stride 1.
//!
//! Kernel-3 convolutions are lowered to GEMM over z-slabs of an im2col
//! buffer so that memory stays bounded for whole-volume inference.

use rand::Rng;

use super::param::{Module, Param};
use super::tensor::Tensor;

/// Upper bound on im2col buffer size, in floats.
const COL_BUDGET: usize = 8 << 20;

/// `C = alpha * A * B + beta * C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A view out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B view out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C view out of bounds");
    // SAFETY: every element addressed through the strided views was bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Conv3d {
    /// He-normal initialised convolution.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let k3 = kernel * kernel * kernel;
        let std = (2.0 / (in_channels * k3) as f32).sqrt();
        let weight = Param::normal(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel, kernel],
            std,
            rng,
        );
        let bias = with_bias.then(|| Param::constant(format!("{name}.bias"), vec![out_channels], 0.0));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    fn slab_depth(&self, dims: [usize; 3]) -> usize {
        let per_slice = self.rows() * dims[0] * dims[1];
        (COL_BUDGET / per_slice.max(1)).clamp(1, dims[2])
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_channels, "{}: input channels", self.weight.name);
        let dims = x.dims();
        let n = x.voxels();
        let mut out = Tensor::zeros(self.out_channels, dims);
        if self.kernel == 1 {
            gemm(
                self.out_channels,
                self.in_channels,
                n,
                &self.weight.value,
                (self.in_channels, 1),
                x.data(),
                (n, 1),
                0.0,
                out.data_mut(),
                (n, 1),
            );
        } else {
            let plane = dims[0] * dims[1];
            let rows = self.rows();
            let slab = self.slab_depth(dims);
            let mut col = Vec::new();
            let mut z0 = 0;
            while z0 < dims[2] {
                let z1 = (z0 + slab).min(dims[2]);
                let cols = (z1 - z0) * plane;
                col.resize(rows * cols, 0.0);
                im2col3(x, z0, z1, &mut col);
                gemm(
                    self.out_channels,
                    rows,
                    cols,
                    &self.weight.value,
                    (rows, 1),
                    &col,
                    (cols, 1),
                    0.0,
                    &mut out.data_mut()[z0 * plane..],
                    (n, 1),
                );
                z0 = z1;
            }
        }
        if let Some(bias) = &self.bias {
            for (c, &b) in bias.value.iter().enumerate() {
                out.channel_mut(c).iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let dims = x.dims();
        let n = x.voxels();
        if let Some(bias) = &mut self.bias {
            for (c, g) in bias.grad.iter_mut().enumerate() {
                *g += grad_out.channel(c).iter().sum::<f32>();
            }
        }
        if self.kernel == 1 {
            gemm(
                self.out_channels,
                n,
                self.in_channels,
                grad_out.data(),
                (n, 1),
                x.data(),
                (1, n),
                1.0,
                &mut self.weight.grad,
                (self.in_channels, 1),
            );
            if !need_input_grad {
                return None;
            }
            let mut dx = Tensor::zeros(self.in_channels, dims);
            gemm(
                self.in_channels,
                self.out_channels,
                n,
                &self.weight.value,
                (1, self.in_channels),
                grad_out.data(),
                (n, 1),
                0.0,
                dx.data_mut(),
                (n, 1),
            );
            return Some(dx);
        }

        let plane = dims[0] * dims[1];
        let rows = self.rows();
        let slab = self.slab_depth(dims);
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        let mut dx = need_input_grad.then(|| Tensor::zeros(self.in_channels, dims));
        let mut z0 = 0;
        while z0 < dims[2] {
            let z1 = (z0 + slab).min(dims[2]);
            let cols = (z1 - z0) * plane;
            col.resize(rows * cols, 0.0);
            im2col3(x, z0, z1, &mut col);
            let g = &grad_out.data()[z0 * plane..];
            gemm(
                self.out_channels,
                cols,
                rows,
                g,
                (n, 1),
                &col,
                (1, cols),
                1.0,
                &mut self.weight.grad,
                (rows, 1),
            );
            if let Some(dx) = dx.as_mut() {
                dcol.resize(rows * cols, 0.0);
                gemm(
                    rows,
                    self.out_channels,
                    cols,
                    &self.weight.value,
                    (1, rows),
                    g,
                    (n, 1),
                    0.0,
                    &mut dcol,
                    (cols, 1),
                );
                col2im3(&dcol, z0, z1, dx);
            }
            z0 = z1;
        }
        dx
    }
}

impl Module for Conv3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Source range along x for kernel tap `kx`: (dst_start, src_start, len).
#[inline]
fn x_span(kx: usize, nx: usize) -> (usize, usize, usize) {
    match kx {
        0 => (1, 0, nx - 1),
        1 => (0, 0, nx),
        _ => (0, 1, nx - 1),
    }
}

/// Fills `col` (rows = cin*27, cols = slab voxels) for output slices `z0..z1`.
fn im2col3(x: &Tensor, z0: usize, z1: usize, col: &mut [f32]) {
    let [nx, ny, nz] = x.dims();
    let cols = (z1 - z0) * nx * ny;
    for ci in 0..x.channels() {
        let src = x.channel(ci);
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (d0, s0, len) = x_span(kx, nx);
                    for z in z0..z1 {
                        let sz = z as isize + kz as isize - 1;
                        for y in 0..ny {
                            let sy = y as isize + ky as isize - 1;
                            let d = &mut dst[((z - z0) * ny + y) * nx..][..nx];
                            if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                                d.fill(0.0);
                                continue;
                            }
                            let s = &src[(sz as usize * ny + sy as usize) * nx..][..nx];
                            d.fill(0.0);
                            d[d0..d0 + len].copy_from_slice(&s[s0..s0 + len]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-adds `dcol` into `dx`.
fn col2im3(dcol: &[f32], z0: usize, z1: usize, dx: &mut Tensor) {
    let [nx, ny, nz] = dx.dims();
    let cols = (z1 - z0) * nx * ny;
    for ci in 0..dx.channels() {
        let dst = dx.channel_mut(ci);
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                    let src = &dcol[row * cols..(row + 1) * cols];
                    let (d0, s0, len) = x_span(kx, nx);
                    for z in z0..z1 {
                        let sz = z as isize + kz as isize - 1;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let s = &src[((z - z0) * ny + y) * nx..][..nx];
                            let d = &mut dst[(sz as usize * ny + sy as usize) * nx..][..nx];
                            for (dv, sv) in d[s0..s0 + len].iter_mut().zip(&s[d0..d0 + len]) {
                                *dv += sv;
                            }
                        }
                    }
                }
            }
        }
    }
}
