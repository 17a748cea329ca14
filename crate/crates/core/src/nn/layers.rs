use super::param::{Buffer, Module, Param};
use super::tensor::{Dims, Tensor};

/// Per-channel batch normalisation over all voxels of a single-sample batch.
#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    momentum: f32,
    eps: f32,
}

#[derive(Debug)]
pub struct BatchNormCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm3d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::constant(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::constant(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![1.0; channels],
            },
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BatchNormCache) {
        let n = x.voxels();
        let mut x_hat = Tensor::zeros(x.channels(), x.dims());
        let mut y = Tensor::zeros(x.channels(), x.dims());
        let mut inv_std = Vec::with_capacity(x.channels());
        for c in 0..x.channels() {
            let src = x.channel(c);
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for ((h, o), &v) in x_hat.channel_mut(c).iter_mut().zip(y.channel_mut(c).iter_mut()).zip(src) {
                *h = ((v as f64 - mean) * istd) as f32;
                *o = g * *h + b;
            }
            inv_std.push(istd as f32);
            let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
            let m = self.momentum;
            self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean as f32;
            self.running_var.value[c] = (1.0 - m) * self.running_var.value[c] + m * unbiased as f32;
        }
        (y, BatchNormCache { x_hat, inv_std })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for c in 0..x.channels() {
            let istd = 1.0 / (self.running_var.value[c] + self.eps).sqrt();
            let scale = self.gamma.value[c] * istd;
            let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
            y.channel_mut(c).iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache, grad_out: &Tensor) -> Tensor {
        let n = grad_out.voxels() as f64;
        let mut dx = Tensor::zeros(grad_out.channels(), grad_out.dims());
        for c in 0..grad_out.channels() {
            let dy = grad_out.channel(c);
            let xh = cache.x_hat.channel(c);
            let sum_dy: f64 = dy.iter().map(|&v| v as f64).sum();
            let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
            self.gamma.grad[c] += sum_dy_xh as f32;
            self.beta.grad[c] += sum_dy as f32;
            let k = self.gamma.value[c] as f64 * cache.inv_std[c] as f64 / n;
            for ((d, &g), &h) in dx.channel_mut(c).iter_mut().zip(dy).zip(xh) {
                *d = (k * (n * g as f64 - sum_dy - h as f64 * sum_dy_xh)) as f32;
            }
        }
        dx
    }
}

impl Module for BatchNorm3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut dx = grad_out.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 2x2x2 max pooling; returns the pooled tensor and the argmax offset of each output.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [nx, ny, nz] = x.dims();
    let od = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(x.channels(), od);
    let mut arg = vec![0u32; out.data().len()];
    let on = out.voxels();
    for c in 0..x.channels() {
        let src = x.channel(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                for xx in 0..od[0] {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * xx + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                if src[i] > best {
                                    best = src[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    let o = xx + od[0] * (y + od[1] * z);
                    out.channel_mut(c)[o] = best;
                    arg[c * on + o] = bi as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input_dims: Dims, arg: &[u32], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(grad_out.channels(), input_dims);
    let on = grad_out.voxels();
    for c in 0..grad_out.channels() {
        let g = grad_out.channel(c);
        let d = dx.channel_mut(c);
        for o in 0..on {
            d[arg[c * on + o] as usize] += g[o];
        }
    }
    dx
}

/// Linear interpolation taps for resizing one axis (half-pixel centres).
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

fn resize_axis(x: &Tensor, axis: usize, n_out: usize) -> Tensor {
    let d = x.dims();
    let mut od = d;
    od[axis] = n_out;
    let t = taps(d[axis], n_out);
    let mut out = Tensor::zeros(x.channels(), od);
    let stride_in = [1, d[0], d[0] * d[1]][axis];
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                for xx in 0..od[0] {
                    let p = [xx, y, z];
                    let o = p[axis];
                    let mut base = p;
                    base[axis] = 0;
                    let bi = base[0] + d[0] * (base[1] + d[1] * base[2]);
                    let (i0, i1, w) = t[o];
                    dst[xx + od[0] * (y + od[1] * z)] =
                        (1.0 - w) * src[bi + i0 * stride_in] + w * src[bi + i1 * stride_in];
                }
            }
        }
    }
    out
}

fn resize_axis_backward(grad_out: &Tensor, axis: usize, n_in: usize) -> Tensor {
    let od = grad_out.dims();
    let mut d = od;
    d[axis] = n_in;
    let t = taps(n_in, od[axis]);
    let mut dx = Tensor::zeros(grad_out.channels(), d);
    let stride_in = [1, d[0], d[0] * d[1]][axis];
    for c in 0..grad_out.channels() {
        let g = grad_out.channel(c);
        let dst = dx.channel_mut(c);
        for z in 0..od[2] {
            for y in 0..od[1] {
                for xx in 0..od[0] {
                    let p = [xx, y, z];
                    let mut base = p;
                    base[axis] = 0;
                    let bi = base[0] + d[0] * (base[1] + d[1] * base[2]);
                    let (i0, i1, w) = t[p[axis]];
                    let gv = g[xx + od[0] * (y + od[1] * z)];
                    dst[bi + i0 * stride_in] += (1.0 - w) * gv;
                    dst[bi + i1 * stride_in] += w * gv;
                }
            }
        }
    }
    dx
}

/// Separable trilinear resize to `out_dims`.
pub fn trilinear_resize(x: &Tensor, out_dims: Dims) -> Tensor {
    let mut t = x.clone();
    for axis in 0..3 {
        if t.dims()[axis] != out_dims[axis] {
            t = resize_axis(&t, axis, out_dims[axis]);
        }
    }
    t
}

/// Adjoint of [`trilinear_resize`].
pub fn trilinear_resize_backward(grad_out: &Tensor, in_dims: Dims) -> Tensor {
    let mut g = grad_out.clone();
    for axis in (0..3).rev() {
        if g.dims()[axis] != in_dims[axis] {
            g = resize_axis_backward(&g, axis, in_dims[axis]);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, dims: Dims, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c * dims.iter().product::<usize>();
        Tensor::from_vec(c, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = rand_tensor(2, [3, 4, 2], 1);
        let out = [12, 8, 8];
        let g = rand_tensor(2, out, 2);
        let lhs = dot(&trilinear_resize(&x, out), &g);
        let rhs = dot(&x, &trilinear_resize_backward(&g, x.dims()));
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::filled(1, [2, 2, 2], 3.5);
        let y = trilinear_resize(&x, [8, 8, 8]);
        assert!(y.data().iter().all(|v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = rand_tensor(1, [4, 4, 2], 3);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.dims(), [2, 2, 1]);
        let g = Tensor::filled(1, y.dims(), 1.0);
        let dx = max_pool2_backward(x.dims(), &arg, &g);
        assert_eq!(dx.data().iter().filter(|v| **v == 1.0).count(), 4);
        for (o, &a) in arg.iter().enumerate() {
            assert_eq!(x.data()[a as usize], y.data()[o]);
        }
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let x = rand_tensor(2, [3, 2, 2], 4);
        let g = rand_tensor(2, [3, 2, 2], 5);
        let mut bn = BatchNorm3d::new("bn", 2);
        bn.gamma.value = vec![1.3, 0.7];
        let loss = |bn: &BatchNorm3d, x: &Tensor| {
            let mut b = bn.clone();
            dot(&b.forward_train(x).0, &g)
        };
        let (_, cache) = bn.clone().forward_train(&x);
        let dx = bn.backward(&cache, &g);
        let h = 1e-3f32;
        for i in [0, 4, 13, 23] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data()[i] as f64).abs() < 2e-3, "{fd} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut bn = BatchNorm3d::new("bn", 1);
        bn.running_mean.value[0] = 2.0;
        bn.running_var.value[0] = 4.0 - 1e-5;
        let y = bn.forward(&Tensor::filled(1, [1, 1, 1], 4.0));
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
    }
}
