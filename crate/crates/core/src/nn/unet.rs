//! U-Net encoder/decoder returning every decoder level.

use rand::Rng;

use super::conv::Conv3d;
use super::layers::{
    max_pool2, max_pool2_backward, relu, relu_backward, trilinear_resize, trilinear_resize_backward,
    BatchNorm3d, BatchNormCache,
};
use super::param::{Buffer, Module, Param};
use super::tensor::{Dims, Tensor};
use crate::error::{Error, Result};

/// conv3 -> batch norm -> ReLU
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    conv: Conv3d,
    bn: BatchNorm3d,
}

#[derive(Debug)]
pub struct ConvBnReluCache {
    input: Tensor,
    bn: BatchNormCache,
    out: Tensor,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv3d::new(&format!("{name}.conv"), cin, cout, 3, false, rng),
            bn: BatchNorm3d::new(&format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        relu(&self.bn.forward(&self.conv.forward(x)))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, ConvBnReluCache) {
        let h = self.conv.forward(x);
        let (n, bn) = self.bn.forward_train(&h);
        let out = relu(&n);
        (
            out.clone(),
            ConvBnReluCache {
                input: x.clone(),
                bn,
                out,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvBnReluCache, g: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let g = relu_backward(&cache.out, g);
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.input, &g, need_input_grad)
    }
}

impl Module for ConvBnRelu {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.bn.visit_buffers(f);
    }
}

/// Two stacked [`ConvBnRelu`] layers.
#[derive(Clone, Debug)]
pub struct Block {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

#[derive(Debug)]
pub struct BlockCache {
    a: ConvBnReluCache,
    b: ConvBnReluCache,
}

impl Block {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            a: ConvBnRelu::new(&format!("{name}.0"), cin, cout, rng),
            b: ConvBnRelu::new(&format!("{name}.1"), cout, cout, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.b.forward(&self.a.forward(x))
    }

    fn forward_train(&mut self, x: &Tensor) -> (Tensor, BlockCache) {
        let (h, a) = self.a.forward_train(x);
        let (out, b) = self.b.forward_train(&h);
        (out, BlockCache { a, b })
    }

    fn backward(&mut self, cache: &BlockCache, g: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let g = self.b.backward(&cache.b, g, true).expect("inner gradient");
        self.a.backward(&cache.a, &g, need_input_grad)
    }
}

impl Module for Block {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.a.visit_params(f);
        self.b.visit_params(f);
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.a.visit_buffers(f);
        self.b.visit_buffers(f);
    }
}

/// Encoder stage `i` has `base * 2^i` channels; the decoder mirrors it with
/// trilinear upsampling and skip concatenation.
#[derive(Clone, Debug)]
pub struct UNet {
    encoders: Vec<Block>,
    /// `decoders[i]` produces the level at encoder resolution `i`.
    decoders: Vec<Block>,
    in_channels: usize,
    base: usize,
}

pub struct UNetCache {
    enc: Vec<BlockCache>,
    enc_dims: Vec<Dims>,
    pool_args: Vec<Vec<u32>>,
    dec: Vec<Option<BlockCache>>,
    level_channels: Vec<usize>,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(name: &str, in_channels: usize, base: usize, depth: usize, rng: &mut R) -> Self {
        assert!(depth >= 1);
        let ch = |i: usize| base << i;
        let encoders = (0..depth)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { ch(i - 1) };
                Block::new(&format!("{name}.enc{i}"), cin, ch(i), rng)
            })
            .collect();
        let decoders = (0..depth - 1)
            .map(|i| Block::new(&format!("{name}.dec{i}"), ch(i + 1) + ch(i), ch(i), rng))
            .collect();
        Self {
            encoders,
            decoders,
            in_channels,
            base,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoders.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Channel count of each returned level, coarsest first.
    pub fn level_channels(&self) -> Vec<usize> {
        (0..self.depth()).rev().map(|i| self.base << i).collect()
    }

    /// Spatial extent of each returned level for an input of extent `dims`, coarsest first.
    pub fn level_dims(&self, dims: Dims) -> Result<Vec<Dims>> {
        let factor = 1usize << (self.depth() - 1);
        if dims.iter().any(|&d| d == 0 || d % factor != 0) {
            let padded = dims.map(|d| d.div_ceil(factor).max(1) * factor);
            return Err(Error::NotDivisible { dims, factor, padded });
        }
        Ok((0..self.depth()).rev().map(|i| dims.map(|d| d >> i)).collect())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.level_dims(x.dims())?;
        let mut skips = Vec::with_capacity(self.depth());
        let mut cur = self.encoders[0].forward(x);
        for enc in &self.encoders[1..] {
            let (pooled, _) = max_pool2(&cur);
            skips.push(cur);
            cur = enc.forward(&pooled);
        }
        let mut levels = vec![cur];
        for i in (0..self.depth() - 1).rev() {
            let skip = &skips[i];
            let up = trilinear_resize(levels.last().unwrap(), skip.dims());
            let cat = Tensor::concat(&[&up, skip])?;
            levels.push(self.decoders[i].forward(&cat));
        }
        Ok(levels)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Vec<Tensor>, UNetCache)> {
        self.level_dims(x.dims())?;
        let depth = self.depth();
        let mut enc = Vec::with_capacity(depth);
        let mut enc_dims = Vec::with_capacity(depth);
        let mut pool_args = Vec::with_capacity(depth - 1);
        let mut skips = Vec::with_capacity(depth);
        let (mut cur, c0) = self.encoders[0].forward_train(x);
        enc.push(c0);
        enc_dims.push(cur.dims());
        for e in self.encoders[1..].iter_mut() {
            let (pooled, arg) = max_pool2(&cur);
            pool_args.push(arg);
            skips.push(cur);
            let (out, c) = e.forward_train(&pooled);
            enc.push(c);
            enc_dims.push(out.dims());
            cur = out;
        }
        let mut levels = vec![cur];
        let mut dec: Vec<Option<BlockCache>> = (0..depth - 1).map(|_| None).collect();
        for i in (0..depth - 1).rev() {
            let skip = &skips[i];
            let up = trilinear_resize(levels.last().unwrap(), skip.dims());
            let cat = Tensor::concat(&[&up, skip])?;
            let (out, c) = self.decoders[i].forward_train(&cat);
            dec[i] = Some(c);
            levels.push(out);
        }
        let level_channels = self.level_channels();
        Ok((
            levels,
            UNetCache {
                enc,
                enc_dims,
                pool_args,
                dec,
                level_channels,
            },
        ))
    }

    /// Back-propagates gradients given for each level (coarsest first, `None` = zero).
    pub fn backward(&mut self, cache: &UNetCache, mut level_grads: Vec<Option<Tensor>>, need_input_grad: bool) -> Option<Tensor> {
        let depth = self.depth();
        assert_eq!(level_grads.len(), depth);
        let zeros = |k: usize| Tensor::zeros(cache.level_channels[k], cache.enc_dims[depth - 1 - k]);
        let mut enc_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for k in (1..depth).rev() {
            let i = depth - 1 - k;
            let g = level_grads[k].take().unwrap_or_else(|| zeros(k));
            let dc = cache.dec[i].as_ref().expect("decoder cache");
            let g_cat = self.decoders[i].backward(dc, &g, true).expect("decoder input gradient");
            let below = cache.level_channels[k - 1];
            let mut parts = g_cat.split(&[below, g_cat.channels() - below]).into_iter();
            let g_up = parts.next().unwrap();
            let g_skip = parts.next().unwrap();
            let g_prev = trilinear_resize_backward(&g_up, cache.enc_dims[i + 1]);
            accumulate(&mut level_grads[k - 1], g_prev);
            accumulate(&mut enc_grads[i], g_skip);
        }
        if let Some(g) = level_grads[0].take() {
            accumulate(&mut enc_grads[depth - 1], g);
        }
        let mut input_grad = None;
        for i in (0..depth).rev() {
            let Some(g) = enc_grads[i].take() else { continue };
            let want = i > 0 || need_input_grad;
            let gx = self.encoders[i].backward(&cache.enc[i], &g, want);
            if i > 0 {
                let gx = gx.expect("encoder input gradient");
                let up = max_pool2_backward(cache.enc_dims[i - 1], &cache.pool_args[i - 1], &gx);
                accumulate(&mut enc_grads[i - 1], up);
            } else {
                input_grad = gx;
            }
        }
        input_grad
    }
}

pub(crate) fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Module for UNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for e in &mut self.encoders {
            e.visit_params(f);
        }
        for d in &mut self.decoders {
            d.visit_params(f);
        }
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        for e in &mut self.encoders {
            e.visit_buffers(f);
        }
        for d in &mut self.decoders {
            d.visit_buffers(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(c: usize, dims: Dims, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c * dims.iter().product::<usize>();
        Tensor::from_vec(c, dims, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn level_shapes_follow_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new("u", 2, 4, 3, &mut rng);
        let levels = net.forward(&input(2, [8, 8, 4], 1)).unwrap();
        let dims: Vec<_> = levels.iter().map(|l| l.dims()).collect();
        assert_eq!(dims, vec![[2, 2, 1], [4, 4, 2], [8, 8, 4]]);
        assert_eq!(levels.iter().map(|l| l.channels()).collect::<Vec<_>>(), vec![16, 8, 4]);
        assert!(matches!(net.forward(&input(2, [6, 8, 4], 1)), Err(Error::NotDivisible { padded: [8, 8, 4], .. })));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = UNet::new("u", 1, 2, 2, &mut rng);
        // |x_hat| <= sqrt(n - 1), so this shift keeps every ReLU active and the loss smooth.
        net.visit_params(&mut |p| {
            if p.name.ends_with("bn.beta") {
                p.value.iter_mut().for_each(|v| *v = 20.0);
            }
        });
        let dims = [8, 8, 4];
        let x = input(1, dims, 3);
        let w_fine = input(2, dims, 4);
        let w_coarse = input(4, [4, 4, 2], 5);
        let loss = |net: &UNet, x: &Tensor| -> f64 {
            let mut n = net.clone();
            let (levels, _) = n.forward_train(x).unwrap();
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
            };
            dot(&levels[0], &w_coarse) + dot(&levels[1], &w_fine)
        };
        let mut n2 = net.clone();
        let (_, cache) = n2.forward_train(&x).unwrap();
        net.zero_grad();
        let gx = net
            .backward(&cache, vec![Some(w_coarse.clone()), Some(w_fine.clone())], true)
            .unwrap();
        let h = 1e-2f32;
        for i in [0, 5, 17, 30, 101, 255] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h as f64);
            let an = gx.data()[i] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "x[{i}]: fd {fd} vs {an}");
        }
    }
}
