use rand::Rng;

use super::DetectorConfig;
use crate::error::{Error, Result};
use crate::hspl::PrototypePair;
use crate::nn::layers::{relu, relu_backward, trilinear_resize, trilinear_resize_backward, BatchNormCache};
use crate::nn::unet::UNetCache;
use crate::nn::{BatchNorm3d, Buffer, Conv3d, Module, Param, Tensor};

/// Objectness, three centre offsets and a log-size per voxel.
pub const HEAD_CHANNELS: usize = 5;

/// Backbone, fusion module, proposal head and the prototype pair.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    pub(super) backbone: crate::nn::unet::UNet,
    /// One 1x1x1 projection per fused level, coarsest first.
    pub(super) proj: Vec<Conv3d>,
    pub(super) fuse_bn: BatchNorm3d,
    head_conv: Conv3d,
    head_out: Conv3d,
    pub prototypes: PrototypePair,
}

pub struct DetectorCache {
    backbone: UNetCache,
    levels: Vec<Tensor>,
    fuse_bn: BatchNormCache,
    fused: Tensor,
    hidden: Tensor,
}

/// Training-mode forward results.
pub struct TrainForward {
    pub fused: Tensor,
    pub head: Tensor,
    pub cache: DetectorCache,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = crate::nn::unet::UNet::new("backbone", config.in_channels, config.base_channels, config.levels, rng);
        let level_ch = backbone.level_channels();
        let used: Vec<usize> = if config.fusion {
            level_ch.clone()
        } else {
            vec![*level_ch.last().unwrap()]
        };
        let n = config.fused_channels;
        let proj = used
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv3d::new(&format!("ffm.proj{i}"), c, n, 1, false, rng))
            .collect();
        let head_conv = Conv3d::new("rpn.conv", n, n, 3, true, rng);
        let mut head_out = Conv3d::new("rpn.out", n, HEAD_CHANNELS, 1, true, rng);
        for w in head_out.weight.value.iter_mut() {
            *w *= 0.1;
        }
        // Objectness starts at the foreground prior.
        head_out.bias.as_mut().unwrap().value[0] = -(99.0f32).ln();
        let prototypes = PrototypePair::new(n, rng);
        Ok(Self {
            config,
            backbone,
            proj,
            fuse_bn: BatchNorm3d::new("ffm.bn", n),
            head_conv,
            head_out,
            prototypes,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn fused_channels(&self) -> usize {
        self.config.fused_channels
    }

    /// Decoder levels, coarsest first.
    pub fn backbone_forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.channels() != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "detector expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        self.backbone.forward(x)
    }

    fn check_levels(&self, levels: &[Tensor]) -> Result<()> {
        let expect = self.backbone.level_channels();
        if levels.len() != expect.len() {
            return Err(Error::ShapeMismatch(format!("expected {} levels, got {}", expect.len(), levels.len())));
        }
        let fine = levels.last().unwrap().dims();
        for (k, (l, &c)) in levels.iter().zip(&expect).enumerate() {
            let factor = 1usize << (levels.len() - 1 - k);
            if l.channels() != c || (0..3).any(|i| l.dims()[i] * factor != fine[i]) {
                return Err(Error::ShapeMismatch(format!(
                    "level {k}: {} channels at {:?}, expected {c} at finest/{factor}",
                    l.channels(),
                    l.dims()
                )));
            }
        }
        Ok(())
    }

    fn fuse_sum(&self, levels: &[Tensor]) -> Tensor {
        let fine = levels.last().unwrap().dims();
        let used = &levels[levels.len() - self.proj.len()..];
        let mut sum = Tensor::zeros(self.config.fused_channels, fine);
        for (conv, l) in self.proj.iter().zip(used) {
            let p = conv.forward(l);
            let up = if p.dims() == fine { p } else { trilinear_resize(&p, fine) };
            sum.add_assign(&up);
        }
        sum
    }

    /// Projects, upsamples and sums the levels, then normalises and activates.
    pub fn fuse_features(&self, levels: &[Tensor]) -> Result<Tensor> {
        self.check_levels(levels)?;
        Ok(relu(&self.fuse_bn.forward(&self.fuse_sum(levels))))
    }

    /// Raw head output: objectness logit then four regression channels.
    pub fn head_forward(&self, fused: &Tensor) -> Tensor {
        let hidden = relu(&self.head_conv.forward(fused));
        self.head_out.forward(&hidden)
    }

    /// Inference: fused features and head logits.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let levels = self.backbone_forward(x)?;
        let fused = self.fuse_features(&levels)?;
        let head = self.head_forward(&fused);
        Ok((fused, head))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<TrainForward> {
        let (levels, backbone) = self.backbone.forward_train(x)?;
        let sum = self.fuse_sum(&levels);
        let (normed, fuse_bn) = self.fuse_bn.forward_train(&sum);
        let fused = relu(&normed);
        let hidden = relu(&self.head_conv.forward(&fused));
        let head = self.head_out.forward(&hidden);
        Ok(TrainForward {
            fused: fused.clone(),
            head,
            cache: DetectorCache {
                backbone,
                levels,
                fuse_bn,
                fused,
                hidden,
            },
        })
    }

    /// Accumulates parameter gradients from head and (optionally) fused-map gradients.
    pub fn backward(&mut self, cache: &DetectorCache, grad_head: &Tensor, grad_fused: Option<&Tensor>) {
        let g_hidden = self.head_out.backward(&cache.hidden, grad_head, true).expect("head input gradient");
        let g_hidden = relu_backward(&cache.hidden, &g_hidden);
        let mut g_fused = self.head_conv.backward(&cache.fused, &g_hidden, true).expect("fused gradient");
        if let Some(g) = grad_fused {
            g_fused.add_assign(g);
        }
        let g_norm = relu_backward(&cache.fused, &g_fused);
        let g_sum = self.fuse_bn.backward(&cache.fuse_bn, &g_norm);
        let depth = cache.levels.len();
        let first = depth - self.proj.len();
        let mut level_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for (j, conv) in self.proj.iter_mut().enumerate() {
            let l = &cache.levels[first + j];
            let g_p = if l.dims() == g_sum.dims() {
                g_sum.clone()
            } else {
                trilinear_resize_backward(&g_sum, l.dims())
            };
            level_grads[first + j] = conv.backward(l, &g_p, true);
        }
        self.backbone.backward(&cache.backbone, level_grads, false);
    }
}

impl Module for Detector {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params(f);
        for p in &mut self.proj {
            p.visit_params(f);
        }
        self.fuse_bn.visit_params(f);
        self.head_conv.visit_params(f);
        self.head_out.visit_params(f);
        self.prototypes.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.backbone.visit_buffers(f);
        self.fuse_bn.visit_buffers(f);
    }
}
