use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn constant(name: impl Into<String>, shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    /// Zero-mean normal initialisation.
    pub fn normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("std must be positive");
        let value = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Non-trainable state that must survive a checkpoint (running statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f32>,
}

/// Visitor over every parameter and buffer of a model, in a fixed order.
pub trait Module {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Buffer)) {}

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}
