use crate::error::{Error, Result};

/// Spatial extent `(nx, ny, nz)`, x varying fastest in memory.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Multi-channel 3D grid stored channel-major, then z, y, x.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * voxel_count(dims)],
        }
    }

    pub fn filled(channels: usize, dims: Dims, value: f32) -> Self {
        Self {
            channels,
            dims,
            data: vec![value; channels * voxel_count(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels} channels of {dims:?}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    /// Stacks single-channel grids of equal extent.
    pub fn stack(channels: &[&[f32]], dims: Dims) -> Result<Self> {
        let n = voxel_count(dims);
        let mut data = Vec::with_capacity(n * channels.len());
        for ch in channels {
            if ch.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "channel of {} voxels for grid {dims:?}",
                    ch.len()
                )));
            }
            data.extend_from_slice(ch);
        }
        Ok(Self {
            channels: channels.len(),
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * self.voxels() + self.offset(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = c * self.voxels() + self.offset(x, y, z);
        self.data[i] = v;
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let dims = parts[0].dims;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut channels = 0;
        for p in parts {
            if p.dims != dims {
                return Err(Error::ShapeMismatch(format!(
                    "concat of {:?} with {dims:?}",
                    p.dims
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Tensor {
            channels,
            dims,
            data,
        })
    }

    /// Splits channels into consecutive groups of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Vec<Tensor> {
        let n = self.voxels();
        let mut start = 0;
        sizes
            .iter()
            .map(|&c| {
                let t = Tensor {
                    channels: c,
                    dims: self.dims,
                    data: self.data[start * n..(start + c) * n].to_vec(),
                };
                start += c;
                t
            })
            .collect()
    }

    /// Copies a spatial sub-block of every channel.
    pub fn crop(&self, origin: Dims, size: Dims) -> Result<Tensor> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(Error::OutOfBounds {
                    origin,
                    size,
                    shape: self.dims,
                });
            }
        }
        let mut out = Tensor::zeros(self.channels, size);
        for c in 0..self.channels {
            for z in 0..size[2] {
                for y in 0..size[1] {
                    let src = c * self.voxels() + self.offset(origin[0], origin[1] + y, origin[2] + z);
                    let dst = c * out.voxels() + out.offset(0, y, z);
                    out.data[dst..dst + size[0]].copy_from_slice(&self.data[src..src + size[0]]);
                }
            }
        }
        Ok(out)
    }
}
