/// Channel-major feature map: `channels` planes of `dims` voxels each, every
/// plane stored with `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Self { channels, dims, data: vec![0.0; n] }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>(), "tensor size mismatch");
        Self { channels, dims, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!((self.channels, self.dims), (other.channels, other.dims));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks the channels of `a` then `b`.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.dims, b.dims, "concat needs equal spatial dims");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor { channels: a.channels + b.channels, dims: a.dims, data }
    }

    /// Inverse of [`Tensor::concat`]: the first `c` channels and the rest.
    pub fn split(mut self, c: usize) -> (Tensor, Tensor) {
        let n = self.spatial();
        let rest = self.data.split_off(c * n);
        let dims = self.dims;
        let tail = self.channels - c;
        (Tensor { channels: c, dims, data: self.data }, Tensor { channels: tail, dims, data: rest })
    }

    /// Slices `len` axial planes starting at `z0`.
    pub fn crop_z(&self, z0: usize, len: usize) -> Tensor {
        let [nx, ny, nz] = self.dims;
        assert!(z0 + len <= nz, "z crop out of range");
        let plane = nx * ny;
        let mut data = Vec::with_capacity(self.channels * plane * len);
        for c in 0..self.channels {
            let base = c * plane * nz + z0 * plane;
            data.extend_from_slice(&self.data[base..base + plane * len]);
        }
        Tensor { channels: self.channels, dims: [nx, ny, len], data }
    }

    /// Adjoint of [`Tensor::crop_z`]: embeds `self` at `z0` in a zero tensor
    /// of depth `nz`.
    pub fn uncrop_z(&self, z0: usize, nz: usize) -> Tensor {
        let [nx, ny, len] = self.dims;
        let plane = nx * ny;
        let mut out = Tensor::zeros(self.channels, [nx, ny, nz]);
        for c in 0..self.channels {
            let dst = c * plane * nz + z0 * plane;
            let src = c * plane * len;
            out.data[dst..dst + plane * len].copy_from_slice(&self.data[src..src + plane * len]);
        }
        out
    }
}
