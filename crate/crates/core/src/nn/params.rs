use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, shaped parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), shapes: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> ParamId {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "parameter size mismatch");
        self.names.push(name.into());
        self.shapes.push(shape);
        self.values.push(values);
        ParamId(self.values.len() - 1)
    }

    /// Zero-mean normal initialisation with standard deviation `sqrt(2 / fan_in)`.
    pub fn add_he_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(rng) as f32).collect();
        self.add(name, shape, values)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((n, s), v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Vec<f32>> {
        self.values.iter_mut()
    }

    /// Replaces the value of the tensor called `name`; shapes must agree.
    pub fn set(&mut self, name: &str, shape: &[usize], values: Vec<f32>) -> Result<(), String> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.shapes[i] != shape || values.len() != self.values[i].len() {
            return Err(format!("shape mismatch for {name}: {:?} vs {shape:?}", self.shapes[i]));
        }
        self.values[i] = values;
        Ok(())
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { values: self.values.iter().map(|v| vec![0.0; v.len()]).collect() }
    }

    /// FNV-1a over the raw bit patterns; equal checksums mean bitwise-equal
    /// parameters for all practical purposes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for x in v {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.values.iter().map(Vec::as_slice)
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.values {
            for g in v.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn zero(&mut self) {
        for v in &mut self.values {
            v.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|g| g.is_finite())
    }
}
