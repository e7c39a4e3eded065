use super::params::{Gradients, ParamStore};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f32) -> Self {
        let zeros = || params.iter().map(|(_, _, v)| vec![0.0; v.len()]).collect::<Vec<_>>();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = self.learning_rate * bc2.sqrt() / bc1;
        for (((p, g), m), v) in params.values_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + self.eps * bc2.sqrt());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", vec![2], vec![3.0, -2.0]);
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut g = store.zero_grads();
            let w = store.get(id).to_vec();
            g.get_mut(id).copy_from_slice(&[2.0 * (w[0] - 1.0), 2.0 * (w[1] + 0.5)]);
            adam.step(&mut store, &g);
        }
        let w = store.get(id);
        assert!((w[0] - 1.0).abs() < 1e-2 && (w[1] + 0.5).abs() < 1e-2, "{w:?}");
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", vec![1], vec![0.0]);
        let mut adam = Adam::new(&store, 0.01);
        let mut g = store.zero_grads();
        g.get_mut(id)[0] = 5.0;
        adam.step(&mut store, &g);
        assert!((store.get(id)[0] + 0.01).abs() < 1e-6);
    }
}
