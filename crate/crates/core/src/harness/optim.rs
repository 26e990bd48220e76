/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = usize>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
    }
}
