use super::Param;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient,
/// the same update rule as `torch.optim.SGD`.
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, lr: f32) {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.buffers.len(), params.len(), "parameter list changed");
        for (p, buf) in params.into_iter().zip(&mut self.buffers) {
            if !p.trainable {
                continue;
            }
            for ((w, g), b) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *b = self.momentum * *b + d;
                *w -= lr * *b;
            }
        }
    }
}

pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, lr: f32) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_weights_bitwise() {
        let mut p = Param::new(vec![0.3, -1.2]);
        p.grad = vec![5.0, 2.0];
        let before = p.value.clone();
        Sgd::new(0.9, 5e-4).step(vec![&mut p], 0.0);
        assert_eq!(p.value, before);
        Adam::new(0.5, 0.99).step(vec![&mut p], 0.0);
        assert_eq!(p.value, before);
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut p = Param::new(vec![1.0]);
        let mut opt = Sgd::new(0.9, 0.0);
        p.grad = vec![1.0];
        opt.step(vec![&mut p], 0.1);
        assert!((p.value[0] - 0.9).abs() < 1e-7);
        opt.step(vec![&mut p], 0.1);
        // buffer = 0.9 * 1 + 1 = 1.9
        assert!((p.value[0] - (0.9 - 0.19)).abs() < 1e-6);
    }
}
