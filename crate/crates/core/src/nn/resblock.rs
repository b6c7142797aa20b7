use rand::Rng;

use super::{Act, ActLayer, Conv2d, GroupNorm, Layer, Param};
use crate::tensor::Tensor;

/// Basic residual block: `relu(gn(conv(relu(gn(conv(x))))) + shortcut(x))`.
/// A strided or channel-changing block uses a 1x1 convolution on the shortcut.
pub struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    act1: ActLayer,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
    out_act: ActLayer,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(in_channels, out_channels, 1, stride, rng),
                GroupNorm::new(groups, out_channels),
            )
        });
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, rng),
            norm1: GroupNorm::new(groups, out_channels),
            act1: ActLayer::new(Act::Relu),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, rng),
            norm2: GroupNorm::new(groups, out_channels),
            shortcut,
            out_act: ActLayer::new(Act::Relu),
        }
    }
}

impl Layer for ResBlock {
    fn infer(&self, x: &Tensor) -> Tensor {
        let h = self.act1.infer(&self.norm1.infer(&self.conv1.infer(x)));
        let h = self.norm2.infer(&self.conv2.infer(&h));
        let s = match &self.shortcut {
            Some((c, n)) => n.infer(&c.infer(x)),
            None => x.clone(),
        };
        self.out_act.infer(&h.add(&s))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(x);
        let h = self.norm1.forward(&h);
        let h = self.act1.forward(&h);
        let h = self.conv2.forward(&h);
        let h = self.norm2.forward(&h);
        let s = match &mut self.shortcut {
            Some((c, n)) => {
                let s = c.forward(x);
                n.forward(&s)
            }
            None => x.clone(),
        };
        self.out_act.forward(&h.add(&s))
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.out_act.backward(grad);
        let gh = self.norm2.backward(&g);
        let gh = self.conv2.backward(&gh);
        let gh = self.act1.backward(&gh);
        let gh = self.norm1.backward(&gh);
        let mut dx = self.conv1.backward(&gh);
        match &mut self.shortcut {
            Some((c, n)) => {
                let gs = n.backward(&g);
                dx.add_assign(&c.backward(&gs));
            }
            None => dx.add_assign(&g),
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.norm1.params());
        p.extend(self.conv2.params());
        p.extend(self.norm2.params());
        if let Some((c, n)) = &self.shortcut {
            p.extend(c.params());
            p.extend(n.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.norm1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.norm2.params_mut());
        if let Some((c, n)) = &mut self.shortcut {
            p.extend(c.params_mut());
            p.extend(n.params_mut());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;

    #[test]
    fn resblock_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut b = ResBlock::new(2, 4, 2, 2, &mut rng);
        let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);
        check_layer(&mut b, &x, 3e-2);
    }

    #[test]
    fn infer_matches_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut b = ResBlock::new(4, 4, 1, 2, &mut rng);
        let x = Tensor::randn(&[3, 4, 5, 5], 1.0, &mut rng);
        assert_eq!(b.infer(&x), b.forward(&x));
    }
}
