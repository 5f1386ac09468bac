//! Shallow feature extractors for LR frames and event segments.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};

/// `x + conv(lrelu(conv(x)))`, both 3x3; the second conv starts at zero.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        pb.scoped(name, |pb| Self { conv1: pb.conv2d("conv1", c, c, 3, 1), conv2: pb.conv2d_zero("conv2", c, c, 3, 1) })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.conv1.forward_lrelu(g, x)?;
        x.add(self.conv2.forward(g, y)?)
    }
}

/// Head convolution with LReLU followed by a residual trunk.
#[derive(Clone, Debug)]
pub struct Encoder {
    in_channels: usize,
    head: Conv2d,
    blocks: Vec<ResBlock>,
}

impl Encoder {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, c: usize, k: usize, blocks: usize) -> Self {
        pb.scoped(name, |pb| Self {
            in_channels: cin,
            head: pb.conv2d("head", cin, c, k, 1),
            blocks: (0..blocks).map(|i| ResBlock::new(pb, &format!("res{i}"), c)).collect(),
        })
    }

    /// RGB frames: 5x5 head.
    pub fn frame(pb: &mut ParamBuilder, name: &str, c: usize, blocks: usize) -> Self {
        Self::new(pb, name, 3, c, 5, blocks)
    }

    /// Two-bin event segments: 3x3 head.
    pub fn event(pb: &mut ParamBuilder, name: &str, c: usize, blocks: usize) -> Self {
        Self::new(pb, name, 2, c, 3, blocks)
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::Shape(format!("encoder expects {} x H x W input, got {shape:?}", self.in_channels)));
        }
        let mut y = self.head.forward_lrelu(g, x)?;
        for b in &self.blocks {
            y = b.forward(g, y)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error_in;
    use crate::nn::{InitScheme, ParamStore};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn shapes_and_channel_checks() {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, 1, InitScheme::Standard);
        let fe = Encoder::frame(&mut pb, "f", 64, 5);
        let ee = Encoder::event(&mut pb, "e", 64, 5);
        let g = Graph::inference(&store);
        let y = fe.forward(&g, g.constant(rnd(&[3, 6, 5], 2))).unwrap();
        assert_eq!(y.shape(), vec![64, 6, 5]);
        let y = ee.forward(&g, g.constant(rnd(&[2, 6, 5], 3))).unwrap();
        assert_eq!(y.shape(), vec![64, 6, 5]);
        assert!(matches!(fe.forward(&g, g.constant(rnd(&[2, 6, 5], 3))), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_gives_the_deterministic_bias_response() {
        let run = || {
            let mut store = ParamStore::new();
            let mut pb = ParamBuilder::new(&mut store, 9, InitScheme::Dense);
            let ee = Encoder::event(&mut pb, "e", 4, 2);
            let g = Graph::inference(&store);
            let y = ee.forward(&g, g.constant(Tensor::zeros(&[2, 4, 4]))).unwrap().value();
            (*y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.all_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn input_gradients_match_central_differences() {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, 4, InitScheme::Dense);
        let fe = Encoder::frame(&mut pb, "f", 4, 2);
        let ee = Encoder::event(&mut pb, "e", 4, 2);
        let (fe, ee) = (&fe, &ee);
        let err = max_rel_error_in(&store, &[rnd(&[3, 4, 4], 5)], 1e-3, |v| fe.forward(v[0].graph(), v[0]).unwrap().square().sum());
        assert!(err < 1e-3, "frame encoder {err}");
        let err = max_rel_error_in(&store, &[rnd(&[2, 4, 4], 6)], 1e-3, |v| ee.forward(v[0].graph(), v[0]).unwrap().square().sum());
        assert!(err < 1e-3, "event encoder {err}");
    }
}
