//! Convolutions (via im2col + GEMM) and bilinear resizing.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geom2 {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom2 {
    fn new(shape: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [c, h, w] = *shape else {
            return Err(Error::Shape(format!("conv2d expects C x H x W, got {shape:?}")));
        };
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("conv2d kernel {k} too large for {h}x{w} (pad {pad})")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c, h, w, k, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visit every (column-matrix offset, source offset) pair with an in-bounds source.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let ncols = self.cols();
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * ncols + oy * self.ow + ox, src_row + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], geo: &Geom2) -> Vec<f64> {
    let mut cols = vec![0.0; geo.rows() * geo.cols()];
    geo.for_each(|dst, src| cols[dst] = x[src]);
    cols
}

fn col2im(cols: &[f64], geo: &Geom2) -> Vec<f64> {
    let mut x = vec![0.0; geo.c * geo.h * geo.w];
    geo.for_each(|dst, src| x[src] += cols[dst]);
    x
}

fn add_channel_bias(out: &mut [f64], bias: &[f64]) {
    let n = out.len() / bias.len().max(1);
    for (chunk, b) in out.chunks_mut(n).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(gy: &[f64], o: usize) -> Tensor {
    let n = gy.len() / o;
    Tensor::from_parts(vec![o], gy.chunks(n).map(|c| c.iter().sum()).collect())
}

impl<'g> Var<'g> {
    /// 2-D convolution of a `C x H x W` map with an `O x C x k x k` kernel.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (x, w) = (self.value(), weight.value());
        if w.ndim() != 4 || w.dim(2) != w.dim(3) || w.dim(1) != x.dim(0) {
            return Err(Error::Shape(format!("conv2d weight {:?} for input {:?}", w.shape(), x.shape())));
        }
        let geo = Geom2::new(x.shape(), w.dim(2), stride, pad)?;
        let o = w.dim(0);
        let cols = std::rc::Rc::new(im2col(x.data(), &geo));
        let mut out = vec![0.0; o * geo.cols()];
        gemm(o, geo.rows(), geo.cols(), w.data(), false, &cols, false, &mut out, 0.0);
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.len() != o {
                return Err(Error::Shape(format!("conv2d bias {:?} for {o} outputs", bv.shape())));
            }
            add_channel_bias(&mut out, bv.data());
            inputs.push(b);
        }
        let wshape = w.shape().to_vec();
        let y = Tensor::from_parts(vec![o, geo.oh, geo.ow], out);
        Ok(self.g.record(y, &inputs, move |gy, mask| {
            let gx = mask[0].then(|| {
                let mut gcols = vec![0.0; geo.rows() * geo.cols()];
                gemm(geo.rows(), o, geo.cols(), w.data(), true, gy.data(), false, &mut gcols, 0.0);
                Tensor::from_parts(vec![geo.c, geo.h, geo.w], col2im(&gcols, &geo))
            });
            let gw = mask[1].then(|| {
                let mut d = vec![0.0; o * geo.rows()];
                gemm(o, geo.cols(), geo.rows(), gy.data(), false, &cols, true, &mut d, 0.0);
                Tensor::from_parts(wshape.clone(), d)
            });
            let mut grads = vec![gx, gw];
            if mask.len() == 3 {
                grads.push(mask[2].then(|| bias_grad(gy.data(), o)));
            }
            grads
        }))
    }

    /// 3-D convolution of a `C x T x H x W` volume with an `O x C x kt x kh x kw` kernel,
    /// stride 1 and "same" zero padding (odd kernels).
    pub fn conv3d(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        let (x, w) = (self.value(), weight.value());
        let (&[c, t, h, wd], &[o, wc, kt, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(Error::Shape(format!("conv3d weight {:?} for input {:?}", w.shape(), x.shape())));
        };
        if wc != c || kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv3d weight {:?} for input {:?}", w.shape(), x.shape())));
        }
        let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
        let rows = c * kt * kh * kw;
        let ncols = t * h * wd;
        // (dst in cols, src in x) pairs, shared by im2col and col2im.
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        for ci in 0..c {
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row = ((ci * kt + dt) * kh + dy) * kw + dx;
                        for ot in 0..t {
                            let it = ot as isize + dt as isize - pt;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for oy in 0..h {
                                let iy = oy as isize + dy as isize - ph;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..wd {
                                    let ix = ox as isize + dx as isize - pw;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let dst = row * ncols + (ot * h + oy) * wd + ox;
                                    let src = ((ci * t + it as usize) * h + iy as usize) * wd + ix as usize;
                                    pairs.push((dst as u32, src as u32));
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut cols = vec![0.0; rows * ncols];
        for &(d, s) in &pairs {
            cols[d as usize] = x.data()[s as usize];
        }
        let mut out = vec![0.0; o * ncols];
        gemm(o, rows, ncols, w.data(), false, &cols, false, &mut out, 0.0);
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.value().data());
            inputs.push(b);
        }
        let xshape = x.shape().to_vec();
        let wshape = w.shape().to_vec();
        let y = Tensor::from_parts(vec![o, t, h, wd], out);
        Ok(self.g.record(y, &inputs, move |gy, mask| {
            let gx = mask[0].then(|| {
                let mut gcols = vec![0.0; rows * ncols];
                gemm(rows, o, ncols, w.data(), true, gy.data(), false, &mut gcols, 0.0);
                let mut gxv = vec![0.0; c * t * h * wd];
                for &(d, s) in &pairs {
                    gxv[s as usize] += gcols[d as usize];
                }
                Tensor::from_parts(xshape.clone(), gxv)
            });
            let gw = mask[1].then(|| {
                let mut d = vec![0.0; o * rows];
                gemm(o, ncols, rows, gy.data(), false, &cols, true, &mut d, 0.0);
                Tensor::from_parts(wshape.clone(), d)
            });
            let mut grads = vec![gx, gw];
            if mask.len() == 3 {
                grads.push(mask[2].then(|| bias_grad(gy.data(), o)));
            }
            grads
        }))
    }

    /// Bilinear resize of a `C x H x W` map (half-pixel centers, edge clamped).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'g>> {
        let x = self.value();
        let [c, h, w] = *x.shape() else {
            return Err(Error::Shape(format!("resize expects C x H x W, got {:?}", x.shape())));
        };
        if oh == 0 || ow == 0 {
            return Err(Error::Shape("resize to an empty map".into()));
        }
        let ry = resize_bilinear_matrix(h, oh);
        let rx = resize_bilinear_matrix(w, ow);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for (oy, ty) in ry.iter().enumerate() {
                for (ox, tx) in rx.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(iy, wy) in ty {
                        for &(ix, wx) in tx {
                            acc += wy * wx * x.data()[(ci * h + iy) * w + ix];
                        }
                    }
                    out[(ci * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok(self.g.record(Tensor::from_parts(vec![c, oh, ow], out), &[self], move |gy, _| {
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for (oy, ty) in ry.iter().enumerate() {
                    for (ox, tx) in rx.iter().enumerate() {
                        let gv = gy.data()[(ci * oh + oy) * ow + ox];
                        for &(iy, wy) in ty {
                            for &(ix, wx) in tx {
                                gx[(ci * h + iy) * w + ix] += wy * wx * gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
        }))
    }
}

/// Per output index, the (source index, weight) taps of 1-D linear resizing
/// from `n_in` to `n_out` samples with half-pixel centers.
pub fn resize_bilinear_matrix(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            if i1 == i0 || l == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - l), (i1, l)]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::super::Graph;
    use super::*;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (o, k) = (w.dim(0), w.dim(2));
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.get(&[oc, ci, ky, kx]) * x.get(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[oc, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let x = rnd(&[3, 7, 6], 1);
        let w = rnd(&[4, 3, 3, 3], 2);
        let b = rnd(&[4], 3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
            let g = Graph::detached();
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), stride, pad).unwrap();
            let want = naive_conv2d(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (p, q) in y.value().data().iter().zip(want.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let err = max_rel_error(&[rnd(&[2, 5, 4], 4), rnd(&[3, 2, 3, 3], 5), rnd(&[3], 6)], |v| {
            v[0].conv2d(v[1], Some(v[2]), 2, 1).unwrap().square().sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv3d_gradients_and_center_tap_identity() {
        let err = max_rel_error(&[rnd(&[2, 3, 4, 3], 7), rnd(&[2, 2, 3, 3, 3], 8), rnd(&[2], 9)], |v| {
            v[0].conv3d(v[1], Some(v[2])).unwrap().square().sum()
        });
        assert!(err < 1e-6, "{err}");

        let x = rnd(&[2, 3, 4, 5], 10);
        let mut w = Tensor::zeros(&[2, 2, 3, 3, 3]);
        w.set(&[0, 0, 1, 1, 1], 1.0);
        w.set(&[1, 1, 1, 1, 1], 1.0);
        let g = Graph::detached();
        let y = g.constant(x.clone()).conv3d(g.constant(w), None).unwrap();
        assert_eq!(y.value().data(), x.data());
    }

    #[test]
    fn resize_gradients_and_identity() {
        let err = max_rel_error(&[rnd(&[2, 3, 5], 11)], |v| v[0].resize_bilinear(6, 9).unwrap().square().sum());
        assert!(err < 1e-6, "{err}");
        let x = rnd(&[2, 4, 4], 12);
        let g = Graph::detached();
        assert_eq!(g.constant(x.clone()).resize_bilinear(4, 4).unwrap().value().data(), x.data());
        // Constant maps stay constant under any resize.
        let c = g.constant(Tensor::full(&[1, 3, 5], 0.7)).resize_bilinear(7, 4).unwrap();
        assert!(c.value().data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}
