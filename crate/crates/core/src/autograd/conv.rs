//! Convolutions (im2col + GEMM), transposed convolution, depth-wise
//! cross-correlation and spatial cropping.

use crate::tensor::{gemm, gemm_into, Tensor};

use super::Var;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    /// Stride-1 "same" padding for odd kernels.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    /// Output extent along one axis, `None` if the kernel does not fit.
    pub fn out_len(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Extent produced by the transposed convolution.
    pub fn transposed_out_len(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.dilation * (self.kernel - 1) + 1 - 2 * self.pad
    }
}

/// `[c·k·k, ho·wo]` patch matrix of one image.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry) -> (Vec<f64>, usize, usize) {
    let ho = g.out_len(h).expect("kernel larger than input");
    let wo = g.out_len(w).expect("kernel larger than input");
    let k = g.kernel;
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatter-add patches back into a `c×h×w` image.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry) -> Vec<f64> {
    let ho = g.out_len(h).expect("kernel larger than input");
    let wo = g.out_len(w).expect("kernel larger than input");
    let k = g.kernel;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn is_pointwise(g: ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (o, b) in out.chunks_mut(plane).zip(bias) {
        o.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], plane: usize) -> Vec<f64> {
    g.chunks(plane).map(|c| c.iter().sum()).collect()
}

impl<'t> Var<'t> {
    /// 2-D convolution of a `Ci×H×W` input with `Co×Ci×k×k` weights.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeometry) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let (ci, h, wd) = x.dims3().expect("conv2d input");
        let ws = w.shape().to_vec();
        assert!(
            ws.len() == 4 && ws[1] == ci && ws[2] == geom.kernel && ws[3] == geom.kernel,
            "conv2d weight {ws:?} vs input channels {ci}, kernel {}",
            geom.kernel
        );
        let co = ws[0];
        let kk = ci * geom.kernel * geom.kernel;
        let pointwise = is_pointwise(geom);
        let (cols, ho, wo) = if pointwise {
            (Vec::new(), h, wd)
        } else {
            im2col(x.data(), ci, h, wd, geom)
        };
        let p = ho * wo;
        let mut out = vec![0.0; co * p];
        let colsd: &[f64] = if pointwise { x.data() } else { &cols };
        gemm_into(w.data(), co, kk, false, colsd, kk, p, false, &mut out, 0.0);
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            assert_eq!(b.len(), co, "conv2d bias length");
            add_channel_bias(&mut out, b.data(), p);
        }
        let out = Tensor::from_parts(vec![co, ho, wo], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.push(out, &parents, move |g| {
            let gd = g.data();
            let colsd: &[f64] = if pointwise { x.data() } else { &cols };
            let dw = gemm(gd, co, p, false, colsd, kk, p, true);
            let dcols = gemm(w.data(), co, kk, true, gd, co, p, false);
            let dx = if pointwise {
                dcols
            } else {
                col2im(&dcols, ci, h, wd, geom)
            };
            let mut grads = vec![
                Some(Tensor::from_parts(vec![ci, h, wd], dx)),
                Some(Tensor::from_parts(ws.clone(), dw)),
            ];
            if has_bias {
                grads.push(Some(Tensor::from_parts(vec![co], channel_sums(gd, p))));
            }
            grads
        })
    }

    /// Transposed convolution with `Ci×Co×k×k` weights (PyTorch layout).
    pub fn conv_transpose2d(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeometry) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let (ci, h, wd) = x.dims3().expect("conv_transpose2d input");
        let ws = w.shape().to_vec();
        assert!(ws.len() == 4 && ws[0] == ci && ws[2] == geom.kernel && ws[3] == geom.kernel);
        let co = ws[1];
        let kk = co * geom.kernel * geom.kernel;
        let (ho, wo) = (geom.transposed_out_len(h), geom.transposed_out_len(wd));
        let cols = gemm(w.data(), ci, kk, true, x.data(), ci, h * wd, false);
        let mut out = col2im(&cols, co, ho, wo, geom);
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            add_channel_bias(&mut out, b.data(), ho * wo);
        }
        let out = Tensor::from_parts(vec![co, ho, wo], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.push(out, &parents, move |g| {
            let (gcols, _, _) = im2col(g.data(), co, ho, wo, geom);
            let dx = gemm(w.data(), ci, kk, false, &gcols, kk, h * wd, false);
            let dw = gemm(x.data(), ci, h * wd, false, &gcols, kk, h * wd, true);
            let mut grads = vec![
                Some(Tensor::from_parts(vec![ci, h, wd], dx)),
                Some(Tensor::from_parts(ws.clone(), dw)),
            ];
            if has_bias {
                grads.push(Some(Tensor::from_parts(vec![co], channel_sums(g.data(), ho * wo))));
            }
            grads
        })
    }

    /// Per-channel valid cross-correlation of `self` (`C×Hs×Ws`) with
    /// `kernel` (`C×Hk×Wk`), giving `C×(Hs−Hk+1)×(Ws−Wk+1)`.
    pub fn depthwise_xcorr(self, kernel: Var<'t>) -> Var<'t> {
        let (x, k) = (self.value(), kernel.value());
        let (c, hs, ws) = x.dims3().expect("xcorr search");
        let (ck, hk, wk) = k.dims3().expect("xcorr kernel");
        assert!(c == ck && hk <= hs && wk <= ws, "xcorr: incompatible shapes");
        let (ho, wo) = (hs - hk + 1, ws - wk + 1);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let xs = x.channel(ch);
            let ks = k.channel(ch);
            let o = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for u in 0..hk {
                for v in 0..wk {
                    let kv = ks[u * wk + v];
                    for i in 0..ho {
                        let src = &xs[(i + u) * ws + v..(i + u) * ws + v + wo];
                        let dst = &mut o[i * wo..(i + 1) * wo];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![c, ho, wo], out);
        self.tape.push(out, &[self, kernel], move |g| {
            let mut dx = vec![0.0; c * hs * ws];
            let mut dk = vec![0.0; c * hk * wk];
            for ch in 0..c {
                let gs = &g.data()[ch * ho * wo..(ch + 1) * ho * wo];
                let xs = x.channel(ch);
                let ks = k.channel(ch);
                for u in 0..hk {
                    for v in 0..wk {
                        let kv = ks[u * wk + v];
                        let mut acc = 0.0;
                        for i in 0..ho {
                            let base = (i + u) * ws + v;
                            let grow = &gs[i * wo..(i + 1) * wo];
                            for (j, gv) in grow.iter().enumerate() {
                                acc += gv * xs[base + j];
                                dx[ch * hs * ws + base + j] += gv * kv;
                            }
                        }
                        dk[(ch * hk + u) * wk + v] = acc;
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(vec![c, hs, ws], dx)),
                Some(Tensor::from_parts(vec![c, hk, wk], dk)),
            ]
        })
    }

    /// Spatial window `[top, top+h) × [left, left+w)` of a `C×H×W` map.
    pub fn crop(self, top: usize, left: usize, h: usize, w: usize) -> Var<'t> {
        let x = self.value();
        let (c, hh, ww) = x.dims3().expect("crop input");
        assert!(top + h <= hh && left + w <= ww, "crop out of bounds");
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = x.channel(ch);
            for y in top..top + h {
                out.extend_from_slice(&plane[y * ww + left..y * ww + left + w]);
            }
        }
        let out = Tensor::from_parts(vec![c, h, w], out);
        self.tape.push(out, &[self], move |g| {
            let mut dx = vec![0.0; c * hh * ww];
            for ch in 0..c {
                for y in 0..h {
                    let src = &g.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let off = ch * hh * ww + (top + y) * ww + left;
                    dx[off..off + w].copy_from_slice(src);
                }
            }
            vec![Some(Tensor::from_parts(vec![c, hh, ww], dx))]
        })
    }

    /// Centered `size×size` spatial crop (offset rounds down).
    pub fn center_crop(self, size: usize) -> Var<'t> {
        let s = self.shape();
        let (h, w) = (s[1], s[2]);
        self.crop((h - size) / 2, (w - size) / 2, size, size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck::check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], g: ConvGeometry) -> Tensor {
        let (ci, h, wd) = x.dims3().unwrap();
        let co = w.shape()[0];
        let k = g.kernel;
        let (ho, wo) = (g.out_len(h).unwrap(), g.out_len(wd).unwrap());
        Tensor::from_fn(&[co, ho, wo], |idx| {
            let (o, rem) = (idx / (ho * wo), idx % (ho * wo));
            let (oy, ox) = (rem / wo, rem % wo);
            let mut s = b[o];
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * g.stride + ky * g.dilation) as i64 - g.pad as i64;
                        let ix = (ox * g.stride + kx * g.dilation) as i64 - g.pad as i64;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += w.data()[((o * ci + c) * k + ky) * k + kx] * x.at3(c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv2d_matches_naive_for_various_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in [
            ConvGeometry::new(3, 1, 1, 1),
            ConvGeometry::new(4, 2, 1, 1),
            ConvGeometry::new(2, 2, 0, 1),
            ConvGeometry::new(3, 1, 2, 2),
            ConvGeometry::new(1, 1, 0, 1),
        ] {
            let x = rand_tensor(&[2, 7, 6], &mut rng);
            let w = rand_tensor(&[3, 2, g.kernel, g.kernel], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let tape = Tape::inference();
            let out = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), g)
                .value();
            let oracle = naive_conv(&x, &w, b.data(), g);
            assert!(out.max_abs_diff(&oracle) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for g in [ConvGeometry::new(3, 2, 1, 1), ConvGeometry::new(1, 1, 0, 1)] {
            let x = rand_tensor(&[2, 5, 5], &mut rng);
            let w = rand_tensor(&[3, 2, g.kernel, g.kernel], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let err = check(&[x, w, b], 15, 1e-6, |_, v| {
                let y = v[0].conv2d(v[1], Some(v[2]), g);
                y.mul(y).sum()
            });
            assert!(err < 1e-6, "{g:?} {err}");
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights (no bias)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ConvGeometry::new(4, 4, 0, 1);
        let x = rand_tensor(&[2, 8, 8], &mut rng);
        let w = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let y = rand_tensor(&[3, 2, 2], &mut rng);
        let tape = Tape::inference();
        let cx = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, g).value();
        let wt = tape.constant(w.clone());
        let ty = tape.constant(y.clone()).conv_transpose2d(wt, None, g).value();
        assert_eq!(ty.shape(), &[2, 8, 8]);
        assert!((cx.dot(&y) - x.dot(&ty)).abs() < 1e-10);
        let err = check(&[y, w, Tensor::zeros(&[2])], 12, 1e-6, |_, v| {
            let o = v[0].conv_transpose2d(v[1], Some(v[2]), g);
            o.mul(o).sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn xcorr_and_crop_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&[2, 6, 6], &mut rng);
        let k = rand_tensor(&[2, 5, 5], &mut rng);
        let err = check(&[x, k], 20, 1e-6, |_, v| {
            let o = v[0].depthwise_xcorr(v[1].center_crop(3));
            o.mul(o).sum()
        });
        assert!(err < 1e-6, "{err}");
    }
}
