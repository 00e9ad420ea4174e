//! Ops built on bilinear sampling: deformable convolution, resampling and
//! (deformable) RoI pooling.

use crate::tensor::{bilinear_taps, clamped_stencil, gemm, gemm_into, Tap, Tensor};

use super::{ConvGeometry, Var};

/// How samples that fall outside the map are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Corners outside the map contribute zero.
    Zero,
    /// Coordinates are clamped to the map (edge replication).
    Clamp,
}

/// Region in feature-map coordinates, where cell `(i, j)` sits at `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

impl RoiBox {
    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }
}

type TapSet = [(Tap, f64, f64); 4];

fn clamp_taps(h: usize, w: usize, y: f64, x: f64) -> TapSet {
    let (y0, y1, fy) = clamped_stencil(h, y);
    let (x0, x1, fx) = clamped_stencil(w, x);
    // Clamped coordinates have zero derivative outside the map; inside they
    // match the plain bilinear derivatives.
    let iny = y >= 0.0 && y <= (h - 1) as f64;
    let inx = x >= 0.0 && x <= (w - 1) as f64;
    let dyk = if iny { 1.0 } else { 0.0 };
    let dxk = if inx { 1.0 } else { 0.0 };
    [
        (Tap { idx: y0 * w + x0, w: (1.0 - fy) * (1.0 - fx) }, -(1.0 - fx) * dyk, -(1.0 - fy) * dxk),
        (Tap { idx: y0 * w + x1, w: (1.0 - fy) * fx }, -fx * dyk, (1.0 - fy) * dxk),
        (Tap { idx: y1 * w + x0, w: fy * (1.0 - fx) }, (1.0 - fx) * dyk, -fy * dxk),
        (Tap { idx: y1 * w + x1, w: fy * fx }, fx * dyk, fy * dxk),
    ]
}

fn taps(mode: SampleMode, h: usize, w: usize, y: f64, x: f64) -> TapSet {
    match mode {
        SampleMode::Zero => bilinear_taps(h, w, y, x),
        SampleMode::Clamp => clamp_taps(h, w, y, x),
    }
}

fn interp(plane: &[f64], t: &TapSet) -> f64 {
    t.iter().map(|(tap, _, _)| tap.w * plane[tap.idx]).sum()
}

/// `(∂v/∂y, ∂v/∂x)` of the interpolated value.
fn interp_grad(plane: &[f64], t: &TapSet) -> (f64, f64) {
    t.iter().fold((0.0, 0.0), |(gy, gx), (tap, dy, dx)| {
        let v = plane[tap.idx];
        (gy + dy * v, gx + dx * v)
    })
}

impl<'t> Var<'t> {
    /// Deformable convolution. `offsets` is `[2·k², Ho, Wo]` with channel
    /// `2t` the row shift and `2t+1` the column shift of kernel tap `t`
    /// (row-major over the kernel). Sampling is bilinear with zero padding.
    pub fn deform_conv2d(
        self,
        offsets: Var<'t>,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        geom: ConvGeometry,
    ) -> Var<'t> {
        let (x, off, w) = (self.value(), offsets.value(), weight.value());
        let (c, h, wd) = x.dims3().expect("deform_conv2d input");
        let k = geom.kernel;
        let kk = k * k;
        let (ho, wo) = (geom.out_len(h).unwrap(), geom.out_len(wd).unwrap());
        assert_eq!(off.shape(), &[2 * kk, ho, wo], "deform_conv2d offsets shape");
        let ws = w.shape().to_vec();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == k && ws[3] == k, "deform_conv2d weight");
        let co = ws[0];
        let p = ho * wo;

        let mut tapsets: Vec<TapSet> = Vec::with_capacity(kk * p);
        for t in 0..kk {
            let (ky, kx) = (t / k, t % k);
            let dy = off.channel(2 * t);
            let dx = off.channel(2 * t + 1);
            for oy in 0..ho {
                for ox in 0..wo {
                    let q = oy * wo + ox;
                    let py = (oy * geom.stride + ky * geom.dilation) as f64 - geom.pad as f64 + dy[q];
                    let px = (ox * geom.stride + kx * geom.dilation) as f64 - geom.pad as f64 + dx[q];
                    tapsets.push(bilinear_taps(h, wd, py, px));
                }
            }
        }
        let mut cols = vec![0.0; c * kk * p];
        for ch in 0..c {
            let plane = x.channel(ch);
            for t in 0..kk {
                let row = &mut cols[(ch * kk + t) * p..(ch * kk + t + 1) * p];
                for (q, v) in row.iter_mut().enumerate() {
                    *v = interp(plane, &tapsets[t * p + q]);
                }
            }
        }
        let mut out = vec![0.0; co * p];
        gemm_into(w.data(), co, c * kk, false, &cols, c * kk, p, false, &mut out, 0.0);
        if let Some(b) = bias {
            let b = b.value();
            for (o, bv) in out.chunks_mut(p).zip(b.data()) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::from_parts(vec![co, ho, wo], out);
        let mut parents = vec![self, offsets, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.push(out, &parents, move |g| {
            let gd = g.data();
            let dw = gemm(gd, co, p, false, &cols, c * kk, p, true);
            let dcols = gemm(w.data(), co, c * kk, true, gd, co, p, false);
            let mut dxv = vec![0.0; c * h * wd];
            let mut doff = vec![0.0; 2 * kk * p];
            for ch in 0..c {
                let plane = x.channel(ch);
                let dplane = &mut dxv[ch * h * wd..(ch + 1) * h * wd];
                for t in 0..kk {
                    let drow = &dcols[(ch * kk + t) * p..(ch * kk + t + 1) * p];
                    for (q, &dv) in drow.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        let ts = &tapsets[t * p + q];
                        for (tap, _, _) in ts {
                            dplane[tap.idx] += dv * tap.w;
                        }
                        let (gy, gx) = interp_grad(plane, ts);
                        doff[2 * t * p + q] += dv * gy;
                        doff[(2 * t + 1) * p + q] += dv * gx;
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::from_parts(vec![c, h, wd], dxv)),
                Some(Tensor::from_parts(vec![2 * kk, ho, wo], doff)),
                Some(Tensor::from_parts(ws.clone(), dw)),
            ];
            if has_bias {
                grads.push(Some(Tensor::from_parts(
                    vec![co],
                    gd.chunks(p).map(|c| c.iter().sum()).collect(),
                )));
            }
            grads
        })
    }

    /// Resample onto an `oh×ow` grid where output cell `(i, j)` reads the
    /// source at `(y_off + y_scale·i, x_off + x_scale·j)`.
    pub fn affine_resample(
        self,
        oh: usize,
        ow: usize,
        (y_scale, y_off): (f64, f64),
        (x_scale, x_off): (f64, f64),
        mode: SampleMode,
    ) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("resample input");
        let p = oh * ow;
        let mut tapsets = Vec::with_capacity(p);
        for i in 0..oh {
            for j in 0..ow {
                tapsets.push(taps(mode, h, w, y_off + y_scale * i as f64, x_off + x_scale * j as f64));
            }
        }
        let mut out = vec![0.0; c * p];
        for ch in 0..c {
            let plane = x.channel(ch);
            for (q, ts) in tapsets.iter().enumerate() {
                out[ch * p + q] = interp(plane, ts);
            }
        }
        let out = Tensor::from_parts(vec![c, oh, ow], out);
        self.tape.push(out, &[self], move |g| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                let gp = &g.data()[ch * p..(ch + 1) * p];
                let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
                for (ts, gv) in tapsets.iter().zip(gp) {
                    for (tap, _, _) in ts {
                        dp[tap.idx] += gv * tap.w;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
        })
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'t> {
        let s = self.shape();
        if s[1] == oh && s[2] == ow {
            return self;
        }
        let sy = s[1] as f64 / oh as f64;
        let sx = s[2] as f64 / ow as f64;
        self.affine_resample(oh, ow, (sy, 0.5 * sy - 0.5), (sx, 0.5 * sx - 0.5), SampleMode::Clamp)
    }

    /// RoI pooling into `out×out` bins, each the mean of `samples²` bilinear
    /// samples (zero padding). With `offsets = Some((o, gamma))`, bin
    /// `(i, j)` is shifted by `gamma · (roi_h·o[0,i,j], roi_w·o[1,i,j])`.
    pub fn roi_pool(
        self,
        roi: RoiBox,
        out: usize,
        samples: usize,
        offsets: Option<(Var<'t>, f64)>,
    ) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("roi_pool input");
        let (rh, rw) = (roi.height(), roi.width());
        let (bh, bw) = (rh / out as f64, rw / out as f64);
        let offv = offsets.map(|(o, gamma)| (o.value(), gamma));
        if let Some((o, _)) = &offv {
            assert_eq!(o.shape(), &[2, out, out], "roi_pool offsets shape");
        }
        let p = out * out;
        let ns = samples * samples;
        let mut tapsets = Vec::with_capacity(p * ns);
        for i in 0..out {
            for j in 0..out {
                let (sy, sx) = match &offv {
                    Some((o, gamma)) => (
                        gamma * rh * o.data()[i * out + j],
                        gamma * rw * o.data()[p + i * out + j],
                    ),
                    None => (0.0, 0.0),
                };
                for a in 0..samples {
                    for b in 0..samples {
                        let y = roi.y0 + (i as f64 + (a as f64 + 0.5) / samples as f64) * bh + sy;
                        let xx = roi.x0 + (j as f64 + (b as f64 + 0.5) / samples as f64) * bw + sx;
                        tapsets.push(bilinear_taps(h, w, y, xx));
                    }
                }
            }
        }
        let inv = 1.0 / ns as f64;
        let mut vals = vec![0.0; c * p];
        for ch in 0..c {
            let plane = x.channel(ch);
            for q in 0..p {
                vals[ch * p + q] = tapsets[q * ns..(q + 1) * ns]
                    .iter()
                    .map(|ts| interp(plane, ts))
                    .sum::<f64>()
                    * inv;
            }
        }
        let result = Tensor::from_parts(vec![c, out, out], vals);
        let mut parents = vec![self];
        let gamma = offsets.map(|(o, gamma)| {
            parents.push(o);
            gamma
        });
        self.tape.push(result, &parents, move |g| {
            let mut dx = vec![0.0; c * h * w];
            let mut doff = vec![0.0; 2 * p];
            for ch in 0..c {
                let plane = x.channel(ch);
                let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
                for q in 0..p {
                    let gv = g.data()[ch * p + q] * inv;
                    if gv == 0.0 {
                        continue;
                    }
                    for ts in &tapsets[q * ns..(q + 1) * ns] {
                        for (tap, _, _) in ts {
                            dp[tap.idx] += gv * tap.w;
                        }
                        if let Some(gamma) = gamma {
                            let (gy, gx) = interp_grad(plane, ts);
                            doff[q] += gv * gy * gamma * rh;
                            doff[p + q] += gv * gx * gamma * rw;
                        }
                    }
                }
            }
            let mut grads = vec![Some(Tensor::from_parts(vec![c, h, w], dx))];
            if gamma.is_some() {
                grads.push(Some(Tensor::from_parts(vec![2, out, out], doff)));
            }
            grads
        })
    }
}
