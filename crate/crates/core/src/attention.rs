//! Deformable Siamese attention.
//!
//! For a feature map `X ∈ R^{C×H×W}` with `X̄ ∈ R^{C×N}`, `N = HW`:
//!
//! * spatial self-attention: `A = softmax_col(Q̄ᵀK̄)`, `out = α·V̄A + X̄`
//!   with `Q, K` 1×1 projections to `C/8` channels and `V` a 1×1 `C → C`;
//! * channel self-attention: `A = softmax(X̄X̄ᵀ)`, `out = β·AX̄ + X̄`;
//! * cross-attention: the search branch gets `γx·softmax_row(Z̄Z̄ᵀ)X̄ + X̄`,
//!   the template branch `γz·softmax_row(X̄X̄ᵀ)Z̄ + Z̄`.
//!
//! Per branch the three maps are summed and passed through a 3×3 deformable
//! convolution whose offsets come from a parallel plain 3×3 convolution
//! (zero initialized). A disabled term contributes its input unchanged.

use rand::Rng;

use crate::autograd::{ConvGeometry, SoftmaxAxis, Tape, Var};
use crate::config::AttentionConfig;
use crate::error::{shape_err, Result};
use crate::nn::Conv2d;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Result of one attention term: output feature map and its attention matrix.
#[derive(Clone, Copy, Debug)]
pub struct Attended<'t> {
    pub out: Var<'t>,
    pub map: Var<'t>,
}

fn flat<'t>(x: Var<'t>) -> (Var<'t>, [usize; 3]) {
    let s = x.shape();
    let dims = [s[0], s[1], s[2]];
    (x.reshape(&[s[0], s[1] * s[2]]), dims)
}

/// Tape-level query/key/value projections.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars<'t> {
    pub q_w: Var<'t>,
    pub q_b: Var<'t>,
    pub k_w: Var<'t>,
    pub k_b: Var<'t>,
    pub v_w: Var<'t>,
    pub v_b: Var<'t>,
}

pub fn spatial_self_attention<'t>(x: Var<'t>, proj: &ProjectionVars<'t>, alpha: Var<'t>) -> Attended<'t> {
    let g = ConvGeometry::new(1, 1, 0, 1);
    let (xf, dims) = flat(x);
    let n = dims[1] * dims[2];
    let q = x.conv2d(proj.q_w, Some(proj.q_b), g);
    let k = x.conv2d(proj.k_w, Some(proj.k_b), g);
    let v = x.conv2d(proj.v_w, Some(proj.v_b), g);
    let cq = q.shape()[0];
    let (q, k, v) = (q.reshape(&[cq, n]), k.reshape(&[cq, n]), v.reshape(&[dims[0], n]));
    let map = q.matmul_ex(true, k, false).softmax(SoftmaxAxis::Column);
    let out = v.matmul(map).scaled_by(alpha).add(xf).reshape(&dims);
    Attended { out, map }
}

pub fn channel_self_attention<'t>(x: Var<'t>, beta: Var<'t>, axis: SoftmaxAxis) -> Attended<'t> {
    let (xf, dims) = flat(x);
    let map = xf.matmul_ex(false, xf, true).softmax(axis);
    let out = map.matmul(xf).scaled_by(beta).add(xf).reshape(&dims);
    Attended { out, map }
}

/// Channel-wise cross-attention. Returns `(template, search)` outputs.
pub fn cross_attention<'t>(z: Var<'t>, x: Var<'t>, gamma_z: Var<'t>, gamma_x: Var<'t>) -> (Attended<'t>, Attended<'t>) {
    let (zf, zd) = flat(z);
    let (xf, xd) = flat(x);
    assert_eq!(zd[0], xd[0], "cross_attention: channel mismatch");
    let a_from_z = zf.matmul_ex(false, zf, true).softmax(SoftmaxAxis::Row);
    let a_from_x = xf.matmul_ex(false, xf, true).softmax(SoftmaxAxis::Row);
    let x_out = a_from_z.matmul(xf).scaled_by(gamma_x).add(xf).reshape(&xd);
    let z_out = a_from_x.matmul(zf).scaled_by(gamma_z).add(zf).reshape(&zd);
    (Attended { out: z_out, map: a_from_x }, Attended { out: x_out, map: a_from_z })
}

/// 3×3 deformable convolution with offsets predicted from the input.
/// Returns the output and the predicted offsets.
pub fn deformable_conv3x3<'t>(
    x: Var<'t>,
    offset_w: Var<'t>,
    offset_b: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let g = ConvGeometry::same(3, 1);
    let off = x.conv2d(offset_w, Some(offset_b), g);
    (x.deform_conv2d(off, w, Some(b), g), off)
}

/// Parameter layout for one stage.
#[derive(Clone, Debug)]
pub struct DsaBlock {
    pub prefix: String,
    pub channels: usize,
    pub cfg: AttentionConfig,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    conv: [Conv2d; 2],
    offset: [Conv2d; 2],
}

const BRANCHES: [&str; 2] = ["z", "x"];

/// Per-branch outputs plus the intermediate maps for inspection.
#[derive(Clone, Copy, Debug)]
pub struct DsaVars<'t> {
    pub z: Var<'t>,
    pub x: Var<'t>,
    pub spatial: Option<[Attended<'t>; 2]>,
    pub channel: Option<[Attended<'t>; 2]>,
    pub cross: Option<[Attended<'t>; 2]>,
}

impl DsaBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        if channels % 8 != 0 || channels == 0 {
            return shape_err(format!("attention channels {channels} not divisible by 8"));
        }
        let prefix = prefix.into();
        let c = channels;
        let one = ConvGeometry::new(1, 1, 0, 1);
        let three = ConvGeometry::same(3, 1);
        Ok(Self {
            q: Conv2d::new(format!("{prefix}.q"), c, c / 8, one, true),
            k: Conv2d::new(format!("{prefix}.k"), c, c / 8, one, true),
            v: Conv2d::new(format!("{prefix}.v"), c, c, one, true),
            conv: BRANCHES.map(|b| Conv2d::new(format!("{prefix}.{b}.conv"), c, c, three, true)),
            offset: BRANCHES.map(|b| Conv2d::new(format!("{prefix}.{b}.offset"), c, 18, three, true)),
            prefix,
            channels,
            cfg: cfg.clone(),
        })
    }

    fn scalar(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for p in [&self.q, &self.k, &self.v] {
            p.init(store, Init::FanIn { gain: 1.0 }, rng);
        }
        for name in ["alpha", "beta", "gamma_z", "gamma_x"] {
            store.insert(self.scalar(name), Tensor::scalar(0.0));
        }
        let c = self.channels;
        // The summed input carries three copies of X at start, so the conv
        // begins near identity / 3.
        let terms = 3.0;
        for (conv, off) in self.conv.iter().zip(&self.offset) {
            conv.init(store, Init::FanIn { gain: 0.5 }, rng);
            let w = store.get_mut(&conv.weight_name()).expect("just inserted");
            for ch in 0..c {
                w.data_mut()[((ch * c + ch) * 3 + 1) * 3 + 1] += 1.0 / terms;
            }
            off.init(store, Init::Zeros, rng);
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>, x: Var<'t>) -> DsaVars<'t> {
        let cfg = &self.cfg;
        if !cfg.any_enabled() {
            return DsaVars {
                z,
                x,
                spatial: None,
                channel: None,
                cross: None,
            };
        }
        let p = |n: &str| tape.param(store, n);
        let inputs = [z, x];
        let spatial = cfg.spatial_sa.then(|| {
            let proj = ProjectionVars {
                q_w: p(&self.q.weight_name()),
                q_b: p(&self.q.bias_name()),
                k_w: p(&self.k.weight_name()),
                k_b: p(&self.k.bias_name()),
                v_w: p(&self.v.weight_name()),
                v_b: p(&self.v.bias_name()),
            };
            let alpha = p(&self.scalar("alpha"));
            inputs.map(|f| spatial_self_attention(f, &proj, alpha))
        });
        let channel = cfg.channel_sa.then(|| {
            let beta = p(&self.scalar("beta"));
            inputs.map(|f| channel_self_attention(f, beta, cfg.channel_softmax))
        });
        let cross = cfg.cross_attn.then(|| {
            let (zo, xo) = cross_attention(z, x, p(&self.scalar("gamma_z")), p(&self.scalar("gamma_x")));
            [zo, xo]
        });
        let outs: [Var<'t>; 2] = std::array::from_fn(|b| {
            let terms = [
                spatial.map_or(inputs[b], |s| s[b].out),
                channel.map_or(inputs[b], |s| s[b].out),
                cross.map_or(inputs[b], |s| s[b].out),
            ];
            let conv = |t: Var<'t>| -> Var<'t> {
                let w = p(&self.conv[b].weight_name());
                let bias = p(&self.conv[b].bias_name());
                if cfg.deform_conv {
                    let ow = p(&self.offset[b].weight_name());
                    let ob = p(&self.offset[b].bias_name());
                    deformable_conv3x3(t, ow, ob, w, bias).0
                } else {
                    t.conv2d(w, Some(bias), ConvGeometry::same(3, 1))
                }
            };
            if cfg.conv_after_sum {
                conv(terms[0].add(terms[1]).add(terms[2]))
            } else {
                conv(terms[0]).add(conv(terms[1])).add(conv(terms[2]))
            }
        });
        DsaVars {
            z: outs[0],
            x: outs[1],
            spatial,
            channel,
            cross,
        }
    }
}

/// Dense projection weights for the tensor-level API.
#[derive(Clone, Debug)]
pub struct ProjectionSet {
    pub query: (Tensor, Tensor),
    pub key: (Tensor, Tensor),
    pub value: (Tensor, Tensor),
}

impl ProjectionSet {
    pub fn random(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % 8 != 0 || channels == 0 {
            return shape_err(format!("channels {channels} not divisible by 8"));
        }
        let c = channels;
        let mut mk = |co: usize| {
            (
                Init::FanIn { gain: 1.0 }.sample(&[co, c, 1, 1], c, rng),
                Init::FanIn { gain: 0.1 }.sample(&[co], 1, rng),
            )
        };
        Ok(Self {
            query: mk(c / 8),
            key: mk(c / 8),
            value: mk(c),
        })
    }

    fn bind<'t>(&self, tape: &'t Tape) -> ProjectionVars<'t> {
        ProjectionVars {
            q_w: tape.constant(self.query.0.clone()),
            q_b: tape.constant(self.query.1.clone()),
            k_w: tape.constant(self.key.0.clone()),
            k_b: tape.constant(self.key.1.clone()),
            v_w: tape.constant(self.value.0.clone()),
            v_b: tape.constant(self.value.1.clone()),
        }
    }

    fn check(&self, c: usize) -> Result<()> {
        let ok = c % 8 == 0
            && self.query.0.shape() == [c / 8, c, 1, 1]
            && self.key.0.shape() == [c / 8, c, 1, 1]
            && self.value.0.shape() == [c, c, 1, 1];
        if ok {
            Ok(())
        } else {
            shape_err(format!("projections do not fit {c} channels (C must be divisible by 8)"))
        }
    }
}

fn eval_pair(a: Attended<'_>) -> (Tensor, Tensor) {
    ((*a.out.value()).clone(), (*a.map.value()).clone())
}

/// Spatial self-attention on plain tensors; returns `(output, N×N map)`.
pub fn spatial_self_attention_t(x: &Tensor, proj: &ProjectionSet, alpha: f64) -> Result<(Tensor, Tensor)> {
    let (c, _, _) = x.dims3()?;
    proj.check(c)?;
    let tape = Tape::inference();
    let a = spatial_self_attention(tape.constant(x.clone()), &proj.bind(&tape), tape.constant(Tensor::scalar(alpha)));
    Ok(eval_pair(a))
}

/// Channel self-attention on plain tensors; returns `(output, C×C map)`.
pub fn channel_self_attention_t(x: &Tensor, beta: f64, axis: SoftmaxAxis) -> Result<(Tensor, Tensor)> {
    x.dims3()?;
    let tape = Tape::inference();
    let a = channel_self_attention(tape.constant(x.clone()), tape.constant(Tensor::scalar(beta)), axis);
    Ok(eval_pair(a))
}

/// Cross-attention on plain tensors; returns `((z_out, map), (x_out, map))`.
#[allow(clippy::type_complexity)]
pub fn cross_attention_t(z: &Tensor, x: &Tensor, gamma_z: f64, gamma_x: f64) -> Result<((Tensor, Tensor), (Tensor, Tensor))> {
    let (cz, _, _) = z.dims3()?;
    let (cx, _, _) = x.dims3()?;
    if cz != cx {
        return shape_err(format!("cross-attention channel mismatch: {cz} vs {cx}"));
    }
    let tape = Tape::inference();
    let (zo, xo) = cross_attention(
        tape.constant(z.clone()),
        tape.constant(x.clone()),
        tape.constant(Tensor::scalar(gamma_z)),
        tape.constant(Tensor::scalar(gamma_x)),
    );
    Ok((eval_pair(zo), eval_pair(xo)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_scalars_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&[8, 3, 4], &mut rng);
        let z = rand_t(&[8, 2, 2], &mut rng);
        let proj = ProjectionSet::random(8, &mut rng).unwrap();
        assert_eq!(spatial_self_attention_t(&x, &proj, 0.0).unwrap().0, x);
        assert_eq!(channel_self_attention_t(&x, 0.0, SoftmaxAxis::Row).unwrap().0, x);
        let ((zo, _), (xo, _)) = cross_attention_t(&z, &x, 0.0, 0.0).unwrap();
        assert_eq!((zo, xo), (z, x));
    }

    #[test]
    fn maps_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&[8, 4, 4], &mut rng);
        let proj = ProjectionSet::random(8, &mut rng).unwrap();
        let (_, a) = spatial_self_attention_t(&x, &proj, 1.0).unwrap();
        assert_eq!(a.shape(), &[16, 16]);
        for j in 0..16 {
            let s: f64 = (0..16).map(|i| a.data()[i * 16 + j]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let z = rand_t(&[6, 3, 3], &mut rng);
        let xx = rand_t(&[6, 5, 5], &mut rng);
        let (_, (_, m)) = cross_attention_t(&z, &xx, 1.0, 1.0).unwrap();
        assert_eq!(m.shape(), &[6, 6]);
        for r in m.data().chunks(6) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_multiple_of_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ProjectionSet::random(6, &mut rng).is_err());
        assert!(DsaBlock::new("d", 12, &AttentionConfig::default()).is_err());
        let z = Tensor::zeros(&[4, 2, 2]);
        let x = Tensor::zeros(&[3, 2, 2]);
        assert!(cross_attention_t(&z, &x, 0.0, 0.0).is_err());
    }

    #[test]
    fn block_shapes_and_bypass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = DsaBlock::new("dsa3", 16, &AttentionConfig::default()).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let tape = Tape::inference();
        let z = tape.constant(rand_t(&[16, 4, 4], &mut rng));
        let x = tape.constant(rand_t(&[16, 9, 9], &mut rng));
        let out = block.forward(&tape, &store, z, x);
        assert_eq!(out.z.shape(), vec![16, 4, 4]);
        assert_eq!(out.x.shape(), vec![16, 9, 9]);
        let off = AttentionConfig {
            spatial_sa: false,
            channel_sa: false,
            cross_attn: false,
            deform_conv: false,
            ..AttentionConfig::default()
        };
        let bypass = DsaBlock::new("dsa3", 16, &off).unwrap().forward(&tape, &store, z, x);
        assert_eq!(bypass.x.id(), x.id());
    }

    #[test]
    fn block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = DsaBlock::new("d", 8, &AttentionConfig::default()).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        for n in ["d.alpha", "d.beta", "d.gamma_z", "d.gamma_x"] {
            store.set(n, Tensor::scalar(0.3)).unwrap();
        }
        // off-integer sampling positions keep the bilinear taps differentiable
        let ow = Init::FanIn { gain: 0.2 }.sample(&[18, 8, 3, 3], 72, &mut rng);
        store.set("d.x.offset.w", ow.clone()).unwrap();
        store.set("d.z.offset.w", ow).unwrap();
        let probe = rand_t(&[8, 4, 4], &mut rng);
        let z = rand_t(&[8, 3, 3], &mut rng);
        let x = rand_t(&[8, 4, 4], &mut rng);
        let names = ["d.alpha", "d.beta", "d.gamma_z", "d.gamma_x", "d.q.w", "d.k.w", "d.v.w", "d.x.offset.w", "d.z.conv.w"];
        let err = gradcheck::check_params(&store, &names, 10, 1e-5, |tape, s| {
            let out = block.forward(tape, s, tape.constant(z.clone()), tape.constant(x.clone()));
            out.x.mul(tape.constant(probe.clone())).sum().add(out.z.sum())
        });
        assert!(err < 1e-5, "relative error {err}");
    }
}
