//! Element-wise ops, matrix products, softmax, reductions and fused losses.

use crate::tensor::{gemm, Tensor};

use super::Var;

/// Which axis of a 2-D matrix a softmax normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Every row sums to one.
    Row,
    /// Every column sums to one.
    Column,
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape
            .push(out, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape
            .push(out, &[self, other], |g| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push(out, &[self, other], move |g| {
            vec![
                Some(g.zip_map(&b, |g, y| g * y)),
                Some(g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape.push(out, &[self], move |g| vec![Some(g.scale(s))])
    }

    /// `a·x + b` element-wise with constant `a`, `b`.
    pub fn affine(self, a: f64, b: f64) -> Var<'t> {
        let out = self.value().map(|v| a * v + b);
        self.tape.push(out, &[self], move |g| vec![Some(g.scale(a))])
    }

    /// Multiply by a learnable scalar (a `[1]` tensor).
    pub fn scaled_by(self, s: Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "scaled_by expects a scalar");
        let k = sv.item();
        let out = x.scale(k);
        self.tape.push(out, &[self, s], move |g| {
            vec![Some(g.scale(k)), Some(Tensor::scalar(g.dot(&x)))]
        })
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape.push(out, &[self], move |g| {
            vec![Some(g.zip_map(&x, |g, v| if v > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = self.value().map(sigmoid);
        let yc = y.clone();
        self.tape.push(y, &[self], move |g| {
            vec![Some(g.zip_map(&yc, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = x.reshaped(shape);
        self.tape.push(out, &[self], move |g| vec![Some(g.reshaped(&old))])
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Element `i` of the flattened tensor as a `[1]` scalar.
    pub fn element(self, i: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(Tensor::scalar(x.data()[i]), &[self], move |g| {
            let mut d = Tensor::zeros(&shape);
            d.data_mut()[i] = g.item();
            vec![Some(d)]
        })
    }

    /// `op(self) · op(other)` for 2-D operands; `ta`/`tb` transpose.
    pub fn matmul_ex(self, ta: bool, other: Var<'t>, tb: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (ar, ac) = dims2(&a);
        let (br, bc) = dims2(&b);
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let out = Tensor::from_parts(vec![m, n], gemm(a.data(), ar, ac, ta, b.data(), br, bc, tb));
        self.tape.push(out, &[self, other], move |g| {
            let gd = g.data();
            let da = if ta {
                // A stored [k, m]: dA = op(B) · gᵀ
                gemm(b.data(), br, bc, tb, gd, m, n, true)
            } else {
                // dA = g · op(B)ᵀ
                gemm(gd, m, n, false, b.data(), br, bc, !tb)
            };
            let db = if tb {
                // B stored [n, k]: dB = gᵀ · op(A)
                gemm(gd, m, n, true, a.data(), ar, ac, ta)
            } else {
                // dB = op(A)ᵀ · g
                gemm(a.data(), ar, ac, !ta, gd, m, n, false)
            };
            vec![
                Some(Tensor::from_parts(vec![ar, ac], da)),
                Some(Tensor::from_parts(vec![br, bc], db)),
            ]
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_ex(false, other, false)
    }

    /// Add a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let (m, n) = dims2(&x);
        assert_eq!(b.len(), n, "add_row_bias: bias length");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.tape.push(out, &[self, bias], move |g| {
            let mut db = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            let _ = m;
            vec![Some(g.clone()), Some(Tensor::from_parts(vec![n], db))]
        })
    }

    /// Softmax of a 2-D matrix along `axis`.
    pub fn softmax(self, axis: SoftmaxAxis) -> Var<'t> {
        let x = self.value();
        let (r, c) = dims2(&x);
        let y = softmax2d(&x, r, c, axis);
        let yc = y.clone();
        self.tape.push(y, &[self], move |g| {
            // dx = y ∘ (g − Σ_axis g∘y)
            let (yd, gd) = (yc.data(), g.data());
            let mut dx = vec![0.0; r * c];
            match axis {
                SoftmaxAxis::Row => {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let s: f64 = yd[row.clone()].iter().zip(&gd[row.clone()]).map(|(y, g)| y * g).sum();
                        for j in row {
                            dx[j] = yd[j] * (gd[j] - s);
                        }
                    }
                }
                SoftmaxAxis::Column => {
                    let mut s = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += yd[i * c + j] * gd[i * c + j];
                        }
                    }
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            dx[k] = yd[k] * (gd[k] - s[j]);
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![r, c], dx))]
        })
    }

    /// Weighted smooth-L1 (Huber with transition `beta`) against a constant
    /// target: `Σ wᵢ · sl1(xᵢ − tᵢ)`.
    pub fn smooth_l1(self, target: &Tensor, weight: &Tensor, beta: f64) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "smooth_l1: target shape");
        assert_eq!(x.shape(), weight.shape(), "smooth_l1: weight shape");
        let mut loss = 0.0;
        let mut dx = vec![0.0; x.len()];
        for i in 0..x.len() {
            let w = weight.data()[i];
            if w == 0.0 {
                continue;
            }
            let d = x.data()[i] - target.data()[i];
            if d.abs() < beta {
                loss += w * 0.5 * d * d / beta;
                dx[i] = w * d / beta;
            } else {
                loss += w * (d.abs() - 0.5 * beta);
                dx[i] = w * d.signum();
            }
        }
        let shape = x.shape().to_vec();
        let dx = Tensor::from_parts(shape, dx);
        self.tape.push(Tensor::scalar(loss), &[self], move |g| {
            vec![Some(dx.scale(g.item()))]
        })
    }

    /// Weighted binary cross-entropy on logits: `Σ wᵢ · BCE(σ(xᵢ), tᵢ)`.
    pub fn bce_with_logits(self, target: &Tensor, weight: &Tensor) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "bce: target shape");
        assert_eq!(x.shape(), weight.shape(), "bce: weight shape");
        let mut loss = 0.0;
        let mut dx = vec![0.0; x.len()];
        for i in 0..x.len() {
            let w = weight.data()[i];
            if w == 0.0 {
                continue;
            }
            let (v, t) = (x.data()[i], target.data()[i]);
            loss += w * (v.max(0.0) - v * t + (-v.abs()).exp().ln_1p());
            dx[i] = w * (sigmoid(v) - t);
        }
        let dx = Tensor::from_parts(x.shape().to_vec(), dx);
        self.tape.push(Tensor::scalar(loss), &[self], move |g| {
            vec![Some(dx.scale(g.item()))]
        })
    }

    /// Two-class negative log-likelihood over anchor-major score maps.
    ///
    /// `self` is `[2k, H, W]` with background logits in channels `0..k` and
    /// foreground logits in `k..2k`. `labels` and `weight` are `[k, H, W]`;
    /// labels are 0 or 1. Returns `Σ w · (−log softmax(label))`.
    pub fn two_class_nll(self, labels: &Tensor, weight: &Tensor) -> Var<'t> {
        let x = self.value();
        let n = labels.len();
        assert_eq!(x.len(), 2 * n, "two_class_nll: logits must have 2k channels");
        assert_eq!(weight.len(), n);
        let mut loss = 0.0;
        let mut dx = vec![0.0; 2 * n];
        for i in 0..n {
            let w = weight.data()[i];
            if w == 0.0 {
                continue;
            }
            let (l0, l1) = (x.data()[i], x.data()[n + i]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let (p0, p1) = ((l0 - lse).exp(), (l1 - lse).exp());
            let fg = labels.data()[i] > 0.5;
            loss += w * (lse - if fg { l1 } else { l0 });
            dx[i] = w * (p0 - if fg { 0.0 } else { 1.0 });
            dx[n + i] = w * (p1 - if fg { 1.0 } else { 0.0 });
        }
        let dx = Tensor::from_parts(x.shape().to_vec(), dx);
        self.tape.push(Tensor::scalar(loss), &[self], move |g| {
            vec![Some(dx.scale(g.item()))]
        })
    }
}

/// Sum of several same-shaped variables.
pub fn sum_all<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let mut it = vars.iter().copied();
    let first = it.next().expect("sum_all of nothing");
    it.fold(first, |acc, v| acc.add(v))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        s => panic!("expected a 2-D matrix, got {s:?}"),
    }
}

pub(crate) fn softmax2d(x: &Tensor, r: usize, c: usize, axis: SoftmaxAxis) -> Tensor {
    let xd = x.data();
    let mut y = vec![0.0; r * c];
    match axis {
        SoftmaxAxis::Row => {
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    y[i * c + j] = e;
                    s += e;
                }
                for v in &mut y[i * c..(i + 1) * c] {
                    *v /= s;
                }
            }
        }
        SoftmaxAxis::Column => {
            let mut m = vec![f64::NEG_INFINITY; c];
            for i in 0..r {
                for j in 0..c {
                    m[j] = m[j].max(xd[i * c + j]);
                }
            }
            let mut s = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    let e = (xd[i * c + j] - m[j]).exp();
                    y[i * c + j] = e;
                    s[j] += e;
                }
            }
            for i in 0..r {
                for j in 0..c {
                    y[i * c + j] /= s[j];
                }
            }
        }
    }
    Tensor::from_parts(vec![r, c], y)
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

    #[test]
    fn piecewise_check_skips_relu_kinks() {
        let mut store = crate::params::ParamStore::new();
        store.insert("p", Tensor::new(&[4], vec![0.0, 0.7, -0.3, 1.5]).unwrap());
        let r = crate::autograd::gradcheck::check_params_piecewise(&store, &["p"], 4, 1e-5, 1e-4, |tape, s| {
            let p = tape.param(s, "p");
            p.relu().mul(p).sum()
        });
        assert_eq!((r.checked, r.kinks), (3, 1));
        assert!(r.worst < 1e-6, "{r:?}");
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(if ta { &[4, 3] } else { &[3, 4] }, &mut rng);
            let b = rand_tensor(if tb { &[5, 4] } else { &[4, 5] }, &mut rng);
            let w = rand_tensor(&[3, 5], &mut rng);
            let err = check(&[a, b], 20, 1e-6, |tape, v| {
                let wv = tape.constant(w.clone());
                v[0].matmul_ex(ta, v[1], tb).mul(wv).sum()
            });
            assert!(err < 1e-6, "ta={ta} tb={tb} err={err}");
        }
    }

    #[test]
    fn softmax_gradients_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[4, 6], &mut rng);
        let w = rand_tensor(&[4, 6], &mut rng);
        for axis in [SoftmaxAxis::Row, SoftmaxAxis::Column] {
            let y = softmax2d(&x, 4, 6, axis);
            match axis {
                SoftmaxAxis::Row => {
                    for row in y.data().chunks(6) {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
                SoftmaxAxis::Column => {
                    for j in 0..6 {
                        let s: f64 = (0..4).map(|i| y.data()[i * 6 + j]).sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
            let err = check(&[x.clone()], 24, 1e-6, |tape, v| {
                v[0].softmax(axis).mul(tape.constant(w.clone())).sum()
            });
            assert!(err < 1e-6, "{axis:?}: {err}");
        }
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 2, 3], &mut rng);
        let t = rand_tensor(&[2, 2, 3], &mut rng);
        let w = Tensor::from_fn(&[2, 2, 3], |i| (i % 3) as f64 * 0.5);
        let err = check(&[x.clone()], 12, 1e-6, |_, v| v[0].smooth_l1(&t, &w, 0.3));
        assert!(err < 1e-5, "smooth_l1 {err}");
        let tb = Tensor::from_fn(&[2, 2, 3], |i| (i % 2) as f64);
        let err = check(&[x.clone()], 12, 1e-6, |_, v| v[0].bce_with_logits(&tb, &w));
        assert!(err < 1e-6, "bce {err}");
        let labels = Tensor::from_fn(&[1, 2, 3], |i| (i % 2) as f64);
        let w6 = Tensor::from_fn(&[1, 2, 3], |i| 1.0 + i as f64);
        let err = check(&[x], 12, 1e-6, |_, v| v[0].two_class_nll(&labels, &w6));
        assert!(err < 1e-6, "nll {err}");
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 8, 8]));
        let t = Tensor::ones(&[1, 8, 8]);
        let w = Tensor::full(&[1, 8, 8], 1.0 / 64.0);
        let l = x.bce_with_logits(&t, &w).value().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn scaled_by_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 4], &mut rng);
        let s = Tensor::scalar(0.7);
        let b = rand_tensor(&[4], &mut rng);
        let w = rand_tensor(&[3, 4], &mut rng);
        let err = check(&[x, s, b], 12, 1e-6, |tape, v| {
            v[0].scaled_by(v[1])
                .add_row_bias(v[2])
                .relu()
                .sigmoid()
                .mul(tape.constant(w.clone()))
                .sum()
        });
        assert!(err < 1e-5, "{err}");
    }
}
