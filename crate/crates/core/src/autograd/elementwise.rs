use std::rc::Rc;

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let value = self.value().map(f);
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, xs, y, _| {
                let x = &xs[0];
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= df(x[i], y[i]);
                }
                vec![Some(gx)]
            }),
        )
    }

    fn binary(
        self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "binary op shape mismatch");
        let value = a.zip_map(&b, f);
        self.graph.custom(
            &[self, other],
            value,
            Box::new(move |g, xs, _, needs| {
                let (a, b) = (&xs[0], &xs[1]);
                let side = |d: &dyn Fn(T, T) -> T| Tensor::from_fn(g.shape(), |i| g[i] * d(a[i], b[i]));
                vec![needs[0].then(|| side(&da)), needs[1].then(|| side(&db))]
            }),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a / b, |_, b| b.recip(), |a, b| -a / (b * b))
    }

    /// Element-wise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(
            other,
            |a, b| if b < a { b } else { a },
            |a, b| if b < a { T::zero() } else { T::one() },
            |a, b| if b < a { T::one() } else { T::zero() },
        )
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.mul_scalar(-T::one())
    }

    pub fn recip(self) -> Var<'g, T> {
        self.unary(|x| x.recip(), |_, y| -y * y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// Square root with a zero gradient at zero.
    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(
            |x| x.sqrt(),
            |_, y| {
                if y > T::zero() {
                    T::lit(0.5) / y
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| x.recip())
    }

    /// Absolute value with a zero subgradient at zero.
    pub fn abs(self) -> Var<'g, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn elu(self) -> Var<'g, T> {
        self.unary(
            |x| if x > T::zero() { x } else { x.exp_m1() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    /// Zeroes entries where `keep` is false. Masked entries are replaced, not
    /// multiplied, so non-finite values there never leak.
    pub fn mask(self, keep: Rc<Vec<bool>>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.len(), keep.len(), "mask length");
        let value = Tensor::from_fn(x.shape(), |i| if keep[i] { x[i] } else { T::zero() });
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, _, _, _| {
                vec![Some(Tensor::from_fn(
                    g.shape(),
                    |i| {
                        if keep[i] {
                            g[i]
                        } else {
                            T::zero()
                        }
                    },
                ))]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let value = (*self.value()).clone().reshape(shape);
        self.graph.custom(
            &[self],
            value,
            Box::new(|g, xs, _, _| vec![Some(g.clone().reshape(xs[0].shape()))]),
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let value = Tensor::scalar(self.value().sum());
        self.graph.custom(
            &[self],
            value,
            Box::new(|g, xs, _, _| vec![Some(Tensor::full(xs[0].shape(), g[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::lit(self.value().len() as f64);
        self.sum().mul_scalar(n.recip())
    }

    /// Mean over the entries where `keep` is true; zero when none are.
    pub fn masked_mean(self, keep: Rc<Vec<bool>>) -> Var<'g, T> {
        let count = keep.iter().filter(|&&k| k).count();
        let masked = self.mask(keep);
        if count == 0 {
            masked.sum().mul_scalar(T::zero())
        } else {
            masked.sum().mul_scalar(T::lit(count as f64).recip())
        }
    }

    /// `[n, ...] -> [n]` mean over everything but the leading axis.
    pub fn mean_per_item(self) -> Var<'g, T> {
        let x = self.value();
        let n = x.shape()[0];
        let inner = x.len() / n;
        let scale = T::lit(inner as f64).recip();
        let value = Tensor::from_fn(&[n], |b| x.item(b).iter().copied().sum::<T>() * scale);
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, xs, _, _| {
                let shape = xs[0].shape();
                vec![Some(Tensor::from_fn(shape, |i| g[i / inner] * scale))]
            }),
        )
    }

    /// `[n, ...] * [n]`: scales every batch item by its own factor.
    pub fn mul_per_item(self, factors: Var<'g, T>) -> Var<'g, T> {
        let (x, s) = (self.value(), factors.value());
        let n = x.shape()[0];
        assert_eq!(s.shape(), [n], "one factor per batch item");
        let inner = x.len() / n;
        let value = Tensor::from_fn(x.shape(), |i| x[i] * s[i / inner]);
        self.graph.custom(
            &[self, factors],
            value,
            Box::new(move |g, xs, _, needs| {
                let (x, s) = (&xs[0], &xs[1]);
                let gx = needs[0].then(|| Tensor::from_fn(x.shape(), |i| g[i] * s[i / inner]));
                let gs = needs[1]
                    .then(|| Tensor::from_fn(&[n], |b| (b * inner..(b + 1) * inner).map(|i| g[i] * x[i]).sum()));
                vec![gx, gs]
            }),
        )
    }

    /// `[n, c, h, w] -> [n, 1, h, w]` mean over channels.
    pub fn mean_channels(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let scale = T::lit(c as f64).recip();
        let mut value = Tensor::zeros(&[n, 1, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let dst = &mut value.data_mut()[b * hw..(b + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * scale;
                }
            }
        }
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, xs, _, _| {
                vec![Some(Tensor::from_fn(xs[0].shape(), |i| {
                    let b = i / (c * hw);
                    g[b * hw + i % hw] * scale
                }))]
            }),
        )
    }

    /// Forward difference along width: `x[.., j + 1] - x[.., j]`.
    pub fn diff_x(self) -> Var<'g, T> {
        self.forward_diff(true)
    }

    /// Forward difference along height: `x[.., i + 1, :] - x[.., i, :]`.
    pub fn diff_y(self) -> Var<'g, T> {
        self.forward_diff(false)
    }

    fn forward_diff(self, along_x: bool) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = if along_x { (h, w - 1) } else { (h - 1, w) };
        let step = if along_x { 1 } else { w };
        let src = move |p: usize, i: usize, j: usize| p * h * w + i * w + j;
        let value = Tensor::from_fn(&[n, c, oh, ow], |k| {
            let (p, r) = (k / (oh * ow), k % (oh * ow));
            let s = src(p, r / ow, r % ow);
            x[s + step] - x[s]
        });
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, xs, _, _| {
                let mut gx = Tensor::zeros(xs[0].shape());
                for k in 0..g.len() {
                    let (p, r) = (k / (oh * ow), k % (oh * ow));
                    let s = src(p, r / ow, r % ow);
                    gx[s + step] += g[k];
                    gx[s] -= g[k];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenates NCHW tensors along channels.
    pub fn concat_channels(parts: &[Var<'g, T>]) -> Var<'g, T> {
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat spatial mismatch");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for b in 0..n {
            let mut offset = 0;
            for (v, &c) in values.iter().zip(&chans) {
                let dst = (b * total + offset) * hw;
                out.data_mut()[dst..dst + c * hw].copy_from_slice(v.item(b));
                offset += c;
            }
        }
        graph.custom(
            parts,
            out,
            Box::new(move |g, _, _, needs| {
                let mut offset = 0;
                chans
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let start = offset;
                        offset += c;
                        need.then(|| {
                            let mut part = Vec::with_capacity(n * c * hw);
                            for b in 0..n {
                                let src = (b * total + start) * hw;
                                part.extend_from_slice(&g.data()[src..src + c * hw]);
                            }
                            Tensor::from_vec(&[n, c, h, w], part)
                        })
                    })
                    .collect()
            }),
        )
    }
}

impl<T: Scalar> Graph<T> {
    /// Sum of several same-shaped vars.
    pub fn add_all<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = acc.add(p);
        }
        acc
    }
}
