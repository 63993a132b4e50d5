use std::rc::Rc;

use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and zero padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const SAME3: Conv2dSpec = Conv2dSpec { stride: 1, padding: 1 };
    pub const POINTWISE: Conv2dSpec = Conv2dSpec { stride: 1, padding: 0 };

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec == Conv2dSpec::POINTWISE
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (k, s, p) = (self.k, self.spec.stride as isize, self.spec.padding as isize);
        let p_cols = self.cols();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * p_cols..(row + 1) * p_cols];
                    for oi in 0..self.oh {
                        let ii = oi as isize * s + ki as isize - p;
                        let line = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ii as usize * self.w..(ii as usize + 1) * self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = oj as isize * s + kj as isize - p;
                            *v = if jj < 0 || jj >= self.w as isize {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let (k, s, p) = (self.k, self.spec.stride as isize, self.spec.padding as isize);
        let p_cols = self.cols();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * p_cols..(row + 1) * p_cols];
                    for oi in 0..self.oh {
                        let ii = oi as isize * s + ki as isize - p;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = ii as usize * self.w;
                        for oj in 0..self.ow {
                            let jj = oj as isize * s + kj as isize - p;
                            if jj >= 0 && jj < self.w as isize {
                                plane[base + jj as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-d convolution of an NCHW input with an `[out, in, k, k]` kernel.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: Conv2dSpec) -> Var<'g, T> {
        let (x, wt) = (self.value(), weight.value());
        let (n, cin, h, w) = x.dims4();
        let (cout, wcin, k, k2) = wt.dims4();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        assert!(
            h + 2 * spec.padding >= k && w + 2 * spec.padding >= k,
            "conv2d: input smaller than kernel"
        );
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            oh: spec.out_size(h, k),
            ow: spec.out_size(w, k),
            spec,
        };
        let (kk, pp) = (geom.rows(), geom.cols());
        let mut out = Tensor::zeros(&[n, cout, geom.oh, geom.ow]);
        let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { kk * pp }];
        for b in 0..n {
            let colv: &[T] = if geom.is_pointwise() {
                x.item(b)
            } else {
                geom.im2col(x.item(b), &mut col);
                &col
            };
            let dst = &mut out.data_mut()[b * cout * pp..(b + 1) * cout * pp];
            T::gemm(
                cout,
                kk,
                pp,
                T::one(),
                wt.data(),
                (kk, 1),
                colv,
                (pp, 1),
                T::zero(),
                dst,
                (pp, 1),
            );
        }
        if let Some(bias) = bias {
            let bv = bias.value();
            assert_eq!(bv.shape(), [cout], "conv2d: bias shape");
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bv[(i / pp) % cout];
            }
        }

        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.graph.custom(
            &inputs,
            out,
            Box::new(move |g, xs, _, needs| {
                let (x, wt) = (&xs[0], &xs[1]);
                let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut dw = needs[1].then(|| Tensor::zeros(wt.shape()));
                let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { kk * pp }];
                let mut dcol = vec![T::zero(); kk * pp];
                for b in 0..n {
                    let gb = &g.data()[b * cout * pp..(b + 1) * cout * pp];
                    if let Some(dw) = dw.as_mut() {
                        let colv: &[T] = if geom.is_pointwise() {
                            x.item(b)
                        } else {
                            geom.im2col(x.item(b), &mut col);
                            &col
                        };
                        T::gemm(
                            cout,
                            pp,
                            kk,
                            T::one(),
                            gb,
                            (pp, 1),
                            colv,
                            (1, pp),
                            T::one(),
                            dw.data_mut(),
                            (kk, 1),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dst_len = cin * h * w;
                        let dst = &mut dx.data_mut()[b * dst_len..(b + 1) * dst_len];
                        if geom.is_pointwise() {
                            T::gemm(
                                kk,
                                cout,
                                pp,
                                T::one(),
                                wt.data(),
                                (1, kk),
                                gb,
                                (pp, 1),
                                T::zero(),
                                dst,
                                (pp, 1),
                            );
                        } else {
                            T::gemm(
                                kk,
                                cout,
                                pp,
                                T::one(),
                                wt.data(),
                                (1, kk),
                                gb,
                                (pp, 1),
                                T::zero(),
                                &mut dcol,
                                (pp, 1),
                            );
                            geom.col2im(&dcol, dst);
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if xs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut db = Tensor::zeros(&[cout]);
                        for (i, &v) in g.data().iter().enumerate() {
                            db[(i / pp) % cout] += v;
                        }
                        db
                    }));
                }
                grads
            }),
        )
    }

    /// 3x3 max pooling with stride 2 and padding 1.
    pub fn max_pool3_s2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let mut arg = vec![0usize; n * c * oh * ow];
        let value = Tensor::from_fn(&[n, c, oh, ow], |o| {
            let plane = o / (oh * ow);
            let (oi, oj) = ((o % (oh * ow)) / ow, o % ow);
            let mut best: Option<(T, usize)> = None;
            for di in 0..3 {
                for dj in 0..3 {
                    let (i, j) = ((2 * oi + di) as isize - 1, (2 * oj + dj) as isize - 1);
                    if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                        continue;
                    }
                    let idx = plane * h * w + i as usize * w + j as usize;
                    if best.is_none_or(|(v, _)| x[idx] > v) {
                        best = Some((x[idx], idx));
                    }
                }
            }
            let (v, idx) = best.expect("window overlaps the input");
            arg[o] = idx;
            v
        });
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, xs, _, _| {
                let mut dx = Tensor::zeros(xs[0].shape());
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += g[o];
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Nearest-neighbour resize: output pixel `i` reads input `floor(i * in / out)`.
    pub fn resize_nearest(self, oh: usize, ow: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        if (h, w) == (oh, ow) {
            return self;
        }
        let src = move |o: usize| {
            let plane = o / (oh * ow);
            let (i, j) = ((o % (oh * ow)) / ow, o % ow);
            plane * h * w + (i * h / oh) * w + j * w / ow
        };
        let value = Tensor::from_fn(&[n, c, oh, ow], |o| x[src(o)]);
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, xs, _, _| {
                let mut dx = Tensor::zeros(xs[0].shape());
                for o in 0..g.len() {
                    dx[src(o)] += g[o];
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Adaptive average pooling to `oh x ow` bins.
    pub fn adaptive_avg_pool(self, oh: usize, ow: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let rows = Rc::new(adaptive_bins(h, oh));
        let cols = Rc::new(adaptive_bins(w, ow));
        let value = {
            let (rows, cols) = (rows.clone(), cols.clone());
            Tensor::from_fn(&[n, c, oh, ow], |o| {
                let plane = o / (oh * ow);
                let (r0, r1) = rows[(o % (oh * ow)) / ow];
                let (c0, c1) = cols[o % ow];
                let mut acc = T::zero();
                for i in r0..r1 {
                    for j in c0..c1 {
                        acc += x[plane * h * w + i * w + j];
                    }
                }
                acc / T::lit(((r1 - r0) * (c1 - c0)) as f64)
            })
        };
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, xs, _, _| {
                let mut dx = Tensor::zeros(xs[0].shape());
                for o in 0..g.len() {
                    let plane = o / (oh * ow);
                    let (r0, r1) = rows[(o % (oh * ow)) / ow];
                    let (c0, c1) = cols[o % ow];
                    let share = g[o] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                    for i in r0..r1 {
                        for j in c0..c1 {
                            dx[plane * h * w + i * w + j] += share;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// 3x3 mean filter over a reflection-padded input (same output size).
    pub fn avg_pool3_reflect(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h >= 2 && w >= 2, "reflection padding needs at least 2x2 planes");
        let ninth = T::lit(1.0 / 9.0);
        let taps = move |o: usize| {
            let plane = o / (h * w);
            let (i, j) = ((o % (h * w)) / w, o % w);
            let mut idx = [0usize; 9];
            for di in 0..3 {
                for dj in 0..3 {
                    let ii = reflect(i as isize + di as isize - 1, h);
                    let jj = reflect(j as isize + dj as isize - 1, w);
                    idx[di * 3 + dj] = plane * h * w + ii * w + jj;
                }
            }
            idx
        };
        let value = Tensor::from_fn(&[n, c, h, w], |o| taps(o).iter().map(|&s| x[s]).sum::<T>() * ninth);
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g, xs, _, _| {
                let mut dx = Tensor::zeros(xs[0].shape());
                for o in 0..g.len() {
                    let share = g[o] * ninth;
                    for s in taps(o) {
                        dx[s] += share;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn mean_spatial(self) -> Var<'g, T> {
        let (n, c, h, w) = self.value().dims4();
        self.reshape(&[n * c, h * w]).mean_per_item().reshape(&[n, c])
    }

    /// Batched matrix product of `[b, .., ..]` tensors with optional
    /// transposition of either operand.
    pub fn bmm(self, rhs: Var<'g, T>, trans_lhs: bool, trans_rhs: bool) -> Var<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape().len(), 3, "bmm lhs must be 3-d");
        assert_eq!(b.shape().len(), 3, "bmm rhs must be 3-d");
        let batch = a.shape()[0];
        assert_eq!(b.shape()[0], batch, "bmm batch mismatch");
        let (ar, ac) = (a.shape()[1], a.shape()[2]);
        let (br, bc) = (b.shape()[1], b.shape()[2]);
        let (m, ka, sa) = if trans_lhs {
            (ac, ar, (1, ac))
        } else {
            (ar, ac, (ac, 1))
        };
        let (kb, nn, sb) = if trans_rhs {
            (bc, br, (1, bc))
        } else {
            (br, bc, (bc, 1))
        };
        assert_eq!(ka, kb, "bmm inner dimension mismatch");
        let k = ka;
        let mut out = Tensor::zeros(&[batch, m, nn]);
        for p in 0..batch {
            let dst = &mut out.data_mut()[p * m * nn..(p + 1) * m * nn];
            T::gemm(
                m,
                k,
                nn,
                T::one(),
                a.item(p),
                sa,
                b.item(p),
                sb,
                T::zero(),
                dst,
                (nn, 1),
            );
        }
        self.graph.custom(
            &[self, rhs],
            out,
            Box::new(move |g, xs, _, needs| {
                let (a, b) = (&xs[0], &xs[1]);
                let mut da = needs[0].then(|| Tensor::zeros(a.shape()));
                let mut db = needs[1].then(|| Tensor::zeros(b.shape()));
                let gs = (nn, 1);
                let gt = (1, nn);
                for p in 0..batch {
                    let gp = &g.data()[p * m * nn..(p + 1) * m * nn];
                    if let Some(da) = da.as_mut() {
                        let dst = &mut da.data_mut()[p * ar * ac..(p + 1) * ar * ac];
                        if trans_lhs {
                            // stored [k, m] = op(b) · g^T
                            T::gemm(k, nn, m, T::one(), b.item(p), sb, gp, gt, T::zero(), dst, (m, 1));
                        } else {
                            // stored [m, k] = g · op(b)^T
                            T::gemm(
                                m,
                                nn,
                                k,
                                T::one(),
                                gp,
                                gs,
                                b.item(p),
                                (sb.1, sb.0),
                                T::zero(),
                                dst,
                                (k, 1),
                            );
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let dst = &mut db.data_mut()[p * br * bc..(p + 1) * br * bc];
                        if trans_rhs {
                            // stored [n, k] = g^T · op(a)
                            T::gemm(nn, m, k, T::one(), gp, gt, a.item(p), sa, T::zero(), dst, (k, 1));
                        } else {
                            // stored [k, n] = op(a)^T · g
                            T::gemm(
                                k,
                                m,
                                nn,
                                T::one(),
                                a.item(p),
                                (sa.1, sa.0),
                                gp,
                                gs,
                                T::zero(),
                                dst,
                                (nn, 1),
                            );
                        }
                    }
                }
                vec![da, db]
            }),
        )
    }

    /// Row-wise softmax of `[b, rows, cols]` restricted to the columns whose
    /// entry in `col_valid` (`[b * cols]`) is true. Masked columns get exactly
    /// zero weight; rows with no valid column are all zero.
    pub fn masked_softmax_rows(self, col_valid: Rc<Vec<bool>>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 3, "masked softmax expects [b, rows, cols]");
        let (batch, rows, cols) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(col_valid.len(), batch * cols, "column mask length");
        let mut y = Tensor::zeros(x.shape());
        for p in 0..batch {
            let valid = &col_valid[p * cols..(p + 1) * cols];
            for r in 0..rows {
                let base = (p * rows + r) * cols;
                let row = &x.data()[base..base + cols];
                let max = row
                    .iter()
                    .zip(valid)
                    .filter(|(_, &v)| v)
                    .map(|(&v, _)| v)
                    .fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for c in 0..cols {
                    if valid[c] {
                        let e = (row[c] - max).exp();
                        y[base + c] = e;
                        total += e;
                    }
                }
                for c in 0..cols {
                    y[base + c] /= total;
                }
            }
        }
        self.graph.custom(
            &[self],
            y,
            Box::new(move |g, _, y, _| {
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..batch * rows {
                    let base = r * cols;
                    let dot: T = (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                    for c in 0..cols {
                        dx[base + c] = y[base + c] * (g[base + c] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}
