//! Forward definitions of the recorded operations.

use std::sync::Arc;

use crate::conv::{im2col, ConvGeom};
use crate::error::dim_err;
use crate::graph::{sigmoid, LinearOp, Op};
use crate::{AutodiffError, Graph, Real, Result, Tensor, Var};

/// Indices selected by a budgeted top-k: every `forced` index, then the
/// largest remaining scores. Ties go to the lower index.
pub fn top_k_with_forced<T: Real>(
    scores: &[T],
    budget: usize,
    forced: &[usize],
) -> Result<Vec<bool>> {
    let n = scores.len();
    if budget > n {
        return Err(AutodiffError::Validation(format!(
            "budget {budget} exceeds length {n}"
        )));
    }
    let mut sel = vec![false; n];
    for &f in forced {
        if f >= n {
            return Err(AutodiffError::Validation(format!(
                "forced index {f} out of range"
            )));
        }
        sel[f] = true;
    }
    let n_forced = sel.iter().filter(|&&s| s).count();
    if n_forced > budget {
        return Err(AutodiffError::Validation(format!(
            "{n_forced} forced indices exceed budget {budget}"
        )));
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !sel[i]).collect();
    // stable sort keeps ascending index order among equal scores
    rest.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in rest.iter().take(budget - n_forced) {
        sel[i] = true;
    }
    Ok(sel)
}

impl<T: Real> Graph<T> {
    fn shape_of(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape_of(a),
                self.shape_of(b)
            ));
        }
        Ok(())
    }

    fn scalar_check(&self, v: Var, what: &str) -> Result<T> {
        let t = self.value(v);
        if t.numel() != 1 {
            return dim_err(format!("{what}: expected a scalar, got {:?}", t.shape()));
        }
        Ok(t.item())
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(value, op, &[x])
    }

    /// Affine map `x W + b`. `x` is `[in]` or `[rows, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let (rows, n_in) = match xs.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => return dim_err(format!("dense: input must be rank 1 or 2, got {xs:?}")),
        };
        if ws.len() != 2 || ws[0] != n_in {
            return dim_err(format!(
                "dense: weight {ws:?} incompatible with input {xs:?}"
            ));
        }
        let n_out = ws[1];
        if self.shape_of(b) != [n_out] {
            return dim_err(format!(
                "dense: bias {:?} must be [{n_out}]",
                self.shape_of(b)
            ));
        }
        let mut y = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            y.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            rows,
            n_in,
            n_out,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            T::one(),
            &mut y,
        );
        let shape = if xs.len() == 1 {
            vec![n_out]
        } else {
            vec![rows, n_out]
        };
        let value = Tensor::new(shape, y)?;
        Ok(self.push(
            value,
            Op::Dense {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            },
            &[x, w, b],
        ))
    }

    /// Cross-correlation of `x: [c_in, H, W]` with `kernels: [c_out, c_in, kh, kw]`
    /// and zero padding.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape_of(x).to_vec();
        let ks = self.shape_of(kernels).to_vec();
        let ([c_in, h, w], [c_out, kc, kh, kw]) = (xs.as_slice(), ks.as_slice()) else {
            return dim_err(format!("conv2d: bad ranks, input {xs:?}, kernels {ks:?}"));
        };
        let (c_in, h, w, c_out, kh, kw) = (*c_in, *h, *w, *c_out, *kh, *kw);
        if *kc != c_in {
            return dim_err(format!(
                "conv2d: kernel expects {kc} channels, input has {c_in}"
            ));
        }
        if stride == 0 {
            return dim_err("conv2d: stride must be positive");
        }
        let (span_h, span_w) = (h + 2 * pad, w + 2 * pad);
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return dim_err(format!(
                "conv2d: non-integral output size for {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let n = geom.col_cols();
        let mut y = vec![T::zero(); c_out * n];
        T::gemm(
            c_out,
            geom.col_rows(),
            n,
            T::one(),
            self.value(kernels).data(),
            false,
            &cols,
            false,
            T::zero(),
            &mut y,
        );
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], y)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k: kernels,
                geom,
                c_out,
            },
            &[x, kernels],
        ))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape_of(x).to_vec();
        let c = self.value(b).numel();
        if self.shape_of(b).len() != 1 || xs[0] != c {
            return dim_err(format!(
                "bias {:?} does not match channels of {xs:?}",
                self.shape_of(b)
            ));
        }
        let plane = self.value(x).numel() / c;
        let bv = self.value(b).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(&bv)
            .flat_map(|(p, &bi)| p.iter().map(move |&v| v + bi))
            .collect();
        let value = Tensor::new(xs, data)?;
        Ok(self.push(value, Op::AddChannelBias { x, b }, &[x, b]))
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(
            x,
            Op::Relu(x),
            |v| if v > T::zero() { v } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map_unary(x, Op::LeakyRelu(x, slope), move |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// 2x2 average pooling of `[C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = *self.shape_of(x) else {
            return dim_err("avg_pool2: expected [C, H, W]");
        };
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("avg_pool2: odd spatial dims {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::from_f64_lossy(0.25);
        let mut y = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    y[(ch * ho + i / 2) * wo + j / 2] += xv[(ch * h + i) * w + j] * quarter;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], y)?;
        Ok(self.push(value, Op::AvgPool2 { x, c, h, w }, &[x]))
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = *self.shape_of(x) else {
            return dim_err("upsample2: expected [C, H, W]");
        };
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    y[(ch * h2 + i) * w2 + j] = xv[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, h2, w2], y)?;
        Ok(self.push(value, Op::Upsample2 { x, c, h, w }, &[x]))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return dim_err(format!("concat: incompatible shapes {sa:?} and {sb:?}"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let mut shape = sa;
        shape[0] += sb[0];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map_unary(x, Op::Scale(x, c), move |v| v * c)
    }

    /// Multiplication by a recorded scalar `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_check(s, "mul_scalar")?;
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sv).collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        Ok(self.push(value, Op::MulScalar { x, s }, &[x, s]))
    }

    /// Quotient of two scalars.
    pub fn div_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.scalar_check(a, "div_scalar")?;
        let bv = self.scalar_check(b, "div_scalar")?;
        Ok(self.push(Tensor::scalar(av / bv), Op::DivScalar(a, b), &[a, b]))
    }

    /// Euclidean inner product of two equally-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Mean over one axis; that axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return dim_err(format!("mean_axis: axis {axis} invalid for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = T::one() / T::from_usize(len).unwrap();
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for k in 0..inner {
                    y[o * inner + k] += xv[(o * len + l) * inner + k];
                }
            }
        }
        for v in &mut y {
            *v *= inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, y)?;
        Ok(self.push(
            value,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and binary
    /// `labels`, evaluated as `max(a,0) - a m + ln(1 + e^{-|a|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let av = self.value(logits).data();
        if av.len() != labels.len() {
            return dim_err(format!(
                "bce_with_logits: {} logits vs {} labels",
                av.len(),
                labels.len()
            ));
        }
        if labels.iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(AutodiffError::Validation(
                "bce_with_logits: labels must be 0 or 1".into(),
            ));
        }
        let total: T = av
            .iter()
            .zip(labels)
            .map(|(&a, &m)| a.max(T::zero()) - a * m + (-a.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::from_usize(av.len()).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                a: logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// `||x - target|| / ||target||`.
    pub fn nrmse(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != target.len() {
            return dim_err(format!(
                "nrmse: {} values vs {} targets",
                xv.len(),
                target.len()
            ));
        }
        let ref_norm = target.iter().map(|&v| v * v).sum::<T>().sqrt();
        if ref_norm <= T::zero() {
            return Err(AutodiffError::Validation(
                "nrmse: reference has zero norm".into(),
            ));
        }
        let err_norm = xv
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt();
        Ok(self.push(
            Tensor::scalar(err_norm / ref_norm),
            Op::Nrmse {
                x,
                target: target.to_vec(),
                err_norm,
                ref_norm,
            },
            &[x],
        ))
    }

    /// Budgeted binarization with a straight-through backward pass: the
    /// forward value is the indicator of [`top_k_with_forced`], the
    /// Jacobian is treated as the identity.
    pub fn st_binarize(&mut self, p: Var, budget: usize, forced: &[usize]) -> Result<Var> {
        let t = self.value(p);
        if t.shape().len() != 1 {
            return dim_err(format!(
                "st_binarize: expected a vector, got {:?}",
                t.shape()
            ));
        }
        let sel = top_k_with_forced(t.data(), budget, forced)?;
        let data = sel
            .iter()
            .map(|&s| if s { T::one() } else { T::zero() })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::StraightThrough(p), &[p]))
    }

    pub fn linear(&mut self, x: Var, op: Arc<dyn LinearOp<T>>) -> Result<Var> {
        let xs = self.shape_of(x);
        let want = op.input_shape();
        if xs != want.as_slice() {
            return dim_err(format!("linear op expects {want:?}, got {xs:?}"));
        }
        let y = op.apply(self.value(x).data());
        let value = Tensor::new(op.output_shape(), y)?;
        Ok(self.push(value, Op::Linear { x, op }, &[x]))
    }
}
