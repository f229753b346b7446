use super::conv::{
    conv2d_backward, conv2d_geom, conv_transpose2d_backward, tconv2d_geom, ConvGeom,
};
use super::{conv2d, conv_transpose2d, shape_err, Real, Tensor, TensorError};
use crate::prob;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    ConvTranspose2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    LeakyRelu { input: Var, slope: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Clamp { input: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    Expand(Var),
    Narrow { input: Var, dim: usize, start: usize },
    Reshape(Var),
    FactorizedBits { values: Var, loc: Var, log_scale: Var },
    GaussianBits { values: Var, mean: Var, scale: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. Leaf gradients accumulate across calls to
/// [`Graph::backward`] until [`Graph::zero_grad`].
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = conv2d_geom(x, w, b, stride, pad)?;
        let out = conv2d(x, w, b, stride, pad)?;
        Ok(self.derived(out, Op::Conv2d { input, weight, bias, geom }, &[input, weight, bias]))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var, TensorError> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = tconv2d_geom(x, w, b, stride, pad, output_pad)?;
        let out = conv_transpose2d(x, w, b, stride, pad, output_pad)?;
        Ok(self.derived(
            out,
            Op::ConvTranspose2d { input, weight, bias, geom },
            &[input, weight, bias],
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = self.value(input).map(|v| if v >= T::zero() { v } else { slope * v });
        self.derived(out, Op::LeakyRelu { input, slope }, &[input])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x * k` for a constant `k`.
    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.derived(out, Op::Scale(x, k), &[x])
    }

    /// `x + k` for a constant `k`.
    pub fn shift(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.derived(out, Op::Shift(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.derived(out, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        self.derived(out, Op::Ln(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::sqrt);
        self.derived(out, Op::Sqrt(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.derived(out, Op::Square(x), &[x])
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Var {
        let out = self.value(input).map(|v| v.max(lo).min(hi));
        self.derived(out, Op::Clamp { input, lo, hi }, &[input])
    }

    /// Sum of all elements as a 0-dimensional tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel() as f64);
        self.derived(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Repeat a one-element tensor to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.numel() != 1 {
            return Err(shape_err("expand", format!("source must have one element, got {:?}", t.shape())));
        }
        let out = Tensor::full(shape.to_vec(), t.data()[0]);
        Ok(self.derived(out, Op::Expand(x), &[x]))
    }

    /// Slice `len` entries starting at `start` along `dim`.
    pub fn narrow(&mut self, input: Var, dim: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(input);
        let shape = t.shape();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(shape_err(
                "narrow",
                format!("dim {dim} range {start}..{} out of {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let mid = shape[dim];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[dim] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.derived(out, Op::Narrow { input, dim, start }, &[input]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    /// Total self-information, in bits, of `values` under a per-channel
    /// discretized logistic prior (channel axis 1).
    pub fn factorized_bits(&mut self, values: Var, loc: Var, log_scale: Var) -> Result<Var, TensorError> {
        let (v, l, s) = (self.value(values), self.value(loc), self.value(log_scale));
        if v.rank() < 2 {
            return Err(shape_err("factorized_bits", "values need a channel axis"));
        }
        let c = v.shape()[1];
        if l.shape() != [c] || s.shape() != [c] {
            return Err(shape_err(
                "factorized_bits",
                format!("prior shapes {:?}/{:?} for {c} channels", l.shape(), s.shape()),
            ));
        }
        let plane: usize = v.shape()[2..].iter().product();
        let mut bits = 0.0;
        for (i, &x) in v.data().iter().enumerate() {
            let ch = (i / plane) % c;
            let p = prob::logistic_pmf(x.f64(), l.data()[ch].f64(), s.data()[ch].f64().exp());
            bits += prob::bits_of(p);
        }
        Ok(self.derived(
            Tensor::scalar(T::of(bits)),
            Op::FactorizedBits { values, loc, log_scale },
            &[values, loc, log_scale],
        ))
    }

    /// Total self-information, in bits, of `values` under elementwise
    /// discretized Gaussians.
    pub fn gaussian_bits(&mut self, values: Var, mean: Var, scale: Var) -> Result<Var, TensorError> {
        let (v, m, s) = (self.value(values), self.value(mean), self.value(scale));
        same_shape("gaussian_bits", v, m)?;
        same_shape("gaussian_bits", v, s)?;
        let bits: f64 = v
            .data()
            .iter()
            .zip(m.data())
            .zip(s.data())
            .map(|((&x, &mu), &sd)| prob::bits_of(prob::gaussian_pmf(x.f64(), mu.f64(), sd.f64())))
            .sum();
        Ok(self.derived(
            Tensor::scalar(T::of(bits)),
            Op::GaussianBits { values, mean, scale },
            &[values, mean, scale],
        ))
    }

    /// Reverse-mode sweep from a 0-dimensional `root`, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let rshape = self.shape(root);
        if !rshape.is_empty() {
            return Err(TensorError::NonScalarBackward(rshape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| match grads[v.0].as_mut() {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            None => grads[v.0] = Some(contrib),
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[i].value.data();
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } | Op::ConvTranspose2d { input, weight, bias, geom } => {
                let need = [self.wants(input), self.wants(weight), self.wants(bias)];
                let r = if matches!(self.nodes[i].op, Op::Conv2d { .. }) {
                    conv2d_backward(val(input), val(weight), g, &geom, need)
                } else {
                    conv_transpose2d_backward(val(input), val(weight), g, &geom, need)
                };
                if let Some(d) = r.input {
                    acc(input, d);
                }
                if let Some(d) = r.weight {
                    acc(weight, d);
                }
                if let Some(d) = r.bias {
                    acc(bias, d);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let d = val(input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x >= T::zero() { gi } else { slope * gi })
                    .collect();
                acc(input, d);
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    acc(a, g.to_vec());
                }
                if self.wants(b) {
                    acc(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(a, g.to_vec());
                }
                if self.wants(b) {
                    acc(b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    acc(a, g.iter().zip(val(b)).map(|(&gi, &y)| gi * y).collect());
                }
                if self.wants(b) {
                    acc(b, g.iter().zip(val(a)).map(|(&gi, &x)| gi * x).collect());
                }
            }
            Op::Div(a, b) => {
                if self.wants(a) {
                    acc(a, g.iter().zip(val(b)).map(|(&gi, &y)| gi / y).collect());
                }
                if self.wants(b) {
                    let d = g
                        .iter()
                        .zip(out)
                        .zip(val(b))
                        .map(|((&gi, &q), &y)| -gi * q / y)
                        .collect();
                    acc(b, d);
                }
            }
            Op::Scale(x, k) => acc(x, g.iter().map(|&gi| gi * k).collect()),
            Op::Shift(x) => acc(x, g.to_vec()),
            Op::Exp(x) => acc(x, g.iter().zip(out).map(|(&gi, &e)| gi * e).collect()),
            Op::Ln(x) => acc(x, g.iter().zip(val(x)).map(|(&gi, &v)| gi / v).collect()),
            Op::Sqrt(x) => {
                let two = T::of(2.0);
                acc(x, g.iter().zip(out).map(|(&gi, &r)| gi / (two * r)).collect())
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                acc(x, g.iter().zip(val(x)).map(|(&gi, &v)| two * v * gi).collect())
            }
            Op::Clamp { input, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(input))
                    .map(|(&gi, &v)| if v >= lo && v <= hi { gi } else { T::zero() })
                    .collect();
                acc(input, d);
            }
            Op::Sum(x) => acc(x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Expand(x) => acc(x, vec![g.iter().copied().sum()]),
            Op::Narrow { input, dim, start } => {
                let shape = self.nodes[input.0].value.shape();
                let outer: usize = shape[..dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let mid = shape[dim];
                let len = self.nodes[i].value.shape()[dim];
                let mut d = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(input, d);
            }
            Op::Reshape(x) => acc(x, g.to_vec()),
            Op::FactorizedBits { values, loc, log_scale } => {
                let v = &self.nodes[values.0].value;
                let c = v.shape()[1];
                let plane: usize = v.shape()[2..].iter().product();
                let (l, s) = (val(loc), val(log_scale));
                let mut dv = vec![T::zero(); v.numel()];
                let mut dl = vec![T::zero(); c];
                let mut ds = vec![T::zero(); c];
                let mut dl64 = vec![0.0f64; c];
                let mut ds64 = vec![0.0f64; c];
                for (k, &x) in v.data().iter().enumerate() {
                    let ch = (k / plane) % c;
                    let pg = prob::logistic_pmf_grad(x.f64(), l[ch].f64(), s[ch].f64());
                    if pg.pmf <= prob::LIKELIHOOD_FLOOR {
                        continue;
                    }
                    let dbits = -g[0].f64() / (pg.pmf * std::f64::consts::LN_2);
                    dv[k] = T::of(dbits * pg.d_x);
                    dl64[ch] += dbits * pg.d_loc;
                    ds64[ch] += dbits * pg.d_scale;
                }
                for ch in 0..c {
                    dl[ch] = T::of(dl64[ch]);
                    ds[ch] = T::of(ds64[ch]);
                }
                if self.wants(values) {
                    acc(values, dv);
                }
                if self.wants(loc) {
                    acc(loc, dl);
                }
                if self.wants(log_scale) {
                    acc(log_scale, ds);
                }
            }
            Op::GaussianBits { values, mean, scale } => {
                let n = self.nodes[values.0].value.numel();
                let (v, m, s) = (val(values), val(mean), val(scale));
                let mut dv = vec![T::zero(); n];
                let mut dm = vec![T::zero(); n];
                let mut ds = vec![T::zero(); n];
                for k in 0..n {
                    let pg = prob::gaussian_pmf_grad(v[k].f64(), m[k].f64(), s[k].f64());
                    if pg.pmf <= prob::LIKELIHOOD_FLOOR {
                        continue;
                    }
                    let dbits = -g[0].f64() / (pg.pmf * std::f64::consts::LN_2);
                    dv[k] = T::of(dbits * pg.d_x);
                    dm[k] = T::of(dbits * pg.d_loc);
                    ds[k] = T::of(dbits * pg.d_scale);
                }
                if self.wants(values) {
                    acc(values, dv);
                }
                if self.wants(mean) {
                    acc(mean, dm);
                }
                if self.wants(scale) {
                    acc(scale, ds);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarBackward(_))));
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(vec![-2.0, 0.0, 3.0]));
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[-0.2, 0.0, 3.0]);
    }

    #[test]
    fn backward_accumulates_into_leaves() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let y = g.square(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn narrow_selects_and_scatters() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let n = g.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).shape(), &[2, 2, 2]);
        assert_eq!(g.value(n).data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let s = g.sum(n);
        g.backward(s).unwrap();
        assert_eq!(
            g.grad(x).unwrap().data(),
            &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn tconv_bias_gradient_is_output_area() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(vec![1, 2, 4, 4], |i| (i as f32 * 0.37).sin()));
        let w = g.constant(Tensor::from_fn(vec![2, 3, 5, 5], |i| (i as f32 * 0.11).cos()));
        let b = g.param(Tensor::zeros(vec![3]));
        let y = g.conv_transpose2d(x, w, b, 2, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 8, 8]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[64.0, 64.0, 64.0]);
    }

    #[test]
    fn gaussian_bits_of_half_probability_symbol() {
        // A unit-width bin centred on the mean of N(0, s) has mass 1/2 when
        // erf(0.5 / (s sqrt 2)) = 1/2, i.e. s = 0.5 / (sqrt 2 * 0.476936...).
        let s = 0.5 / (std::f64::consts::SQRT_2 * 0.476_936_276_204_47);
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_vec(vec![0.0]));
        let m = g.constant(Tensor::from_vec(vec![0.0]));
        let sc = g.constant(Tensor::from_vec(vec![s]));
        let bits = g.gaussian_bits(v, m, sc).unwrap();
        assert!((g.value(bits).item() - 1.0).abs() < 1e-6);
    }
}
