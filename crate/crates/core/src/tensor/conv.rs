//! Convolution kernels (im2col + GEMM) used by the graph ops.
//!
//! Layouts: activations `[N, C, H, W]`, convolution weights `[O, C, k, k]`,
//! transposed-convolution weights `[C_in, O, k, k]`.

use super::{shape_err, Real, Tensor, TensorError};

pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

pub fn tconv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<usize> {
    if stride == 0 || input == 0 || output_pad >= stride {
        return None;
    }
    ((input - 1) * stride + kernel + output_pad).checked_sub(2 * pad)
}

/// Geometry of one convolution pass, shared by forward and backward.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    /// Channels / extent of the "image" side (input for conv, output for tconv).
    pub img_c: usize,
    pub img_h: usize,
    pub img_w: usize,
    /// Channels / extent of the "grid" side (output for conv, input for tconv).
    pub grid_c: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn img_len(&self) -> usize {
        self.img_c * self.img_h * self.img_w
    }
    fn grid_pos(&self) -> usize {
        self.grid_h * self.grid_w
    }
    fn grid_len(&self) -> usize {
        self.grid_c * self.grid_pos()
    }
    fn col_rows(&self) -> usize {
        self.img_c * self.k * self.k
    }
}

fn im2col<T: Real>(src: &[T], g: &ConvGeom, dst: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let positions = g.grid_pos();
    for c in 0..g.img_c {
        let plane = &src[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * positions;
                for oh in 0..g.grid_h {
                    let out = &mut dst[row + oh * g.grid_w..row + (oh + 1) * g.grid_w];
                    let ih = oh as isize * s + ki as isize - p;
                    if ih < 0 || ih >= g.img_h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &plane[ih as usize * g.img_w..(ih as usize + 1) * g.img_w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = ow as isize * s + kj as isize - p;
                        *o = if iw >= 0 && iw < g.img_w as isize {
                            line[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dst: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let positions = g.grid_pos();
    for c in 0..g.img_c {
        let plane = &mut dst[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * positions;
                for oh in 0..g.grid_h {
                    let ih = oh as isize * s + ki as isize - p;
                    if ih < 0 || ih >= g.img_h as isize {
                        continue;
                    }
                    let src = &cols[row + oh * g.grid_w..row + (oh + 1) * g.grid_w];
                    let line = &mut plane[ih as usize * g.img_w..(ih as usize + 1) * g.img_w];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = ow as isize * s + kj as isize - p;
                        if iw >= 0 && iw < g.img_w as isize {
                            line[iw as usize] = line[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn check_rank4<T: Real>(op: &'static str, name: &str, t: &Tensor<T>) -> Result<(), TensorError> {
    if t.rank() != 4 {
        return Err(shape_err(op, format!("{name} must be rank 4, got {:?}", t.shape())));
    }
    Ok(())
}

pub(crate) fn conv2d_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, TensorError> {
    const OP: &str = "conv2d";
    check_rank4(OP, "input", x)?;
    check_rank4(OP, "weight", w)?;
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c || k != k2 {
        return Err(shape_err(
            OP,
            format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape()),
        ));
    }
    if b.shape() != [o] {
        return Err(shape_err(OP, format!("bias {:?}, expected [{o}]", b.shape())));
    }
    let (Some(oh), Some(ow)) = (
        conv_output_extent(h, k, stride, pad),
        conv_output_extent(wd, k, stride, pad),
    ) else {
        return Err(shape_err(
            OP,
            format!("input {h}x{wd} too small for kernel {k} (stride {stride}, pad {pad})"),
        ));
    };
    Ok(ConvGeom {
        batch: n,
        img_c: c,
        img_h: h,
        img_w: wd,
        grid_c: o,
        grid_h: oh,
        grid_w: ow,
        k,
        stride,
        pad,
    })
}

pub(crate) fn tconv2d_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<ConvGeom, TensorError> {
    const OP: &str = "tconv2d";
    check_rank4(OP, "input", x)?;
    check_rank4(OP, "weight", w)?;
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wc, o, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c || k != k2 {
        return Err(shape_err(
            OP,
            format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape()),
        ));
    }
    if b.shape() != [o] {
        return Err(shape_err(OP, format!("bias {:?}, expected [{o}]", b.shape())));
    }
    let (Some(oh), Some(ow)) = (
        tconv_output_extent(h, k, stride, pad, output_pad),
        tconv_output_extent(wd, k, stride, pad, output_pad),
    ) else {
        return Err(shape_err(
            OP,
            format!("invalid geometry: input {h}x{wd}, kernel {k}, stride {stride}, pad {pad}, output_pad {output_pad}"),
        ));
    };
    // The output grid must map back onto exactly the input grid.
    if conv_output_extent(oh, k, stride, pad) != Some(h)
        || conv_output_extent(ow, k, stride, pad) != Some(wd)
    {
        return Err(shape_err(OP, "output extent does not invert to input extent"));
    }
    Ok(ConvGeom {
        batch: n,
        img_c: o,
        img_h: oh,
        img_w: ow,
        grid_c: c,
        grid_h: h,
        grid_w: wd,
        k,
        stride,
        pad,
    })
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = conv2d_geom(x, w, b, stride, pad)?;
    let (rows, pos) = (g.col_rows(), g.grid_pos());
    let mut out = vec![T::zero(); g.batch * g.grid_len()];
    let mut cols = vec![T::zero(); rows * pos];
    for n in 0..g.batch {
        im2col(&x.data()[n * g.img_len()..(n + 1) * g.img_len()], &g, &mut cols);
        let dst = &mut out[n * g.grid_len()..(n + 1) * g.grid_len()];
        T::gemm(
            g.grid_c,
            rows,
            pos,
            w.data(),
            rows as isize,
            1,
            &cols,
            pos as isize,
            1,
            T::zero(),
            dst,
            pos as isize,
            1,
        );
    }
    add_bias(&mut out, b.data(), pos);
    Tensor::new(vec![g.batch, g.grid_c, g.grid_h, g.grid_w], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

fn bias_grad<T: Real>(gout: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in gout.chunks(plane).enumerate() {
        let c = i % channels;
        db[c] = db[c] + chunk.iter().copied().sum::<T>();
    }
    db
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (rows, pos) = (g.col_rows(), g.grid_pos());
    let mut dx = need[0].then(|| vec![T::zero(); g.batch * g.img_len()]);
    let mut dw = need[1].then(|| vec![T::zero(); g.grid_c * rows]);
    let mut cols = vec![T::zero(); rows * pos];
    for n in 0..g.batch {
        let go = &gout[n * g.grid_len()..(n + 1) * g.grid_len()];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * g.img_len()..(n + 1) * g.img_len()], g, &mut cols);
            // dW += gout · colsᵀ
            T::gemm(
                g.grid_c,
                pos,
                rows,
                go,
                pos as isize,
                1,
                &cols,
                1,
                pos as isize,
                T::one(),
                dw,
                rows as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · gout
            T::gemm(
                rows,
                g.grid_c,
                pos,
                w,
                1,
                rows as isize,
                go,
                pos as isize,
                1,
                T::zero(),
                &mut cols,
                pos as isize,
                1,
            );
            col2im(&cols, g, &mut dx[n * g.img_len()..(n + 1) * g.img_len()]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: need[2].then(|| bias_grad(gout, g.grid_c, pos)),
    }
}

/// Transposed convolution, the adjoint of [`conv2d`] in its input.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = tconv2d_geom(x, w, b, stride, pad, output_pad)?;
    let (rows, pos) = (g.col_rows(), g.grid_pos());
    let mut out = vec![T::zero(); g.batch * g.img_len()];
    let mut cols = vec![T::zero(); rows * pos];
    for n in 0..g.batch {
        let xn = &x.data()[n * g.grid_len()..(n + 1) * g.grid_len()];
        // cols = Wᵀ · x
        T::gemm(
            rows,
            g.grid_c,
            pos,
            w.data(),
            1,
            rows as isize,
            xn,
            pos as isize,
            1,
            T::zero(),
            &mut cols,
            pos as isize,
            1,
        );
        col2im(&cols, &g, &mut out[n * g.img_len()..(n + 1) * g.img_len()]);
    }
    add_bias(&mut out, b.data(), g.img_h * g.img_w);
    Tensor::new(vec![g.batch, g.img_c, g.img_h, g.img_w], out)
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (rows, pos) = (g.col_rows(), g.grid_pos());
    let mut dx = need[0].then(|| vec![T::zero(); g.batch * g.grid_len()]);
    let mut dw = need[1].then(|| vec![T::zero(); g.grid_c * rows]);
    let mut cols = vec![T::zero(); rows * pos];
    if need[0] || need[1] {
        for n in 0..g.batch {
            im2col(&gout[n * g.img_len()..(n + 1) * g.img_len()], g, &mut cols);
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    g.grid_c,
                    rows,
                    pos,
                    w,
                    rows as isize,
                    1,
                    &cols,
                    pos as isize,
                    1,
                    T::zero(),
                    &mut dx[n * g.grid_len()..(n + 1) * g.grid_len()],
                    pos as isize,
                    1,
                );
            }
            if let Some(dw) = dw.as_mut() {
                // dW += x · colsᵀ
                T::gemm(
                    g.grid_c,
                    pos,
                    rows,
                    &x[n * g.grid_len()..(n + 1) * g.grid_len()],
                    pos as isize,
                    1,
                    &cols,
                    1,
                    pos as isize,
                    T::one(),
                    dw,
                    rows as isize,
                    1,
                );
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: need[2].then(|| bias_grad(gout, g.img_c, g.img_h * g.img_w)),
    }
}
