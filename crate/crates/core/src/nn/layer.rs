use rand::Rng;

use super::Scalar;

pub const CONV_KERNEL: usize = 5;

/// Layer type and shape. Spatial tensors are channel-major `C × H × W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Stride 1, zero "same" padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
    },
    /// Per-channel learned negative slope.
    PRelu {
        channels: usize,
        spatial: usize,
    },
    MaxPool2 {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// Stride-2 2×2 transposed convolution; `height`/`width` are input dims.
    Deconv2x2 {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
    },
    Tanh {
        len: usize,
    },
}

/// One layer and its parameter tensors (weights first, then biases).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub params: Vec<Vec<T>>,
}

/// Uniform with variance `1 / fan_in`.
fn fan_in_uniform<T: Scalar, R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let limit = (3.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::lit(rng.random_range(-limit..limit)))
        .collect()
}

impl<T: Scalar> Layer<T> {
    pub fn dense<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            params: vec![
                fan_in_uniform(inputs * outputs, inputs, rng),
                vec![T::zero(); outputs],
            ],
        }
    }

    pub fn conv<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let k = CONV_KERNEL;
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                height,
                width,
                kernel: k,
            },
            params: vec![
                fan_in_uniform(out_channels * in_channels * k * k, in_channels * k * k, rng),
                vec![T::zero(); out_channels],
            ],
        }
    }

    pub fn prelu(channels: usize, spatial: usize) -> Self {
        Self {
            kind: LayerKind::PRelu { channels, spatial },
            params: vec![vec![T::lit(0.25); channels]],
        }
    }

    pub fn max_pool(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            height.is_multiple_of(2) && width.is_multiple_of(2),
            "max-pool needs even dims"
        );
        Self {
            kind: LayerKind::MaxPool2 {
                channels,
                height,
                width,
            },
            params: Vec::new(),
        }
    }

    pub fn deconv<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            kind: LayerKind::Deconv2x2 {
                in_channels,
                out_channels,
                height,
                width,
            },
            params: vec![
                fan_in_uniform(in_channels * out_channels * 4, in_channels, rng),
                vec![T::zero(); out_channels],
            ],
        }
    }

    pub fn tanh(len: usize) -> Self {
        Self {
            kind: LayerKind::Tanh { len },
            params: Vec::new(),
        }
    }

    /// Layer of the given shape with all parameters zero.
    pub fn zeros(kind: LayerKind) -> Self {
        let sizes: Vec<usize> = match kind {
            LayerKind::Dense { inputs, outputs } => vec![inputs * outputs, outputs],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels * in_channels * kernel * kernel, out_channels],
            LayerKind::PRelu { channels, .. } => vec![channels],
            LayerKind::MaxPool2 { .. } | LayerKind::Tanh { .. } => Vec::new(),
            LayerKind::Deconv2x2 {
                in_channels,
                out_channels,
                ..
            } => vec![in_channels * out_channels * 4, out_channels],
        };
        Self {
            kind,
            params: sizes.into_iter().map(|n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv2d {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
            LayerKind::PRelu { channels, spatial } => channels * spatial,
            LayerKind::MaxPool2 {
                channels,
                height,
                width,
            } => channels * height * width,
            LayerKind::Deconv2x2 {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
            LayerKind::Tanh { len } => len,
        }
    }

    pub fn output_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv2d {
                out_channels,
                height,
                width,
                ..
            } => out_channels * height * width,
            LayerKind::PRelu { channels, spatial } => channels * spatial,
            LayerKind::MaxPool2 {
                channels,
                height,
                width,
            } => channels * height * width / 4,
            LayerKind::Deconv2x2 {
                out_channels,
                height,
                width,
                ..
            } => out_channels * height * width * 4,
            LayerKind::Tanh { len } => len,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            kind: self.kind,
            params: self
                .params
                .iter()
                .map(|p| {
                    p.iter()
                        .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                        .collect()
                })
                .collect(),
        }
    }

    /// Forward pass over a batch. The second value is auxiliary state needed
    /// by [`Layer::backward`] (max-pool argmax indices).
    pub fn forward(&self, x: &[T], batch: usize) -> (Vec<T>, Vec<u32>) {
        let (il, ol) = (self.input_len(), self.output_len());
        debug_assert_eq!(x.len(), il * batch);
        let mut y = vec![T::zero(); ol * batch];
        let mut aux = Vec::new();
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let (w, b) = (&self.params[0], &self.params[1]);
                for row in y.chunks_exact_mut(outputs) {
                    row.copy_from_slice(b);
                }
                T::gemm(
                    batch,
                    inputs,
                    outputs,
                    x,
                    inputs as isize,
                    1,
                    w,
                    1,
                    inputs as isize,
                    T::one(),
                    &mut y,
                    outputs as isize,
                    1,
                );
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                height,
                width,
                kernel,
            } => {
                let (w, b) = (&self.params[0], &self.params[1]);
                let hw = height * width;
                let ckk = in_channels * kernel * kernel;
                let mut cols = vec![T::zero(); ckk * hw];
                for (xs, ys) in x.chunks_exact(il).zip(y.chunks_exact_mut(ol)) {
                    im2col(xs, in_channels, height, width, kernel, &mut cols);
                    for (o, plane) in ys.chunks_exact_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|v| *v = b[o]);
                    }
                    T::gemm(
                        out_channels,
                        ckk,
                        hw,
                        w,
                        ckk as isize,
                        1,
                        &cols,
                        hw as isize,
                        1,
                        T::one(),
                        ys,
                        hw as isize,
                        1,
                    );
                }
            }
            LayerKind::PRelu { channels, spatial } => {
                let a = &self.params[0];
                for (i, (yv, &xv)) in y.iter_mut().zip(x).enumerate() {
                    let c = (i / spatial) % channels;
                    *yv = if xv > T::zero() { xv } else { a[c] * xv };
                }
            }
            LayerKind::MaxPool2 {
                channels,
                height,
                width,
            } => {
                aux = vec![0u32; ol * batch];
                let (oh, ow) = (height / 2, width / 2);
                for s in 0..batch {
                    let xs = &x[s * il..(s + 1) * il];
                    for c in 0..channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = c * height * width + 2 * oy * width + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let j =
                                        c * height * width + (2 * oy + dy) * width + 2 * ox + dx;
                                    if xs[j] > xs[best] {
                                        best = j;
                                    }
                                }
                                let o = s * ol + c * oh * ow + oy * ow + ox;
                                y[o] = xs[best];
                                aux[o] = best as u32;
                            }
                        }
                    }
                }
            }
            LayerKind::Deconv2x2 {
                in_channels,
                out_channels,
                height,
                width,
            } => {
                let (w, b) = (&self.params[0], &self.params[1]);
                let hw = height * width;
                let r = out_channels * 4;
                let mut tmp = vec![T::zero(); r * hw];
                for (xs, ys) in x.chunks_exact(il).zip(y.chunks_exact_mut(ol)) {
                    T::gemm(
                        r,
                        in_channels,
                        hw,
                        w,
                        1,
                        r as isize,
                        xs,
                        hw as isize,
                        1,
                        T::zero(),
                        &mut tmp,
                        hw as isize,
                        1,
                    );
                    for (row, t) in tmp.chunks_exact(hw).enumerate() {
                        let (o, dy, dx) = (row / 4, (row / 2) % 2, row % 2);
                        for yy in 0..height {
                            for xx in 0..width {
                                let oi = o * hw * 4 + (2 * yy + dy) * (2 * width) + 2 * xx + dx;
                                ys[oi] = t[yy * width + xx] + b[o];
                            }
                        }
                    }
                }
            }
            LayerKind::Tanh { .. } => {
                for (yv, &xv) in y.iter_mut().zip(x) {
                    *yv = xv.tanh();
                }
            }
        }
        (y, aux)
    }

    /// Backward pass. Accumulates parameter gradients into `grads` (same
    /// layout as `params`) and returns the gradient w.r.t. the input.
    pub fn backward(
        &self,
        x: &[T],
        y: &[T],
        aux: &[u32],
        dy: &[T],
        batch: usize,
        grads: &mut [Vec<T>],
    ) -> Vec<T> {
        let (il, ol) = (self.input_len(), self.output_len());
        let mut dx = vec![T::zero(); il * batch];
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let w = &self.params[0];
                let (gw, gb) = grads.split_at_mut(1);
                T::gemm(
                    outputs,
                    batch,
                    inputs,
                    dy,
                    1,
                    outputs as isize,
                    x,
                    inputs as isize,
                    1,
                    T::one(),
                    &mut gw[0],
                    inputs as isize,
                    1,
                );
                for row in dy.chunks_exact(outputs) {
                    for (g, &d) in gb[0].iter_mut().zip(row) {
                        *g = *g + d;
                    }
                }
                T::gemm(
                    batch,
                    outputs,
                    inputs,
                    dy,
                    outputs as isize,
                    1,
                    w,
                    inputs as isize,
                    1,
                    T::zero(),
                    &mut dx,
                    inputs as isize,
                    1,
                );
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                height,
                width,
                kernel,
            } => {
                let w = &self.params[0];
                let hw = height * width;
                let ckk = in_channels * kernel * kernel;
                let mut cols = vec![T::zero(); ckk * hw];
                let mut dcols = vec![T::zero(); ckk * hw];
                let (gw, gb) = grads.split_at_mut(1);
                for ((xs, dys), dxs) in x
                    .chunks_exact(il)
                    .zip(dy.chunks_exact(ol))
                    .zip(dx.chunks_exact_mut(il))
                {
                    im2col(xs, in_channels, height, width, kernel, &mut cols);
                    T::gemm(
                        out_channels,
                        hw,
                        ckk,
                        dys,
                        hw as isize,
                        1,
                        &cols,
                        1,
                        hw as isize,
                        T::one(),
                        &mut gw[0],
                        ckk as isize,
                        1,
                    );
                    for (o, plane) in dys.chunks_exact(hw).enumerate() {
                        gb[0][o] = gb[0][o] + plane.iter().copied().sum();
                    }
                    T::gemm(
                        ckk,
                        out_channels,
                        hw,
                        w,
                        1,
                        ckk as isize,
                        dys,
                        hw as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        hw as isize,
                        1,
                    );
                    col2im(&dcols, in_channels, height, width, kernel, dxs);
                }
            }
            LayerKind::PRelu { channels, spatial } => {
                let a = &self.params[0];
                for (i, ((dxv, &xv), &d)) in dx.iter_mut().zip(x).zip(dy).enumerate() {
                    let c = (i / spatial) % channels;
                    if xv > T::zero() {
                        *dxv = d;
                    } else {
                        *dxv = a[c] * d;
                        grads[0][c] = grads[0][c] + d * xv;
                    }
                }
            }
            LayerKind::MaxPool2 { .. } => {
                for s in 0..batch {
                    for o in 0..ol {
                        let j = s * il + aux[s * ol + o] as usize;
                        dx[j] = dx[j] + dy[s * ol + o];
                    }
                }
            }
            LayerKind::Deconv2x2 {
                in_channels,
                out_channels,
                height,
                width,
            } => {
                let w = &self.params[0];
                let hw = height * width;
                let r = out_channels * 4;
                let mut dtmp = vec![T::zero(); r * hw];
                let (gw, gb) = grads.split_at_mut(1);
                for ((xs, dys), dxs) in x
                    .chunks_exact(il)
                    .zip(dy.chunks_exact(ol))
                    .zip(dx.chunks_exact_mut(il))
                {
                    for (row, t) in dtmp.chunks_exact_mut(hw).enumerate() {
                        let (o, ddy, ddx) = (row / 4, (row / 2) % 2, row % 2);
                        for yy in 0..height {
                            for xx in 0..width {
                                t[yy * width + xx] =
                                    dys[o * hw * 4 + (2 * yy + ddy) * (2 * width) + 2 * xx + ddx];
                            }
                        }
                    }
                    for (o, plane) in dys.chunks_exact(hw * 4).enumerate() {
                        gb[0][o] = gb[0][o] + plane.iter().copied().sum();
                    }
                    T::gemm(
                        in_channels,
                        hw,
                        r,
                        xs,
                        hw as isize,
                        1,
                        &dtmp,
                        1,
                        hw as isize,
                        T::one(),
                        &mut gw[0],
                        r as isize,
                        1,
                    );
                    T::gemm(
                        in_channels,
                        r,
                        hw,
                        w,
                        r as isize,
                        1,
                        &dtmp,
                        hw as isize,
                        1,
                        T::zero(),
                        dxs,
                        hw as isize,
                        1,
                    );
                }
            }
            LayerKind::Tanh { .. } => {
                for ((dxv, &yv), &d) in dx.iter_mut().zip(y).zip(dy) {
                    *dxv = d * (T::one() - yv * yv);
                }
            }
        }
        dx
    }
}

fn im2col<T: Scalar>(x: &[T], channels: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let (oy, ox) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y as isize + oy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[c * hw + sy as usize * w..][..w];
                    for (xx, v) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + ox;
                        *v = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], channels: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let (oy, ox) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[c * hw + sy as usize * w..][..w];
                    for xx in 0..w {
                        let sx = xx as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 5×5 same-padded convolution.
    fn naive_conv(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        ci: usize,
        co: usize,
        h: usize,
        wd: usize,
    ) -> Vec<f64> {
        let k = 5isize;
        let mut y = vec![0.0; co * h * wd];
        for o in 0..co {
            for yy in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut s = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (yy + ky - 2, xx + kx - 2);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    s += w[((o * ci + c) * 5 + ky as usize) * 5 + kx as usize]
                                        * x[c * h * wd + sy as usize * wd + sx as usize];
                                }
                            }
                        }
                    }
                    y[o * h * wd + yy as usize * wd + xx as usize] = s;
                }
            }
        }
        y
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = Layer::<f64>::conv(3, 2, 7, 6, &mut rng);
        l.params[1] = vec![0.3, -0.2];
        let x = rand_vec(2 * 3 * 42, &mut rng);
        let (y, _) = l.forward(&x, 2);
        for s in 0..2 {
            let want = naive_conv(
                &x[s * 126..(s + 1) * 126],
                &l.params[0],
                &l.params[1],
                3,
                2,
                7,
                6,
            );
            for (a, b) in y[s * 84..(s + 1) * 84].iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_matches_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = Layer::<f64>::dense(3, 2, &mut rng);
        l.params[0] = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        l.params[1] = vec![0.5, -0.5];
        let (y, _) = l.forward(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.0], 2);
        assert_eq!(y, vec![-1.5, -2.5, 4.5, 12.5]);
    }

    #[test]
    fn maxpool_and_deconv_shapes() {
        let l = Layer::<f64>::max_pool(1, 2, 4);
        let (y, aux) = l.forward(&[1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 2.0], 1);
        assert_eq!(y, vec![5.0, 9.0]);
        assert_eq!(aux, vec![1, 6]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Layer::<f64>::deconv(1, 1, 1, 2, &mut rng);
        d.params[0] = vec![1.0, 2.0, 3.0, 4.0];
        d.params[1] = vec![10.0];
        let (y, _) = d.forward(&[1.0, -1.0], 1);
        assert_eq!(y, vec![11.0, 12.0, 9.0, 8.0, 13.0, 14.0, 7.0, 6.0]);
    }

    #[test]
    fn prelu_slopes_per_channel() {
        let mut l = Layer::<f64>::prelu(2, 2);
        l.params[0] = vec![0.1, 0.5];
        let (y, _) = l.forward(&[-1.0, 2.0, -2.0, 3.0], 1);
        assert_eq!(y, vec![-0.1, 2.0, -1.0, 3.0]);
    }
}
