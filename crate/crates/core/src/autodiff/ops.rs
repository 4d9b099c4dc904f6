//! Built-in differentiable ops. Everything here is exactly what the encoder,
//! decoder and loss need; there is no general broadcasting.

use super::Operator;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Contract(format!(
            "{op} takes {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

/// Valid cross-correlation of a zero-padded `[C_in, H, W]` input with
/// `[C_out, C_in, kh, kw]` kernels. No kernel flip.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub padding: usize,
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    fn dims(&self, x: &Tensor, k: &Tensor) -> Result<ConvDims> {
        const OP: &str = "conv2d";
        x.expect_rank(OP, 3)?;
        k.expect_rank(OP, 4)?;
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != c_in {
            return Err(Error::shape(
                OP,
                format!("channel axis: input has {c_in}, kernels expect {kc}"),
            ));
        }
        let p = self.padding;
        if kh > h + 2 * p {
            return Err(Error::shape(
                OP,
                format!("height axis: kernel {kh} exceeds padded input {}", h + 2 * p),
            ));
        }
        if kw > w + 2 * p {
            return Err(Error::shape(
                OP,
                format!("width axis: kernel {kw} exceeds padded input {}", w + 2 * p),
            ));
        }
        Ok(ConvDims {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh: h + 2 * p - kh + 1,
            ow: w + 2 * p - kw + 1,
        })
    }

    /// Output index range along one axis for kernel offset `u`, so that the
    /// input index `o + u - pad` stays in `[0, n)`.
    #[inline]
    fn valid_range(u: usize, pad: usize, n: usize, out: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(u);
        let hi = (n + pad).saturating_sub(u).min(out);
        (lo, hi.max(lo))
    }
}

impl Operator for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("conv2d", inputs, 2)?;
        let (x, k) = (inputs[0], inputs[1]);
        let d = self.dims(x, k)?;
        let p = self.padding;
        let (xd, kd) = (x.data(), k.data());
        let mut out = vec![0.0; d.c_out * d.oh * d.ow];
        for o in 0..d.c_out {
            let out_o = &mut out[o * d.oh * d.ow..(o + 1) * d.oh * d.ow];
            for c in 0..d.c_in {
                let x_c = &xd[c * d.h * d.w..(c + 1) * d.h * d.w];
                for u in 0..d.kh {
                    let (i_lo, i_hi) = Self::valid_range(u, p, d.h, d.oh);
                    for v in 0..d.kw {
                        let wgt = kd[((o * d.c_in + c) * d.kh + u) * d.kw + v];
                        let (j_lo, j_hi) = Self::valid_range(v, p, d.w, d.ow);
                        if j_lo >= j_hi {
                            continue;
                        }
                        for i in i_lo..i_hi {
                            let row = (i + u - p) * d.w;
                            let src = &x_c[row + j_lo + v - p..row + j_hi + v - p];
                            let dst = &mut out_o[i * d.ow + j_lo..i * d.ow + j_hi];
                            for (a, b) in dst.iter_mut().zip(src) {
                                *a += wgt * b;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![d.c_out, d.oh, d.ow], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, k) = (inputs[0], inputs[1]);
        let d = self.dims(x, k)?;
        let p = self.padding;
        let (xd, kd, gd) = (x.data(), k.data(), grad.data());
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gk = needs[1].then(|| vec![0.0; k.len()]);
        for o in 0..d.c_out {
            let g_o = &gd[o * d.oh * d.ow..(o + 1) * d.oh * d.ow];
            for c in 0..d.c_in {
                let x_c = &xd[c * d.h * d.w..(c + 1) * d.h * d.w];
                for u in 0..d.kh {
                    let (i_lo, i_hi) = Self::valid_range(u, p, d.h, d.oh);
                    for v in 0..d.kw {
                        let kidx = ((o * d.c_in + c) * d.kh + u) * d.kw + v;
                        let (j_lo, j_hi) = Self::valid_range(v, p, d.w, d.ow);
                        if j_lo >= j_hi {
                            continue;
                        }
                        let wgt = kd[kidx];
                        let mut acc = 0.0;
                        for i in i_lo..i_hi {
                            let row = (i + u - p) * d.w;
                            let xs = row + j_lo + v - p..row + j_hi + v - p;
                            let gs = &g_o[i * d.ow + j_lo..i * d.ow + j_hi];
                            if gk.is_some() {
                                acc += x_c[xs.clone()].iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gx) = gx.as_mut() {
                                let base = c * d.h * d.w;
                                let dst = &mut gx[base + xs.start..base + xs.end];
                                for (a, b) in dst.iter_mut().zip(gs) {
                                    *a += wgt * b;
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
        Ok(vec![
            gx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
            gk.map(|v| Tensor::new(k.shape().to_vec(), v)).transpose()?,
        ])
    }
}

/// Adds `bias[c]` to every element of channel `c` of a `[C, H, W]` tensor.
#[derive(Clone, Copy, Debug)]
pub struct AddChannelBias;

impl Operator for AddChannelBias {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 2)?;
        let (x, b) = (inputs[0], inputs[1]);
        x.expect_rank(self.name(), 3)?;
        if b.shape() != [x.shape()[0]] {
            return Err(Error::shape(
                self.name(),
                format!("channel axis: {} channels, bias {:?}", x.shape()[0], b.shape()),
            ));
        }
        let plane = x.shape()[1] * x.shape()[2];
        let mut out = x.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bc = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let plane = x.shape()[1] * x.shape()[2];
        let gb = needs[1].then(|| {
            Tensor::from_vec(grad.data().chunks(plane).map(|c| c.iter().sum()).collect())
        });
        Ok(vec![needs[0].then(|| grad.clone()), gb])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Relu;

impl Operator for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 1)?;
        Ok(inputs[0].map(|v| v.max(0.0)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        // subgradient at exactly 0 is 0
        let g = inputs[0].zip_map(grad, |x, g| if x > 0.0 { g } else { 0.0 })?;
        Ok(vec![Some(g)])
    }

    fn kink_distance(&self, inputs: &[&Tensor]) -> Option<f64> {
        Some(inputs[0].data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }
}

fn matvec_dims(op: &'static str, w: &Tensor, x: &Tensor) -> Result<(usize, usize)> {
    w.expect_rank(op, 2)?;
    x.expect_rank(op, 1)?;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.len() != n {
        return Err(Error::shape(
            op,
            format!("inner axis: weights [{m}, {n}] vs input of length {}", x.len()),
        ));
    }
    Ok((m, n))
}

fn matvec(w: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    (0..m)
        .map(|r| w[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_backward(
    w: &Tensor,
    x: &Tensor,
    grad: &Tensor,
    need_w: bool,
    need_x: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let (wd, xd, gd) = (w.data(), x.data(), grad.data());
    let gw = need_w.then(|| {
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let gr = gd[r];
            for (o, xv) in out[r * n..(r + 1) * n].iter_mut().zip(xd) {
                *o = gr * xv;
            }
        }
        Tensor::new(vec![m, n], out).expect("shape checked in forward")
    });
    let gx = need_x.then(|| {
        let mut out = vec![0.0; n];
        for r in 0..m {
            let gr = gd[r];
            for (o, wv) in out.iter_mut().zip(&wd[r * n..(r + 1) * n]) {
                *o += gr * wv;
            }
        }
        Tensor::from_vec(out)
    });
    (gw, gx)
}

/// Affine map `weights · input + bias` with `weights: [m, n]`.
#[derive(Clone, Copy, Debug)]
pub struct Fc;

impl Operator for Fc {
    fn name(&self) -> &'static str {
        "fc"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 3)?;
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (m, n) = matvec_dims(self.name(), w, x)?;
        if b.shape() != [m] {
            return Err(Error::shape(
                self.name(),
                format!("output axis: weights produce {m}, bias {:?}", b.shape()),
            ));
        }
        let mut out = matvec(w.data(), x.data(), m, n);
        out.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
        Ok(Tensor::from_vec(out))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (gw, gx) = matvec_backward(inputs[1], inputs[0], grad, needs[1], needs[0]);
        Ok(vec![gx, gw, needs[2].then(|| grad.clone())])
    }
}

/// `matrix · vector` without bias; inputs are `[matrix, vector]`.
#[derive(Clone, Copy, Debug)]
pub struct MatVec;

impl Operator for MatVec {
    fn name(&self) -> &'static str {
        "matvec"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 2)?;
        let (w, x) = (inputs[0], inputs[1]);
        let (m, n) = matvec_dims(self.name(), w, x)?;
        Ok(Tensor::from_vec(matvec(w.data(), x.data(), m, n)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (gw, gx) = matvec_backward(inputs[0], inputs[1], grad, needs[0], needs[1]);
        Ok(vec![gw, gx])
    }
}

/// `Σ coeffs[i] · inputs[i]` over same-shaped inputs.
#[derive(Clone, Debug)]
pub struct LinComb {
    pub coeffs: Vec<f64>,
}

impl Operator for LinComb {
    fn name(&self) -> &'static str {
        "lincomb"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, self.coeffs.len())?;
        let first = inputs.first().ok_or_else(|| {
            Error::Contract("lincomb needs at least one input".to_string())
        })?;
        let mut out = Tensor::zeros(first.shape());
        for (c, t) in self.coeffs.iter().zip(inputs) {
            first.expect_same_shape(self.name(), t)?;
            out.data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(o, v)| *o += c * v);
        }
        Ok(out)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(self
            .coeffs
            .iter()
            .zip(needs)
            .map(|(&c, &need)| need.then(|| grad.map(|g| c * g)))
            .collect())
    }
}

/// Elementwise product.
#[derive(Clone, Copy, Debug)]
pub struct Mul;

impl Operator for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 2)?;
        inputs[0].zip_map(inputs[1], |a, b| a * b)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![
            needs[0].then(|| grad.zip_map(inputs[1], |g, b| g * b)).transpose()?,
            needs[1].then(|| grad.zip_map(inputs[0], |g, a| g * a)).transpose()?,
        ])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Sum;

impl Operator for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 1)?;
        Ok(Tensor::scalar(inputs[0].sum()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.item()))])
    }
}

/// `Σ x²` as a one-element tensor.
#[derive(Clone, Copy, Debug)]
pub struct SumSquares;

impl Operator for SumSquares {
    fn name(&self) -> &'static str {
        "sum_squares"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 1)?;
        Ok(Tensor::scalar(inputs[0].dot(inputs[0])))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = 2.0 * grad.item();
        Ok(vec![Some(inputs[0].map(|v| g * v))])
    }
}

/// Zero padding of both spatial axes of a `[C, H, W]` tensor by `pad` on
/// every side.
#[derive(Clone, Copy, Debug)]
pub struct Pad2d {
    pub pad: usize,
}

impl Operator for Pad2d {
    fn name(&self) -> &'static str {
        "pad2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 1)?;
        let x = inputs[0];
        x.expect_rank(self.name(), 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let p = self.pad;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut out = vec![0.0; c * ph * pw];
        for ch in 0..c {
            for i in 0..h {
                let src = &x.data()[(ch * h + i) * w..(ch * h + i + 1) * w];
                let start = (ch * ph + i + p) * pw + p;
                out[start..start + w].copy_from_slice(src);
            }
        }
        Tensor::new(vec![c, ph, pw], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let p = self.pad;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            for i in 0..h {
                let start = (ch * ph + i + p) * pw + p;
                out[(ch * h + i) * w..(ch * h + i + 1) * w]
                    .copy_from_slice(&grad.data()[start..start + w]);
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), out)?)])
    }
}

#[derive(Clone, Debug)]
pub struct Reshape {
    pub shape: Vec<usize>,
}

impl Operator for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 1)?;
        inputs[0].reshape(&self.shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", inputs[0].shape(), self.shape),
            )
        })
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.reshape(inputs[0].shape())?)])
    }
}

/// Flat concatenation into a rank-1 tensor.
#[derive(Clone, Copy, Debug)]
pub struct Concat;

impl Operator for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat needs at least one input".into()));
        }
        Ok(Tensor::concat_flat(inputs))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let n = t.len();
            out.push(
                need.then(|| Tensor::new(t.shape().to_vec(), grad.data()[offset..offset + n].to_vec()))
                    .transpose()?,
            );
            offset += n;
        }
        Ok(out)
    }
}

/// Contiguous range `start..start + len` of the flattened input.
#[derive(Clone, Copy, Debug)]
pub struct Slice {
    pub start: usize,
    pub len: usize,
}

impl Operator for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if self.len == 0 || self.start + self.len > x.len() {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} outside {} elements", self.start, self.start + self.len, x.len()),
            ));
        }
        Ok(Tensor::from_vec(x.data()[self.start..self.start + self.len].to_vec()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut g = Tensor::zeros(inputs[0].shape());
        g.data_mut()[self.start..self.start + self.len].copy_from_slice(grad.data());
        Ok(vec![Some(g)])
    }
}

/// Hard clamp to `[lo, hi]`; gradient is 1 inside and 0 outside.
#[derive(Clone, Copy, Debug)]
pub struct Clamp {
    pub lo: f64,
    pub hi: f64,
}

impl Operator for Clamp {
    fn name(&self) -> &'static str {
        "clamp"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 1)?;
        Ok(inputs[0].map(|v| v.clamp(self.lo, self.hi)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = inputs[0].zip_map(grad, |x, g| {
            if x >= self.lo && x <= self.hi {
                g
            } else {
                0.0
            }
        })?;
        Ok(vec![Some(g)])
    }

    fn kink_distance(&self, inputs: &[&Tensor]) -> Option<f64> {
        Some(
            inputs[0]
                .data()
                .iter()
                .fold(f64::INFINITY, |m, &v| m.min((v - self.lo).abs()).min((v - self.hi).abs())),
        )
    }
}

/// Cosine of the angle between two same-shaped tensors, each norm floored at
/// `eps`: `a·b / (max(|a|, eps) · max(|b|, eps))`.
#[derive(Clone, Copy, Debug)]
pub struct Cosine {
    pub eps: f64,
}

impl Operator for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity(self.name(), inputs, 2)?;
        let (a, b) = (inputs[0], inputs[1]);
        a.expect_same_shape(self.name(), b)?;
        let na = a.norm().max(self.eps);
        let nb = b.norm().max(self.eps);
        Ok(Tensor::scalar(a.dot(b) / (na * nb)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad.item();
        let (ra, rb) = (a.norm(), b.norm());
        let (na, nb) = (ra.max(self.eps), rb.max(self.eps));
        let s = a.dot(b);
        // d/da [s / (na nb)] = b/(na nb) - s/(na^2 nb) * dna/da, dna/da = a/|a| above eps
        let side = |x: &Tensor, y: &Tensor, rx: f64, nx: f64, ny: f64| -> Result<Tensor> {
            let floored = rx <= self.eps;
            x.zip_map(y, |xv, yv| {
                let mut d = yv / (nx * ny);
                if !floored {
                    d -= s / (nx * nx * ny) * xv / rx;
                }
                g * d
            })
        };
        Ok(vec![
            needs[0].then(|| side(a, b, ra, na, nb)).transpose()?,
            needs[1].then(|| side(b, a, rb, nb, na)).transpose()?,
        ])
    }

    fn kink_distance(&self, inputs: &[&Tensor]) -> Option<f64> {
        Some(
            (inputs[0].norm() - self.eps)
                .abs()
                .min((inputs[1].norm() - self.eps).abs()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_oracle(x: &Tensor, k: &Tensor, pad: usize) -> Tensor {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let at = |c: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                0.0
            } else {
                x.data()[(c * h + i as usize) * w + j as usize]
            }
        };
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for c in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let xi = i as isize + u as isize - pad as isize;
                                let xj = j as isize + v as isize - pad as isize;
                                s += at(c, xi, xj) * k.data()[((o * c_in + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = s;
                }
            }
        }
        Tensor::new(vec![c_out, oh, ow], out).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = Conv2d { padding: 0 }.forward(&[&x, &k]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ones_sum() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = Conv2d { padding: 0 }.forward(&[&x, &k]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for pad in [0, 1, 2] {
            let x = random(&[2, 8, 8], &mut rng);
            let k = random(&[4, 2, 3, 3], &mut rng);
            let y = Conv2d { padding: pad }.forward(&[&x, &k]).unwrap();
            let want = conv_oracle(&x, &k, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = Conv2d { padding: 0 }.forward(&[&x, &k]).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
        let k = Tensor::zeros(&[1, 2, 5, 3]);
        let err = Conv2d { padding: 0 }.forward(&[&x, &k]).unwrap_err();
        assert!(err.to_string().contains("height axis"), "{err}");
    }

    #[test]
    fn relu_values_and_grad() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(Relu.forward(&[&x]).unwrap().data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec(vec![0.5, 3.0]);
        assert_eq!(Relu.forward(&[&pos]).unwrap(), pos);

        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_grad_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn fc_examples() {
        let x = Tensor::from_vec(vec![2.0, 3.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        assert_eq!(Fc.forward(&[&x, &eye, &zero]).unwrap(), x);
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let y = Fc.forward(&[&x, &w, &Tensor::zeros(&[1])]).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn fc_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[32], &mut rng);
        let w = random(&[16, 32], &mut rng);
        let b = random(&[16], &mut rng);
        let y = Fc.forward(&[&x, &w, &b]).unwrap();
        for r in 0..16 {
            let mut s = b.data()[r];
            for c in 0..32 {
                s += w.data()[r * 32 + c] * x.data()[c];
            }
            assert!((y.data()[r] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn fc_dimension_mismatch() {
        let x = Tensor::zeros(&[3]);
        let w = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            Fc.forward(&[&x, &w, &Tensor::zeros(&[2])]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pad_then_unpad_gradient_is_identity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.pad2d(x, 2).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 7, 8]);
        assert_eq!(g.value(p).sum(), g.value(x).sum());
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cosine_degenerate_is_finite() {
        let z = Tensor::zeros(&[3]);
        let c = Cosine { eps: 1e-6 }.forward(&[&z, &z]).unwrap();
        assert_eq!(c.item(), 0.0);
    }
}
