//! 2-D cross-correlation via im2col + GEMM.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

fn out_extent(axis: &str, size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if kernel > padded {
        return Err(Error::Config(format!(
            "kernel {kernel} larger than padded {axis} extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "{axis}: ({size} + 2*{pad} - {kernel}) / {stride} is not an integer"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let (batch, c_in, h, wd) = x.dims4()?;
    let (c_out, wc_in, kh, kw) = w.dims4()?;
    if c_in != wc_in {
        return Err(Error::Dimension(format!(
            "input channel axis (x axis 1 = {c_in}) does not match weight axis 1 = {wc_in}"
        )));
    }
    let oh = out_extent("height", h, kh, stride, pad)?;
    let ow = out_extent("width", wd, kw, stride, pad)?;
    Ok(Geometry {
        batch,
        c_in,
        h,
        w: wd,
        c_out,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Unfolds one `[c_in, h, w]` image into `[c_in*kh*kw, oh*ow]` columns.
fn im2col(g: &Geometry, img: &[f32], cols: &mut [f32]) {
    let pixels = g.pixels();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto a `[c_in, h, w]` image.
fn col2im(g: &Geometry, cols: &[f32], img: &mut [f32]) {
    let pixels = g.pixels();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [batch, c_in, h, w]` with `w: [c_out, c_in, kh, kw]`.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = geometry(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                g.c_out
            )));
        }
    }
    let (patch, pixels) = (g.patch(), g.pixels());
    let out_item = g.c_out * pixels;
    let mut out = vec![0.0f32; g.batch * out_item];
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; patch * pixels]
    };
    for b in 0..g.batch {
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * pixels..(o + 1) * pixels].fill(bv);
            }
        }
        let src = if pointwise {
            x.item(b)
        } else {
            im2col(&g, x.item(b), &mut cols);
            &cols
        };
        gemm_nn(g.c_out, patch, pixels, w.data(), src, dst);
    }
    Tensor::new(vec![g.batch, g.c_out, g.oh, g.ow], out)
}

/// Gradients of `sum(grad_out * conv2d_forward(x, w))`.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub grad_x: Option<Tensor>,
    pub grad_w: Option<Tensor>,
    pub grad_bias: Option<Tensor>,
}

/// Full backward pass: input, weight and bias gradients.
pub fn conv2d_backward(
    grad_out: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv2d_backward_parts(grad_out, x, w, stride, pad, true, true)?;
    Ok((
        g.grad_x.expect("requested"),
        g.grad_w.expect("requested"),
        g.grad_bias.expect("requested"),
    ))
}

/// Backward pass computing only the requested gradients. Bias gradients are
/// produced together with weight gradients.
pub(crate) fn conv2d_backward_parts(
    grad_out: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Result<ConvGrads> {
    let g = geometry(x, w, stride, pad)?;
    let expect = [g.batch, g.c_out, g.oh, g.ow];
    if grad_out.shape() != expect {
        return Err(Error::Dimension(format!(
            "grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            expect
        )));
    }
    let (patch, pixels) = (g.patch(), g.pixels());
    let img = g.c_in * g.h * g.w;
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = vec![0.0f32; patch * pixels];
    let mut grad_w = need_w.then(|| vec![0.0f32; g.c_out * patch]);
    let mut grad_bias = need_w.then(|| vec![0.0f32; g.c_out]);
    let mut grad_x = need_x.then(|| vec![0.0f32; g.batch * img]);

    for b in 0..g.batch {
        let go = grad_out.item(b);
        if let (Some(gw), Some(gb)) = (grad_w.as_mut(), grad_bias.as_mut()) {
            let src: &[f32] = if pointwise {
                x.item(b)
            } else {
                im2col(&g, x.item(b), &mut cols);
                &cols
            };
            gemm_nt(g.c_out, pixels, patch, go, src, gw);
            for (o, gbo) in gb.iter_mut().enumerate() {
                *gbo += go[o * pixels..(o + 1) * pixels].iter().sum::<f32>();
            }
        }
        if let Some(gx) = grad_x.as_mut() {
            let dst = &mut gx[b * img..(b + 1) * img];
            if pointwise {
                gemm_tn(patch, g.c_out, pixels, w.data(), go, dst);
            } else {
                cols.fill(0.0);
                gemm_tn(patch, g.c_out, pixels, w.data(), go, &mut cols);
                col2im(&g, &cols, dst);
            }
        }
    }
    Ok(ConvGrads {
        grad_x: grad_x
            .map(|d| Tensor::new(x.shape().to_vec(), d))
            .transpose()?,
        grad_w: grad_w
            .map(|d| Tensor::new(w.shape().to_vec(), d))
            .transpose()?,
        grad_bias: grad_bias
            .map(|d| Tensor::new(vec![g.c_out], d))
            .transpose()?,
    })
}
