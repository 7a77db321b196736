//! Same-padded 2D convolution as one GEMM per kernel offset over a
//! zero-padded, channel-major copy of the input.

use crate::error::{Error, Result};
use crate::linalg::{gemm_view, View};

#[derive(Clone, Copy, Debug)]
pub(super) struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
}

impl Geometry {
    pub fn new(input: &[usize], kernel: &[usize], bias: Option<&[usize]>) -> Result<Self> {
        let err = |d: String| Err(Error::shape("conv2d", d));
        if input.len() != 4 || kernel.len() != 4 {
            return err(format!("input {input:?}, kernel {kernel:?} must both be 4-D"));
        }
        if kernel[1] != input[1] {
            return err(format!(
                "kernel expects {} input channels, input has {}",
                kernel[1], input[1]
            ));
        }
        if kernel[2] % 2 == 0 || kernel[3] % 2 == 0 {
            return err(format!("kernel size {}x{} must be odd", kernel[2], kernel[3]));
        }
        if let Some(b) = bias {
            if b != [kernel[0]] {
                return err(format!("bias {b:?} does not match {} outputs", kernel[0]));
            }
        }
        Ok(Self {
            batch: input[0],
            c_in: input[1],
            h: input[2],
            w: input[3],
            c_out: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.h, self.w]
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Zero-padded, channel-major copy of a `[batch, c, h, w]` tensor.
///
/// Row `ch` holds `margin` zeros, then `batch` padded frames of `(h + kh - 1)
/// x (w + kw - 1)` values, then `margin` zeros. A kernel offset is then a
/// constant shift along the row, so each offset is one GEMM over a shifted view.
struct Padded {
    data: Vec<f64>,
    /// Row length.
    ld: usize,
    margin: usize,
    /// Padded frame width.
    pw: usize,
    /// Values per padded frame.
    frame: usize,
}

impl Padded {
    fn layout(g: &Geometry) -> (usize, usize, usize) {
        let pw = g.w + g.kw - 1;
        let frame = (g.h + g.kh - 1) * pw;
        let margin = (g.kh / 2) * pw + g.kw / 2;
        (pw, frame, margin)
    }

    fn zeros(g: &Geometry, channels: usize) -> Self {
        let (pw, frame, margin) = Self::layout(g);
        let ld = g.batch * frame + 2 * margin;
        Self {
            data: vec![0.0; channels * ld],
            ld,
            margin,
            pw,
            frame,
        }
    }

    /// Offset of pixel `(y, x)` of sample `b` within a row.
    fn at(&self, g: &Geometry, b: usize, y: usize, x: usize) -> usize {
        self.margin + b * self.frame + (y + g.kh / 2) * self.pw + x + g.kw / 2
    }

    fn from_tensor(g: &Geometry, x: &[f64], channels: usize) -> Self {
        let mut p = Self::zeros(g, channels);
        let hw = g.hw();
        for b in 0..g.batch {
            for ch in 0..channels {
                let src = &x[(b * channels + ch) * hw..][..hw];
                for y in 0..g.h {
                    let o = ch * p.ld + p.at(g, b, y, 0);
                    p.data[o..o + g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
                }
            }
        }
        p
    }

    fn to_tensor(&self, g: &Geometry, channels: usize, out: &mut [f64], bias: Option<&[f64]>) {
        let hw = g.hw();
        for b in 0..g.batch {
            for ch in 0..channels {
                let shift = bias.map_or(0.0, |v| v[ch]);
                let dst = &mut out[(b * channels + ch) * hw..][..hw];
                for y in 0..g.h {
                    let o = ch * self.ld + self.at(g, b, y, 0);
                    for (d, s) in dst[y * g.w..(y + 1) * g.w].iter_mut().zip(&self.data[o..o + g.w]) {
                        *d = s + shift;
                    }
                }
            }
        }
    }

    /// Start of the shifted window for kernel offset `(dy, dx)`.
    fn shift(&self, dy: usize, dx: usize) -> usize {
        dy * self.pw + dx
    }

    /// Number of positions covered by one GEMM.
    fn span(&self, g: &Geometry) -> usize {
        g.batch * self.frame
    }
}

/// Kernel slice `[c_out, c_in]` for offset `(dy, dx)` as a strided view.
fn tap<'a>(g: &Geometry, kernel: &'a [f64], dy: usize, dx: usize) -> View<'a> {
    let taps = g.kh * g.kw;
    View {
        data: &kernel[dy * g.kw + dx..],
        row: g.c_in * taps,
        col: taps,
    }
}

pub(super) fn forward(g: &Geometry, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let x = Padded::from_tensor(g, input, g.c_in);
    let mut y = Padded::zeros(g, g.c_out);
    let n = x.span(g);
    let mut first = true;
    for dy in 0..g.kh {
        for dx in 0..g.kw {
            let src = View {
                data: &x.data[x.shift(dy, dx)..],
                row: x.ld,
                col: 1,
            };
            let margin = y.margin;
            gemm_view(g.c_out, g.c_in, n, tap(g, kernel, dy, dx), src, &mut y.data[margin..], y.ld, !first);
            first = false;
        }
    }
    let mut out = vec![0.0; g.batch * g.c_out * g.hw()];
    y.to_tensor(g, g.c_out, &mut out, bias);
    out
}

pub(super) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(super) fn backward(
    g: &Geometry,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    want_input: bool,
) -> ConvGrads {
    let hw = g.hw();
    let mut bias = vec![0.0; g.c_out];
    for (i, plane) in d_out.chunks(hw).enumerate() {
        bias[i % g.c_out] += plane.iter().sum::<f64>();
    }
    // Border positions of the padded gradient stay zero, so every shifted
    // product below only sees true output positions.
    let dy_pad = Padded::from_tensor(g, d_out, g.c_out);
    let x = Padded::from_tensor(g, input, g.c_in);
    let n = x.span(g);
    let taps = g.kh * g.kw;
    let dout = View {
        data: &dy_pad.data[dy_pad.margin..],
        row: dy_pad.ld,
        col: 1,
    };

    let mut d_kernel = vec![0.0; g.c_out * g.c_in * taps];
    let mut d_tap = vec![0.0; g.c_out * g.c_in];
    for dy in 0..g.kh {
        for dx in 0..g.kw {
            // dK[:, :, dy, dx] = dY * X_shifted^T
            let xt = View {
                data: &x.data[x.shift(dy, dx)..],
                row: 1,
                col: x.ld,
            };
            gemm_view(g.c_out, n, g.c_in, dout, xt, &mut d_tap, g.c_in, false);
            let t = dy * g.kw + dx;
            for (i, v) in d_tap.iter().enumerate() {
                d_kernel[i * taps + t] = *v;
            }
        }
    }
    drop(x);

    let input_grad = want_input.then(|| {
        let mut dx_pad = Padded::zeros(g, g.c_in);
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                // dX_shifted += K[:, :, dy, dx]^T * dY
                let k = tap(g, kernel, dy, dx);
                let kt = View {
                    data: k.data,
                    row: k.col,
                    col: k.row,
                };
                let s = dx_pad.shift(dy, dx);
                gemm_view(g.c_in, g.c_out, n, kt, dout, &mut dx_pad.data[s..], dx_pad.ld, true);
            }
        }
        let mut d_in = vec![0.0; input.len()];
        dx_pad.to_tensor(g, g.c_in, &mut d_in, None);
        d_in
    });
    ConvGrads {
        input: input_grad,
        kernel: d_kernel,
        bias,
    }
}
