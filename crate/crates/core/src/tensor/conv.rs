use serde::{Deserialize, Serialize};

use super::scalar::{matmul, Scalar};
use crate::error::{shape_err, Error, Result};

/// Zero padding applied before (`begin`) and after (`end`) both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub begin: usize,
    pub end: usize,
}

impl Padding {
    pub fn same(p: usize) -> Self {
        Self { begin: p, end: p }
    }

    /// Padding that preserves spatial extent at stride 1. Even effective
    /// extents put the extra pixel on the right/bottom.
    pub fn preserving(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self {
            begin: total / 2,
            end: total - total / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::same(0),
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dCfg {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding: Padding::same(padding),
            ..Self::default()
        }
    }
}

/// Fully resolved extents of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cfg: Conv2dCfg,
}

impl ConvGeom {
    pub fn resolve(x: &[usize], w: &[usize], cfg: Conv2dCfg) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(shape_err!(
                "conv2d needs NCHW input and OIHW weight, got {x:?} and {w:?}"
            ));
        }
        if cfg.stride == 0 || cfg.dilation == 0 || cfg.groups == 0 {
            return Err(Error::Config(format!("invalid conv configuration {cfg:?}")));
        }
        let (n, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
        let (c_out, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
        if c_in % cfg.groups != 0 || c_out % cfg.groups != 0 {
            return Err(shape_err!(
                "channels {c_in}->{c_out} not divisible by groups {}",
                cfg.groups
            ));
        }
        if cg != c_in / cfg.groups {
            return Err(shape_err!(
                "weight expects {cg} channels per group, input provides {}",
                c_in / cfg.groups
            ));
        }
        let span = |size: usize, k: usize| -> Option<usize> {
            let padded = size + cfg.padding.begin + cfg.padding.end;
            let reach = cfg.dilation * (k - 1) + 1;
            padded.checked_sub(reach).map(|r| r / cfg.stride + 1)
        };
        match (span(h, kh), span(wd, kw)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Self {
                n,
                c_in,
                h,
                w: wd,
                c_out,
                kh,
                kw,
                ho,
                wo,
                cfg,
            }),
            _ => Err(Error::Config(format!(
                "conv2d output extent is non-positive for input {h}x{wd}, kernel {kh}x{kw}, {cfg:?}"
            ))),
        }
    }

    fn cg(&self) -> usize {
        self.c_in / self.cfg.groups
    }

    fn og(&self) -> usize {
        self.c_out / self.cfg.groups
    }

    fn col_rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.cfg.stride == 1
            && self.cfg.padding.begin == 0
            && self.cfg.padding.end == 0
    }

    /// Input coordinate read by output `o` at kernel tap `k`, if inside the map.
    #[inline]
    fn source(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.cfg.stride + k * self.cfg.dilation) as isize
            - self.cfg.padding.begin as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }

    /// Unfolds one group of one sample into `[cg·kh·kw, ho·wo]`.
    fn im2col<F: Scalar>(&self, x: &[F], cols: &mut [F]) {
        let px = self.pixels();
        for c in 0..self.cg() {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * px;
                    for oy in 0..self.ho {
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        match self.source(oy, ki, self.h) {
                            None => dst.iter_mut().for_each(|v| *v = F::zero()),
                            Some(iy) => {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.source(ox, kj, self.w) {
                                        Some(ix) => plane[iy * self.w + ix],
                                        None => F::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Scalar>(&self, cols: &[F], dx: &mut [F]) {
        let px = self.pixels();
        for c in 0..self.cg() {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * px;
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ki, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kj, self.w) {
                                plane[iy * self.w + ix] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<F: Scalar>(g: &ConvGeom, x: &[F], w: &[F], bias: Option<&[F]>) -> Vec<F> {
    let (cg, og, rows, px) = (g.cg(), g.og(), g.col_rows(), g.pixels());
    let in_plane = g.h * g.w;
    let mut out = vec![F::zero(); g.n * g.c_out * px];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); rows * px]
    };
    for n in 0..g.n {
        for grp in 0..g.cfg.groups {
            let xs =
                &x[(n * g.c_in + grp * cg) * in_plane..(n * g.c_in + (grp + 1) * cg) * in_plane];
            let ws = &w[grp * og * rows..(grp + 1) * og * rows];
            let os = &mut out[(n * g.c_out + grp * og) * px..(n * g.c_out + (grp + 1) * og) * px];
            let src: &[F] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            matmul(ws, false, src, false, og, rows, px, os, false);
        }
        if let Some(b) = bias {
            for o in 0..g.c_out {
                let start = (n * g.c_out + o) * px;
                out[start..start + px].iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub x: Option<Vec<F>>,
    pub w: Option<Vec<F>>,
    pub b: Option<Vec<F>>,
}

pub(crate) fn backward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    gout: &[F],
    need: (bool, bool, bool),
) -> ConvGrads<F> {
    let (cg, og, rows, px) = (g.cg(), g.og(), g.col_rows(), g.pixels());
    let in_plane = g.h * g.w;
    let mut gx = need.0.then(|| vec![F::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![F::zero(); w.len()]);
    let gb = need.2.then(|| {
        let mut gb = vec![F::zero(); g.c_out];
        for n in 0..g.n {
            for (o, acc) in gb.iter_mut().enumerate() {
                let start = (n * g.c_out + o) * px;
                *acc += gout[start..start + px].iter().copied().sum::<F>();
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return ConvGrads {
            x: None,
            w: None,
            b: gb,
        };
    }
    let mut cols = vec![F::zero(); rows * px];
    for n in 0..g.n {
        for grp in 0..g.cfg.groups {
            let xr = (n * g.c_in + grp * cg) * in_plane..(n * g.c_in + (grp + 1) * cg) * in_plane;
            let ws = &w[grp * og * rows..(grp + 1) * og * rows];
            let go = &gout[(n * g.c_out + grp * og) * px..(n * g.c_out + (grp + 1) * og) * px];
            if let Some(gw) = gw.as_mut() {
                let src: &[F] = if g.is_pointwise() {
                    &x[xr.clone()]
                } else {
                    g.im2col(&x[xr.clone()], &mut cols);
                    &cols
                };
                let gws = &mut gw[grp * og * rows..(grp + 1) * og * rows];
                // gW[og, rows] += gout[og, px] · colsᵀ[px, rows]
                matmul(go, false, src, true, og, px, rows, gws, true);
            }
            if let Some(gx) = gx.as_mut() {
                if g.is_pointwise() {
                    matmul(ws, true, go, false, rows, og, px, &mut gx[xr], true);
                } else {
                    matmul(ws, true, go, false, rows, og, px, &mut cols, false);
                    g.col2im(&cols, &mut gx[xr]);
                }
            }
        }
    }
    ConvGrads {
        x: gx,
        w: gw,
        b: gb,
    }
}
