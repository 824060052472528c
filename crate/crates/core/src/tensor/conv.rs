//! im2col convolution kernels. Work is split per batch sample; reductions over
//! the batch are summed in sample order so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use super::linalg::{matmul, Layout};
use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let npix = g.out_pixels();
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * npix;
                let dst = &mut cols[row..row + npix];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let npix = g.out_pixels();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * npix;
                let src = &cols[row..row + npix];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let npix = g.out_pixels();
    let mut out = vec![T::zero(); g.batch * g.out_ch * npix];
    if npix == 0 {
        return out;
    }
    out.par_chunks_mut(g.out_ch * npix)
        .zip(x.par_chunks(g.in_len().max(1)))
        .for_each(|(o, xn)| {
            for (oc, row) in o.chunks_mut(npix).enumerate() {
                row.fill(b[oc]);
            }
            if g.pointwise() {
                matmul(g.out_ch, g.in_ch, npix, w, Layout::Normal, xn, Layout::Normal, T::one(), o);
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * npix];
                im2col(g, xn, &mut cols);
                let kk = g.patch_len();
                matmul(g.out_ch, kk, npix, w, Layout::Normal, &cols, Layout::Normal, T::one(), o);
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_dx, need_dw, need_db] = need;
    let npix = g.out_pixels();
    let kk = g.patch_len();

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let dn = &dout[n * g.out_ch * npix..(n + 1) * g.out_ch * npix];
            let mut dx = Vec::new();
            let mut dw = Vec::new();
            let mut db = Vec::new();
            if need_dw {
                dw = vec![T::zero(); g.out_ch * kk];
                if g.pointwise() {
                    matmul(g.out_ch, npix, kk, dn, Layout::Normal, xn, Layout::Transposed, T::zero(), &mut dw);
                } else {
                    let mut cols = vec![T::zero(); kk * npix];
                    im2col(g, xn, &mut cols);
                    matmul(g.out_ch, npix, kk, dn, Layout::Normal, &cols, Layout::Transposed, T::zero(), &mut dw);
                }
            }
            if need_db {
                db = dn.chunks(npix.max(1)).map(|row| row.iter().copied().sum()).collect();
            }
            if need_dx {
                if g.pointwise() {
                    dx = vec![T::zero(); g.in_len()];
                    matmul(kk, g.out_ch, npix, w, Layout::Transposed, dn, Layout::Normal, T::zero(), &mut dx);
                } else {
                    let mut dcols = vec![T::zero(); kk * npix];
                    matmul(kk, g.out_ch, npix, w, Layout::Transposed, dn, Layout::Normal, T::zero(), &mut dcols);
                    dx = vec![T::zero(); g.in_len()];
                    col2im(g, &dcols, &mut dx);
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };
    if need_dx {
        grads.input = Some(per_sample.iter().flat_map(|s| s.0.iter().copied()).collect());
    }
    if need_dw {
        let mut acc = vec![T::zero(); g.out_ch * kk];
        for s in &per_sample {
            for (a, v) in acc.iter_mut().zip(&s.1) {
                *a += *v;
            }
        }
        grads.weight = Some(acc);
    }
    if need_db {
        let mut acc = vec![T::zero(); g.out_ch];
        for s in &per_sample {
            for (a, v) in acc.iter_mut().zip(&s.2) {
                *a += *v;
            }
        }
        grads.bias = Some(acc);
    }
    grads
}
