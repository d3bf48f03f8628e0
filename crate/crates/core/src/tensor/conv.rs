//! Same-padded, stride-1 2D convolution via im2col + GEMM.

use super::gemm::{gemm, MatRef};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one image `[c_in, h, w]` into `[c_in*k*k, h*w]`.
fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad());
    let hw = g.hw();
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &image[ci * hw..(ci + 1) * hw];
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx - pad;
                let x_lo = (-dx).max(0);
                let x_hi = (w - dx).min(w);
                for y in 0..h {
                    let sy = y + ky - pad;
                    let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h || x_lo >= x_hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    out_row[..x_lo as usize].fill(0.0);
                    out_row[x_hi as usize..].fill(0.0);
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    out_row[x_lo as usize..x_hi as usize]
                        .copy_from_slice(&src[(x_lo + dx) as usize..(x_hi + dx) as usize]);
                }
                row += 1;
            }
        }
    }
}

/// Folds `[c_in*k*k, h*w]` back, accumulating into `[c_in, h, w]`.
fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad());
    let hw = g.hw();
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &mut image[ci * hw..(ci + 1) * hw];
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx - pad;
                let x_lo = (-dx).max(0);
                let x_hi = (w - dx).min(w);
                for y in 0..h {
                    let sy = y + ky - pad;
                    if sy < 0 || sy >= h || x_lo >= x_hi {
                        continue;
                    }
                    let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    let s = &src[(y * w) as usize..((y + 1) * w) as usize];
                    for x in x_lo..x_hi {
                        dst[(x + dx) as usize] += s[x as usize];
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = g.hw();
    let rows = g.col_rows();
    let mut out = vec![0.0; g.n * g.c_out * hw];
    let mut cols = vec![0.0; rows * hw];
    for n in 0..g.n {
        let img = &input[n * g.c_in * hw..(n + 1) * g.c_in * hw];
        let dst = &mut out[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        for (co, b) in bias.iter().enumerate() {
            dst[co * hw..(co + 1) * hw].fill(*b);
        }
        let col_view: &[f64] = if g.k == 1 {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm(MatRef::row_major(weight, g.c_out, rows), MatRef::row_major(col_view, rows, hw), dst, 1.0);
    }
    out
}

/// Returns gradients for (input, weight, bias); each is computed only if requested.
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.hw();
    let rows = g.col_rows();
    let mut d_in = want.0.then(|| vec![0.0; input.len()]);
    let mut d_w = want.1.then(|| vec![0.0; weight.len()]);
    let mut d_b = want.2.then(|| vec![0.0; g.c_out]);
    let mut cols = vec![0.0; rows * hw];
    let mut d_cols = vec![0.0; if want.0 { rows * hw } else { 0 }];
    for n in 0..g.n {
        let go = &grad_out[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        if let Some(db) = d_b.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += go[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
        }
        if let Some(dw) = d_w.as_mut() {
            let img = &input[n * g.c_in * hw..(n + 1) * g.c_in * hw];
            let col_view: &[f64] = if g.k == 1 {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            gemm(MatRef::row_major(go, g.c_out, hw), MatRef::transposed(col_view, rows, hw), dw, 1.0);
        }
        if let Some(di) = d_in.as_mut() {
            let dst = &mut di[n * g.c_in * hw..(n + 1) * g.c_in * hw];
            if g.k == 1 {
                gemm(MatRef::transposed(weight, g.c_out, rows), MatRef::row_major(go, g.c_out, hw), dst, 1.0);
            } else {
                gemm(MatRef::transposed(weight, g.c_out, rows), MatRef::row_major(go, g.c_out, hw), &mut d_cols, 0.0);
                col2im_add(g, &d_cols, dst);
            }
        }
    }
    (d_in, d_w, d_b)
}
