//! Per-layer numeric kernels. Batches are `(N, C, H, W)` or `(N, F)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::layer::{Conv2d, Pool};

/// Unfolds one sample into a `(C·m·n) × (Ho·Wo)` column matrix. Rows are
/// ordered input-channel major, then kernel row, then kernel column.
fn im2col(conv: &Conv2d, x: &[f32], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [f32]) {
    let (m, n) = conv.kernel;
    let p = ho * wo;
    let pad = conv.padding as isize;
    let s = conv.stride;
    for ic in 0..conv.in_channels {
        let plane = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..m {
            for kx in 0..n {
                let row = &mut cols[((ic * m + ky) * n + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad;
                    let out = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *o = if ix < 0 || ix >= w as isize {
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

fn col2im(conv: &Conv2d, cols: &[f32], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f32]) {
    let (m, n) = conv.kernel;
    let p = ho * wo;
    let pad = conv.padding as isize;
    let s = conv.stride;
    for ic in 0..conv.in_channels {
        let plane = &mut dx[ic * h * w..(ic + 1) * h * w];
        for ky in 0..m {
            for kx in 0..n {
                let row = &cols[((ic * m + ky) * n + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(
    conv: &Conv2d,
    x: &[f32],
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let o = conv.out_channels;
    let p = ho * wo;
    let k = conv.in_channels * conv.kernel_area();
    let in_len = conv.in_channels * h * w;
    let wt = conv.weight.data();
    let mut cols = vec![0.0f32; k * p];
    let mut y = vec![0.0f32; n * o * p];
    for s in 0..n {
        im2col(conv, &x[s * in_len..(s + 1) * in_len], h, w, ho, wo, &mut cols);
        let ys = &mut y[s * o * p..(s + 1) * o * p];
        for oc in 0..o {
            let acc = &mut ys[oc * p..(oc + 1) * p];
            let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[oc]);
            acc.fill(b);
            let wrow = &wt[oc * k..(oc + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let col = &cols[kk * p..(kk + 1) * p];
                for (a, &c) in acc.iter_mut().zip(col) {
                    *a += wv * c;
                }
            }
        }
    }
    y
}

/// Returns `(dx, dweight, dbias)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    conv: &Conv2d,
    x: &[f32],
    dy: &[f32],
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let o = conv.out_channels;
    let p = ho * wo;
    let k = conv.in_channels * conv.kernel_area();
    let in_len = conv.in_channels * h * w;
    let wt = conv.weight.data();
    let mut cols = vec![0.0f32; k * p];
    let mut dcols = vec![0.0f32; k * p];
    let mut dx = vec![0.0f32; n * in_len];
    let mut dw = vec![0.0f32; o * k];
    let mut db = vec![0.0f32; o];
    for s in 0..n {
        im2col(conv, &x[s * in_len..(s + 1) * in_len], h, w, ho, wo, &mut cols);
        let dys = &dy[s * o * p..(s + 1) * o * p];
        dcols.fill(0.0);
        for oc in 0..o {
            let g = &dys[oc * p..(oc + 1) * p];
            db[oc] += g.iter().sum::<f32>();
            let dwrow = &mut dw[oc * k..(oc + 1) * k];
            let wrow = &wt[oc * k..(oc + 1) * k];
            for kk in 0..k {
                let col = &cols[kk * p..(kk + 1) * p];
                dwrow[kk] += col.iter().zip(g).map(|(a, b)| a * b).sum::<f32>();
                let wv = wrow[kk];
                if wv != 0.0 {
                    let dc = &mut dcols[kk * p..(kk + 1) * p];
                    for (d, &gv) in dc.iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
        col2im(conv, &dcols, h, w, ho, wo, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    (dx, dw, db)
}

/// Output plus the flat argmax index (within the sample) per output value.
#[allow(clippy::too_many_arguments)]
pub(crate) fn max_pool_forward(
    pool: Pool,
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f32>, Vec<u32>) {
    let mut y = vec![0.0f32; n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            let plane = &x[base..base + h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0usize;
                    for ky in 0..pool.window {
                        for kx in 0..pool.window {
                            let idx = (oy * pool.stride + ky) * w + ox * pool.stride + kx;
                            if plane[idx] > best {
                                best = plane[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = ((s * c + ch) * ho + oy) * wo + ox;
                    y[o] = best;
                    arg[o] = (base + at) as u32;
                }
            }
        }
    }
    (y, arg)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn avg_pool_forward(
    pool: Pool,
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let area = (pool.window * pool.window) as f32;
    let mut y = vec![0.0f32; n * c * ho * wo];
    for plane_i in 0..n * c {
        let plane = &x[plane_i * h * w..(plane_i + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for ky in 0..pool.window {
                    for kx in 0..pool.window {
                        acc += plane[(oy * pool.stride + ky) * w + ox * pool.stride + kx];
                    }
                }
                y[(plane_i * ho + oy) * wo + ox] = acc / area;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn avg_pool_backward(
    pool: Pool,
    dy: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let area = (pool.window * pool.window) as f32;
    let mut dx = vec![0.0f32; n * c * h * w];
    for plane_i in 0..n * c {
        let plane = &mut dx[plane_i * h * w..(plane_i + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(plane_i * ho + oy) * wo + ox] / area;
                for ky in 0..pool.window {
                    for kx in 0..pool.window {
                        plane[(oy * pool.stride + ky) * w + ox * pool.stride + kx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// `y = x·Wᵀ + b` for `x: (n, in)`, `W: (out, in)`.
pub(crate) fn linear_forward(
    x: &[f32],
    wt: &[f32],
    bias: Option<&[f32]>,
    n: usize,
    fin: usize,
    fout: usize,
) -> Vec<f32> {
    let mut y = vec![0.0f32; n * fout];
    for s in 0..n {
        let xs = &x[s * fin..(s + 1) * fin];
        for o in 0..fout {
            let wrow = &wt[o * fin..(o + 1) * fin];
            let dot: f32 = xs.iter().zip(wrow).map(|(a, b)| a * b).sum();
            y[s * fout + o] = dot + bias.map_or(0.0, |b| b[o]);
        }
    }
    y
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn linear_backward(
    x: &[f32],
    wt: &[f32],
    dy: &[f32],
    n: usize,
    fin: usize,
    fout: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * fin];
    let mut dw = vec![0.0f32; fout * fin];
    let mut db = vec![0.0f32; fout];
    for s in 0..n {
        let xs = &x[s * fin..(s + 1) * fin];
        let dxs = &mut dx[s * fin..(s + 1) * fin];
        for o in 0..fout {
            let g = dy[s * fout + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wrow = &wt[o * fin..(o + 1) * fin];
            let dwrow = &mut dw[o * fin..(o + 1) * fin];
            for i in 0..fin {
                dwrow[i] += g * xs[i];
                dxs[i] += g * wrow[i];
            }
        }
    }
    (dx, dw, db)
}
