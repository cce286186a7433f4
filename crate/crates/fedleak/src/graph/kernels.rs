//! Numeric kernels shared by forward evaluation and the numeric backward
//! pass. All loops are fixed-order so results are bit-reproducible.

use super::{pad_offsets, Padding};

/// `c = op(a) . op(b)` with optional transposes; `a` is `ra x ca`, `b` is
/// `rb x cb` as stored.
pub fn matmul(
    a: &[f64],
    (ra, ca): (usize, usize),
    ta: bool,
    b: &[f64],
    (rb, cb): (usize, usize),
    tb: bool,
    out: &mut [f64],
) {
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let n = if tb { rb } else { cb };
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                for l in 0..k {
                    let av = a[i * ca + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[l * cb..l * cb + n];
                    let orow = &mut out[i * n..i * n + n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for l in 0..k {
                let arow = &a[l * ca..(l + 1) * ca];
                let brow = &b[l * cb..l * cb + n];
                for i in 0..m {
                    let av = arow[i];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..i * n + n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * ca..(i + 1) * ca];
                for j in 0..n {
                    let brow = &b[j * cb..(j + 1) * cb];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += arow[l] * brow[l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a[l * ca + i] * b[j * cb + l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
}

/// Stride-1 2-D convolution. `x: [b,ci,h,w]`, `kernel: [co,ci,kh,kw]`,
/// `out: [b,co,oh,ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (bs, ci, h, w): (usize, usize, usize, usize),
    kernel: &[f64],
    (co, kh, kw): (usize, usize, usize),
    padding: Padding,
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    let (ph, pw) = pad_offsets(kh, kw, padding);
    out.fill(0.0);
    for b in 0..bs {
        for o in 0..co {
            let obase = (b * co + o) * oh * ow;
            for i in 0..ci {
                let xbase = (b * ci + i) * h * w;
                let kbase = (o * ci + i) * kh * kw;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kv = kernel[kbase + dy * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        // out[y][ox] += kv * x[y+dy-ph][ox+dx-pw]
                        for y in 0..oh {
                            let sy = y + dy;
                            if sy < ph || sy - ph >= h {
                                continue;
                            }
                            let xrow = xbase + (sy - ph) * w;
                            let orow = obase + y * ow;
                            let x_lo = pw.saturating_sub(dx);
                            let x_hi = ow.min(w + pw - dx);
                            for ox in x_lo..x_hi {
                                out[orow + ox] += kv * x[xrow + ox + dx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv2d`] w.r.t. `x`: scatter `dy` back through the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad(
    dy: &[f64],
    (bs, co, oh, ow): (usize, usize, usize, usize),
    kernel: &[f64],
    (ci, kh, kw): (usize, usize, usize),
    padding: Padding,
    (h, w): (usize, usize),
    out: &mut [f64],
) {
    let (ph, pw) = pad_offsets(kh, kw, padding);
    out.fill(0.0);
    for b in 0..bs {
        for o in 0..co {
            let ybase = (b * co + o) * oh * ow;
            for i in 0..ci {
                let xbase = (b * ci + i) * h * w;
                let kbase = (o * ci + i) * kh * kw;
                for dy_i in 0..kh {
                    for dx in 0..kw {
                        let kv = kernel[kbase + dy_i * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let sy = y + dy_i;
                            if sy < ph || sy - ph >= h {
                                continue;
                            }
                            let xrow = xbase + (sy - ph) * w;
                            let yrow = ybase + y * ow;
                            let x_lo = pw.saturating_sub(dx);
                            let x_hi = ow.min(w + pw - dx);
                            for ox in x_lo..x_hi {
                                out[xrow + ox + dx - pw] += kv * dy[yrow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv2d`] w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel_grad(
    x: &[f64],
    (bs, ci, h, w): (usize, usize, usize, usize),
    dy: &[f64],
    (co, oh, ow): (usize, usize, usize),
    padding: Padding,
    (kh, kw): (usize, usize),
    out: &mut [f64],
) {
    let (ph, pw) = pad_offsets(kh, kw, padding);
    out.fill(0.0);
    for b in 0..bs {
        for o in 0..co {
            let ybase = (b * co + o) * oh * ow;
            for i in 0..ci {
                let xbase = (b * ci + i) * h * w;
                let kbase = (o * ci + i) * kh * kw;
                for dy_i in 0..kh {
                    for dx in 0..kw {
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let sy = y + dy_i;
                            if sy < ph || sy - ph >= h {
                                continue;
                            }
                            let xrow = xbase + (sy - ph) * w;
                            let yrow = ybase + y * ow;
                            let x_lo = pw.saturating_sub(dx);
                            let x_hi = ow.min(w + pw - dx);
                            for ox in x_lo..x_hi {
                                acc += dy[yrow + ox] * x[xrow + ox + dx - pw];
                            }
                        }
                        out[kbase + dy_i * kw + dx] += acc;
                    }
                }
            }
        }
    }
}

/// `[b,c,h,w] -> [b,c,h/2,w/2]`, each output the mean of a 2x2 block.
pub fn avg_pool2(x: &[f64], (bc, h, w): (usize, usize, usize), out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..bc {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for y in 0..oh {
            let r0 = xb + 2 * y * w;
            let r1 = r0 + w;
            for ox in 0..ow {
                let c = 2 * ox;
                out[ob + y * ow + ox] = (x[r0 + c] + x[r0 + c + 1] + x[r1 + c] + x[r1 + c + 1]) * 0.25;
            }
        }
    }
}

/// Transpose of [`avg_pool2`]: spread each value over its 2x2 block / 4.
pub fn avg_unpool2(x: &[f64], (bc, h, w): (usize, usize, usize), out: &mut [f64]) {
    let (oh, ow) = (h * 2, w * 2);
    for p in 0..bc {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for y in 0..h {
            let r0 = ob + 2 * y * ow;
            let r1 = r0 + ow;
            for xi in 0..w {
                let v = x[xb + y * w + xi] * 0.25;
                let c = 2 * xi;
                out[r0 + c] = v;
                out[r0 + c + 1] = v;
                out[r1 + c] = v;
                out[r1 + c + 1] = v;
            }
        }
    }
}

/// Row-wise stable softmax on `[rows, cols]`.
pub fn softmax(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut denom = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            denom += e;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
}

/// `mean_i(logsumexp(z_i) - sum_k t[i,k] z[i,k])`.
pub fn softmax_cross_entropy(z: &[f64], t: &[f64], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..rows {
        let zrow = &z[r * cols..(r + 1) * cols];
        let trow = &t[r * cols..(r + 1) * cols];
        let max = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lse = 0.0;
        let mut dot = 0.0;
        for (zv, tv) in zrow.iter().zip(trow) {
            lse += (zv - max).exp();
            dot += tv * zv;
        }
        total += max + lse.ln() - dot;
    }
    total / rows as f64
}
