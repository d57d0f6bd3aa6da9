//! Raw array kernels. No graph bookkeeping here; shapes are assumed valid.

use super::tensor::numel;

/// Strides of `shape` aligned to the trailing dims of `out`, zero where the
/// dimension is broadcast.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
pub(crate) fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for k in 0..inner {
            f(o + k, oa + k * ia, ob + k * ib);
        }
        o += inner;
        if o >= total {
            break;
        }
        // odometer over the outer dims
        let mut d = rank - 1;
        loop {
            d -= 1;
            counter[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if counter[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

pub(crate) fn zip_broadcast(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    out: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if ash == out && bsh == out {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(ash, out);
    let sb = broadcast_strides(bsh, out);
    let mut res = vec![0.0; numel(out)];
    walk2(out, &sa, &sb, |o, ia, ib| res[o] = f(a[ia], b[ib]));
    res
}

/// Sums `x` (shaped `xsh`) down to `target`, which must broadcast to `xsh`.
pub(crate) fn sum_to(x: &[f64], xsh: &[usize], target: &[usize]) -> Vec<f64> {
    if xsh == target {
        return x.to_vec();
    }
    let st = broadcast_strides(target, xsh);
    let ident: Vec<usize> = contiguous_strides(xsh);
    let mut res = vec![0.0; numel(target)];
    walk2(xsh, &ident, &st, |_, ix, it| res[it] += x[ix]);
    res
}

pub(crate) fn broadcast_to(x: &[f64], xsh: &[usize], target: &[usize]) -> Vec<f64> {
    if xsh == target {
        return x.to_vec();
    }
    let sx = broadcast_strides(xsh, target);
    let zero = vec![0; target.len()];
    let mut res = vec![0.0; numel(target)];
    walk2(target, &sx, &zero, |o, ix, _| res[o] = x[ix]);
    res
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

pub(crate) fn permute(x: &[f64], xsh: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out: Vec<usize> = perm.iter().map(|&p| xsh[p]).collect();
    let xs = contiguous_strides(xsh);
    let src: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let zero = vec![0; out.len()];
    let mut res = vec![0.0; x.len()];
    walk2(&out, &src, &zero, |o, ix, _| res[o] = x[ix]);
    (res, out)
}

/// `[m,k] x [k,n] -> [m,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    /// Output rows `i` for which `i + di` stays inside the image.
    #[inline]
    fn range(len: usize, d: isize) -> (usize, usize) {
        let lo = if d < 0 { (-d) as usize } else { 0 };
        let hi = if d > 0 { len.saturating_sub(d as usize) } else { len };
        (lo, hi.max(lo))
    }
}

/// Same-padded stride-1 cross-correlation: `x [B,Cin,H,W]`, `w [Cout,Cin,k,k]`.
pub(crate) fn conv2d(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { batch, cin, cout, h, w: wd, k } = d;
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let mut y = vec![0.0; batch * cout * hw];
    for b in 0..batch {
        for o in 0..cout {
            let yo = &mut y[(b * cout + o) * hw..(b * cout + o + 1) * hw];
            for c in 0..cin {
                let xc = &x[(b * cin + c) * hw..(b * cin + c + 1) * hw];
                for p in 0..k {
                    let di = p as isize - pad;
                    let (i0, i1) = ConvDims::range(h, di);
                    for q in 0..k {
                        let wv = w[((o * cin + c) * k + p) * k + q];
                        if wv == 0.0 {
                            continue;
                        }
                        let dj = q as isize - pad;
                        let (j0, j1) = ConvDims::range(wd, dj);
                        for i in i0..i1 {
                            let si = (i as isize + di) as usize;
                            let yrow = &mut yo[i * wd + j0..i * wd + j1];
                            let start = (si * wd) as isize + j0 as isize + dj;
                            let xrow = &xc[start as usize..start as usize + (j1 - j0)];
                            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                *yv += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv2d`] with respect to its input: `g [B,Cout,H,W]` -> `[B,Cin,H,W]`.
pub(crate) fn conv2d_bwd_data(g: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { batch, cin, cout, h, w: wd, k } = d;
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let mut gx = vec![0.0; batch * cin * hw];
    for b in 0..batch {
        for c in 0..cin {
            let gxc = &mut gx[(b * cin + c) * hw..(b * cin + c + 1) * hw];
            for o in 0..cout {
                let go = &g[(b * cout + o) * hw..(b * cout + o + 1) * hw];
                for p in 0..k {
                    let di = p as isize - pad;
                    let (i0, i1) = ConvDims::range(h, di);
                    for q in 0..k {
                        let wv = w[((o * cin + c) * k + p) * k + q];
                        if wv == 0.0 {
                            continue;
                        }
                        let dj = q as isize - pad;
                        let (j0, j1) = ConvDims::range(wd, dj);
                        for i in i0..i1 {
                            let si = (i as isize + di) as usize;
                            let grow = &go[i * wd + j0..i * wd + j1];
                            let start = ((si * wd) as isize + j0 as isize + dj) as usize;
                            let xrow = &mut gxc[start..start + (j1 - j0)];
                            for (xv, &gv) in xrow.iter_mut().zip(grow) {
                                *xv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint of [`conv2d`] with respect to its filter: `x [B,Cin,H,W]`, `g [B,Cout,H,W]` -> `[Cout,Cin,k,k]`.
pub(crate) fn conv2d_bwd_filter(x: &[f64], g: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { batch, cin, cout, h, w: wd, k } = d;
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let mut gw = vec![0.0; cout * cin * k * k];
    for b in 0..batch {
        for o in 0..cout {
            let go = &g[(b * cout + o) * hw..(b * cout + o + 1) * hw];
            for c in 0..cin {
                let xc = &x[(b * cin + c) * hw..(b * cin + c + 1) * hw];
                for p in 0..k {
                    let di = p as isize - pad;
                    let (i0, i1) = ConvDims::range(h, di);
                    for q in 0..k {
                        let dj = q as isize - pad;
                        let (j0, j1) = ConvDims::range(wd, dj);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let si = (i as isize + di) as usize;
                            let grow = &go[i * wd + j0..i * wd + j1];
                            let start = ((si * wd) as isize + j0 as isize + dj) as usize;
                            let xrow = &xc[start..start + (j1 - j0)];
                            acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gw[((o * cin + c) * k + p) * k + q] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Sums non-overlapping `f x f` blocks of the trailing two dims.
pub(crate) fn sum_pool(x: &[f64], lead: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let mut y = vec![0.0; lead * ho * wo];
    for l in 0..lead {
        for i in 0..h {
            for j in 0..w {
                y[(l * ho + i / f) * wo + j / f] += x[(l * h + i) * w + j];
            }
        }
    }
    y
}

/// Nearest-neighbour upsampling by `f` of the trailing two dims.
pub(crate) fn upsample(x: &[f64], lead: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut y = vec![0.0; lead * ho * wo];
    for l in 0..lead {
        for i in 0..ho {
            for j in 0..wo {
                y[(l * ho + i) * wo + j] = x[(l * h + i / f) * w + j / f];
            }
        }
    }
    y
}

/// Keeps the top-left element of every `f x f` block.
pub(crate) fn subsample(x: &[f64], lead: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let mut y = vec![0.0; lead * ho * wo];
    for l in 0..lead {
        for i in 0..ho {
            for j in 0..wo {
                y[(l * ho + i) * wo + j] = x[(l * h + i * f) * w + j * f];
            }
        }
    }
    y
}

/// Adjoint of [`subsample`]: places each value at the top-left of a zero block.
pub(crate) fn scatter_up(x: &[f64], lead: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut y = vec![0.0; lead * ho * wo];
    for l in 0..lead {
        for i in 0..h {
            for j in 0..w {
                y[(l * ho + i * f) * wo + j * f] = x[(l * h + i) * w + j];
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
        let pad = (d.k / 2) as isize;
        let mut y = vec![0.0; d.batch * d.cout * d.h * d.w];
        for b in 0..d.batch {
            for o in 0..d.cout {
                for i in 0..d.h {
                    for j in 0..d.w {
                        let mut acc = 0.0;
                        for c in 0..d.cin {
                            for p in 0..d.k {
                                for q in 0..d.k {
                                    let si = i as isize + p as isize - pad;
                                    let sj = j as isize + q as isize - pad;
                                    if si < 0 || sj < 0 || si >= d.h as isize || sj >= d.w as isize {
                                        continue;
                                    }
                                    acc += w[((o * d.cin + c) * d.k + p) * d.k + q]
                                        * x[((b * d.cin + c) * d.h + si as usize) * d.w + sj as usize];
                                }
                            }
                        }
                        y[((b * d.cout + o) * d.h + i) * d.w + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * s).sin() * 1.7).round() / 2.0 + 0.25).collect()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for k in [1, 3] {
            let d = ConvDims { batch: 2, cin: 3, cout: 2, h: 5, w: 4, k };
            let x = seq(2 * 3 * 20, 0.37);
            let w = seq(2 * 3 * k * k, 1.3);
            assert_eq!(conv2d(&x, &w, d), naive_conv(&x, &w, d));
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let d = ConvDims { batch: 1, cin: 2, cout: 3, h: 4, w: 5, k: 3 };
        let x = seq(2 * 20, 0.7);
        let w = seq(3 * 2 * 9, 0.9);
        let g = seq(3 * 20, 1.1);
        let y = conv2d(&x, &w, d);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let gx = conv2d_bwd_data(&g, &w, d);
        let rx: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let gw = conv2d_bwd_filter(&x, &g, d);
        let rw: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-12);
        assert!((lhs - rw).abs() < 1e-12);
    }

    #[test]
    fn sum_to_reverses_broadcast() {
        let x = vec![1.0, 2.0, 3.0];
        let b = broadcast_to(&x, &[3, 1], &[2, 3, 4]);
        assert_eq!(b.len(), 24);
        assert_eq!(sum_to(&b, &[2, 3, 4], &[3, 1]), vec![8.0, 16.0, 24.0]);
    }

    #[test]
    fn permute_transposes() {
        let (t, s) = permute(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
