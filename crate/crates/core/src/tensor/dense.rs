//! Fully connected kernels for `x: [b, n]`, `w: [m, n]`, `g: [b, m]`.

/// `out[t][i] += x[t] . w[i]`.
pub(crate) fn forward(b: usize, n: usize, m: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    assert!(x.len() == b * n && w.len() == m * n && out.len() == b * m);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: feature presence checked above; buffer sizes asserted.
        unsafe { avx512::forward(b, n, m, x, w, out) };
        return;
    }
    scalar::forward(b, n, m, x, w, out);
}

/// `gw[i][j] += sum_t g[t][i] * x[t][j]`.
pub(crate) fn weight_grad(b: usize, n: usize, m: usize, g: &[f64], x: &[f64], gw: &mut [f64]) {
    assert!(g.len() == b * m && x.len() == b * n && gw.len() == m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: as above.
        unsafe { avx512::weight_grad(b, n, m, g, x, gw) };
        return;
    }
    scalar::weight_grad(b, n, m, g, x, gw);
}

/// `gx[t][j] += sum_i g[t][i] * w[i][j]`.
pub(crate) fn input_grad(b: usize, n: usize, m: usize, g: &[f64], w: &[f64], gx: &mut [f64]) {
    assert!(g.len() == b * m && w.len() == m * n && gx.len() == b * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: as above.
        unsafe { avx512::input_grad(b, n, m, g, w, gx) };
        return;
    }
    scalar::input_grad(b, n, m, g, w, gx);
}

pub(crate) mod scalar {
    pub(crate) fn forward(b: usize, n: usize, m: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
        for (i, wr) in w.chunks_exact(n).enumerate() {
            for t in 0..b {
                let xr = &x[t * n..(t + 1) * n];
                out[t * m + i] += xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
    }

    pub(crate) fn weight_grad(b: usize, n: usize, m: usize, g: &[f64], x: &[f64], gw: &mut [f64]) {
        for (i, row) in gw.chunks_exact_mut(n).enumerate() {
            for t in 0..b {
                let c = g[t * m + i];
                row.iter_mut()
                    .zip(&x[t * n..(t + 1) * n])
                    .for_each(|(a, v)| *a += c * v);
            }
        }
    }

    pub(crate) fn input_grad(b: usize, n: usize, m: usize, g: &[f64], w: &[f64], gx: &mut [f64]) {
        for t in 0..b {
            let row = &mut gx[t * n..(t + 1) * n];
            for (i, wr) in w.chunks_exact(n).enumerate() {
                let c = g[t * m + i];
                row.iter_mut().zip(wr).for_each(|(a, v)| *a += c * v);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    const LANES: usize = 8;

    fn tail_mask(n: usize) -> __mmask8 {
        ((1u16 << n) - 1) as u8
    }

    /// Dot products of `R` weight rows with `T` input rows.
    #[target_feature(enable = "avx512f")]
    unsafe fn dot_tile<const R: usize, const T: usize>(
        n: usize,
        w: *const f64,
        x: *const f64,
        out: *mut f64,
        m: usize,
    ) {
        let mut acc = [[_mm512_setzero_pd(); T]; R];
        let full = n / LANES * LANES;
        let mut j = 0;
        while j < n {
            let k = if j < full { 0xff } else { tail_mask(n - j) };
            let mut xv = [_mm512_setzero_pd(); T];
            for t in 0..T {
                xv[t] = _mm512_maskz_loadu_pd(k, x.add(t * n + j));
            }
            for r in 0..R {
                let wv = _mm512_maskz_loadu_pd(k, w.add(r * n + j));
                for t in 0..T {
                    acc[r][t] = _mm512_fmadd_pd(wv, xv[t], acc[r][t]);
                }
            }
            j += LANES;
        }
        for r in 0..R {
            for t in 0..T {
                *out.add(t * m + r) += _mm512_reduce_add_pd(acc[r][t]);
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn forward_rows<const R: usize>(
        b: usize,
        n: usize,
        m: usize,
        i0: usize,
        x: &[f64],
        w: &[f64],
        out: &mut [f64],
    ) {
        let wp = w.as_ptr().add(i0 * n);
        let mut t0 = 0;
        while t0 + 4 <= b {
            dot_tile::<R, 4>(
                n,
                wp,
                x.as_ptr().add(t0 * n),
                out.as_mut_ptr().add(t0 * m + i0),
                m,
            );
            t0 += 4;
        }
        while t0 < b {
            dot_tile::<R, 1>(
                n,
                wp,
                x.as_ptr().add(t0 * n),
                out.as_mut_ptr().add(t0 * m + i0),
                m,
            );
            t0 += 1;
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn forward(
        b: usize,
        n: usize,
        m: usize,
        x: &[f64],
        w: &[f64],
        out: &mut [f64],
    ) {
        let mut i0 = 0;
        while i0 + 4 <= m {
            forward_rows::<4>(b, n, m, i0, x, w, out);
            i0 += 4;
        }
        while i0 < m {
            forward_rows::<1>(b, n, m, i0, x, w, out);
            i0 += 1;
        }
    }

    /// `out[r][v]` rows of `R` accumulate `sum_k coef[k][r] * src[k][v]`
    /// over `K` source rows for one strip of `V` vectors.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn outer_tile<const R: usize, const V: usize>(
        k: usize,
        coef: *const f64,
        coef_k: usize,
        coef_r: usize,
        src: *const f64,
        src_k: usize,
        dst: *mut f64,
        dst_r: usize,
        mask: [__mmask8; V],
    ) {
        let mut acc = [[_mm512_setzero_pd(); V]; R];
        for r in 0..R {
            for v in 0..V {
                acc[r][v] = _mm512_maskz_loadu_pd(mask[v], dst.add(r * dst_r + v * LANES));
            }
        }
        for kk in 0..k {
            let mut sv = [_mm512_setzero_pd(); V];
            for v in 0..V {
                sv[v] = _mm512_maskz_loadu_pd(mask[v], src.add(kk * src_k + v * LANES));
            }
            for r in 0..R {
                let c = _mm512_set1_pd(*coef.add(kk * coef_k + r * coef_r));
                for v in 0..V {
                    acc[r][v] = _mm512_fmadd_pd(c, sv[v], acc[r][v]);
                }
            }
        }
        for r in 0..R {
            for v in 0..V {
                _mm512_mask_storeu_pd(dst.add(r * dst_r + v * LANES), mask[v], acc[r][v]);
            }
        }
    }

    /// `dst[r][j] += sum_k coef[k][r] * src[k][j]` for `rows` destination
    /// rows of length `n`.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn outer<const R: usize>(
        rows: usize,
        n: usize,
        k: usize,
        coef: *const f64,
        coef_k: usize,
        coef_r: usize,
        src: *const f64,
        src_k: usize,
        dst: *mut f64,
        rows_outer: bool,
    ) {
        const V: usize = 2;
        const KC: usize = 128;
        let mut k0 = 0;
        while k0 < k {
            let kn = KC.min(k - k0);
            let (cb, sb) = (coef.add(k0 * coef_k), src.add(k0 * src_k));
            let tile = |r0: usize, j: usize| {
                let mut mask = [0u8; V];
                for (v, mv) in mask.iter_mut().enumerate() {
                    let left = n.saturating_sub(j + v * LANES).min(LANES);
                    *mv = if left == LANES {
                        0xff
                    } else if left == 0 {
                        0
                    } else {
                        tail_mask(left)
                    };
                }
                let c = cb.add(r0 * coef_r);
                let d = dst.add(r0 * n + j);
                if r0 + R <= rows {
                    outer_tile::<R, V>(kn, c, coef_k, coef_r, sb.add(j), src_k, d, n, mask);
                    R
                } else {
                    outer_tile::<1, V>(kn, c, coef_k, coef_r, sb.add(j), src_k, d, n, mask);
                    1
                }
            };
            if rows_outer {
                let mut r0 = 0;
                while r0 < rows {
                    let mut j = 0;
                    let mut used = 1;
                    while j < n {
                        used = tile(r0, j);
                        j += V * LANES;
                    }
                    r0 += used;
                }
            } else {
                let mut j = 0;
                while j < n {
                    let mut r0 = 0;
                    while r0 < rows {
                        r0 += tile(r0, j);
                    }
                    j += V * LANES;
                }
            }
            k0 += kn;
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn weight_grad(
        b: usize,
        n: usize,
        m: usize,
        g: &[f64],
        x: &[f64],
        gw: &mut [f64],
    ) {
        // dst rows i, coefficients g[t][i], sources x[t].
        outer::<8>(
            m,
            n,
            b,
            g.as_ptr(),
            m,
            1,
            x.as_ptr(),
            n,
            gw.as_mut_ptr(),
            true,
        );
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn input_grad(
        b: usize,
        n: usize,
        m: usize,
        g: &[f64],
        w: &[f64],
        gx: &mut [f64],
    ) {
        // dst rows t, coefficients g[t][i], sources w[i].
        outer::<8>(
            b,
            n,
            m,
            g.as_ptr(),
            1,
            m,
            w.as_ptr(),
            n,
            gx.as_mut_ptr(),
            false,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_kernels_match_naive() {
        let (b, n, m) = (3, 1037, 5);
        let val = |i: usize, k: usize| ((i * k) % 17) as f64 * 0.25 - 2.0;
        let x: Vec<f64> = (0..b * n).map(|i| val(i, 7)).collect();
        let w: Vec<f64> = (0..m * n).map(|i| val(i, 11)).collect();
        let g: Vec<f64> = (0..b * m).map(|i| val(i, 3)).collect();
        let mut out = vec![1.0; b * m];
        forward(b, n, m, &x, &w, &mut out);
        let mut gw = vec![0.5; m * n];
        weight_grad(b, n, m, &g, &x, &mut gw);
        let mut gx = vec![0.0; b * n];
        input_grad(b, n, m, &g, &w, &mut gx);
        for t in 0..b {
            for i in 0..m {
                let want = 1.0 + (0..n).map(|j| x[t * n + j] * w[i * n + j]).sum::<f64>();
                assert!((out[t * m + i] - want).abs() < 1e-9);
            }
        }
        for i in 0..m {
            for j in 0..n {
                let want = 0.5 + (0..b).map(|t| g[t * m + i] * x[t * n + j]).sum::<f64>();
                assert!((gw[i * n + j] - want).abs() < 1e-12);
            }
        }
        for t in 0..b {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| g[t * m + i] * w[i * n + j]).sum();
                assert!((gx[t * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dispatch_matches_scalar() {
        let (b, n, m) = (6, 45, 11);
        let x: Vec<f64> = (0..b * n)
            .map(|i| ((i * 7) % 13) as f64 * 0.1 - 0.5)
            .collect();
        let w: Vec<f64> = (0..m * n)
            .map(|i| ((i * 5) % 11) as f64 * 0.01 - 0.05)
            .collect();
        let g: Vec<f64> = (0..b * m)
            .map(|i| ((i * 3) % 7) as f64 * 0.01 - 0.03)
            .collect();
        let close = |a: &[f64], c: &[f64]| a.iter().zip(c).all(|(p, q)| (p - q).abs() < 1e-12);
        let (mut o1, mut o2) = (vec![0.1; b * m], vec![0.1; b * m]);
        forward(b, n, m, &x, &w, &mut o1);
        scalar::forward(b, n, m, &x, &w, &mut o2);
        assert!(close(&o1, &o2));
        let (mut w1, mut w2) = (vec![0.2; m * n], vec![0.2; m * n]);
        weight_grad(b, n, m, &g, &x, &mut w1);
        scalar::weight_grad(b, n, m, &g, &x, &mut w2);
        assert!(close(&w1, &w2));
        let (mut x1, mut x2) = (vec![0.3; b * n], vec![0.3; b * n]);
        input_grad(b, n, m, &g, &w, &mut x1);
        scalar::input_grad(b, n, m, &g, &w, &mut x2);
        assert!(close(&x1, &x2));
    }
}
