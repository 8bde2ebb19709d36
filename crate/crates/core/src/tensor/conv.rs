//! Direct 3x3x3 stride-1 correlation kernels.
//!
//! All three passes of a convolution reduce to two primitives over a
//! zero-padded source volume:
//!
//! * [`correlate`]: `out[co][p] += sum_ci sum_t w[co][ci][t] * src[ci][p + t]`
//!   (forward pass, and the input gradient with a flipped, transposed kernel)
//! * [`weight_grad`]: `gw[co][ci][t] += sum_p g[co][p] * src[ci][p + t]`
//!
//! On x86-64 with AVX-512 the inner loops run on register tiles; elsewhere
//! a scalar path with the same summation semantics is used.

/// Spatial extents `[z, y, x]`.
pub(crate) type Dims = [usize; 3];

pub(crate) fn vol(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Copies `[n][c][z][y][x]` into a zero-filled buffer padded by `p` on
/// every side of every spatial axis.
pub(crate) fn pad(src: &[f64], planes: usize, d: Dims, p: usize) -> (Vec<f64>, Dims) {
    let pd = [d[0] + 2 * p, d[1] + 2 * p, d[2] + 2 * p];
    let mut out = vec![0.0; planes * vol(pd)];
    for n in 0..planes {
        for z in 0..d[0] {
            for y in 0..d[1] {
                let s = n * vol(d) + (z * d[1] + y) * d[2];
                let o = n * vol(pd) + ((z + p) * pd[1] + y + p) * pd[2] + p;
                out[o..o + d[2]].copy_from_slice(&src[s..s + d[2]]);
            }
        }
    }
    (out, pd)
}

/// `w'[ci][co][26 - t] = w[co][ci][t]`: the kernel that maps output
/// gradients back onto inputs.
pub(crate) fn flip_transpose(w: &[f64], cout: usize, cin: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..27 {
                out[(ci * cout + co) * 27 + 26 - t] = w[(co * cin + ci) * 27 + t];
            }
        }
    }
    out
}

/// Accumulates a valid correlation of `src: [batch][cin][od + 2]` with
/// `w: [cout][cin][27]` into `out: [batch][cout][od]`.
pub(crate) fn correlate(
    batch: usize,
    cin: usize,
    cout: usize,
    src: &[f64],
    od: Dims,
    w: &[f64],
    out: &mut [f64],
) {
    let sd = [od[0] + 2, od[1] + 2, od[2] + 2];
    assert_eq!(src.len(), batch * cin * vol(sd));
    assert_eq!(out.len(), batch * cout * vol(od));
    assert_eq!(w.len(), cout * cin * 27);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: feature presence checked above; buffer sizes asserted.
        unsafe { avx512::correlate(batch, cin, cout, src, sd, od, w, out) };
        return;
    }
    scalar::correlate(batch, cin, cout, src, sd, od, w, out);
}

/// Accumulates `gw[co][ci][t] += sum g[co][p] * src[ci][p + t]` over the
/// batch, with `g: [batch][cout][od]`, `src: [batch][cin][od + 2]`.
pub(crate) fn weight_grad(
    batch: usize,
    cin: usize,
    cout: usize,
    src: &[f64],
    od: Dims,
    g: &[f64],
    gw: &mut [f64],
) {
    let sd = [od[0] + 2, od[1] + 2, od[2] + 2];
    assert_eq!(src.len(), batch * cin * vol(sd));
    assert_eq!(g.len(), batch * cout * vol(od));
    assert_eq!(gw.len(), cout * cin * 27);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: feature presence checked above; buffer sizes asserted.
        unsafe { avx512::weight_grad(batch, cin, cout, src, sd, od, g, gw) };
        return;
    }
    scalar::weight_grad(batch, cin, cout, src, sd, od, g, gw);
}

pub(crate) mod scalar {
    use super::{vol, Dims};

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn correlate(
        batch: usize,
        cin: usize,
        cout: usize,
        src: &[f64],
        sd: Dims,
        od: Dims,
        w: &[f64],
        out: &mut [f64],
    ) {
        for b in 0..batch {
            for co in 0..cout {
                let o_base = (b * cout + co) * vol(od);
                for ci in 0..cin {
                    let s_base = (b * cin + ci) * vol(sd);
                    for t in 0..27 {
                        let (dz, dy, dx) = (t / 9, t / 3 % 3, t % 3);
                        let wv = w[(co * cin + ci) * 27 + t];
                        for z in 0..od[0] {
                            for y in 0..od[1] {
                                let o = o_base + (z * od[1] + y) * od[2];
                                let s = s_base + ((z + dz) * sd[1] + y + dy) * sd[2] + dx;
                                let row = &src[s..s + od[2]];
                                out[o..o + od[2]]
                                    .iter_mut()
                                    .zip(row)
                                    .for_each(|(a, v)| *a += wv * v);
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn weight_grad(
        batch: usize,
        cin: usize,
        cout: usize,
        src: &[f64],
        sd: Dims,
        od: Dims,
        g: &[f64],
        gw: &mut [f64],
    ) {
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..27 {
                    let (dz, dy, dx) = (t / 9, t / 3 % 3, t % 3);
                    let mut acc = 0.0;
                    for b in 0..batch {
                        let g_base = (b * cout + co) * vol(od);
                        let s_base = (b * cin + ci) * vol(sd);
                        for z in 0..od[0] {
                            for y in 0..od[1] {
                                let o = g_base + (z * od[1] + y) * od[2];
                                let s = s_base + ((z + dz) * sd[1] + y + dy) * sd[2] + dx;
                                acc += g[o..o + od[2]]
                                    .iter()
                                    .zip(&src[s..s + od[2]])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                    }
                    gw[(co * cin + ci) * 27 + t] += acc;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{vol, Dims};
    use std::arch::x86_64::*;

    const LANES: usize = 8;

    /// Lane masks for the `XV` vectors starting at `x0` in a row of `ox`.
    fn masks<const XV: usize>(x0: usize, ox: usize) -> [__mmask8; XV] {
        let mut m = [0u8; XV];
        for (v, mv) in m.iter_mut().enumerate() {
            let start = x0 + v * LANES;
            let n = ox.saturating_sub(start).min(LANES);
            *mv = if n == LANES {
                0xff
            } else {
                ((1u16 << n) - 1) as u8
            };
        }
        m
    }

    /// One output row segment for `CB` output channels starting at `co0`.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn row_tile<const CB: usize, const XV: usize>(
        cin: usize,
        src: *const f64,
        svol: usize,
        sd: Dims,
        wb: *const f64,
        out: *mut f64,
        ovol: usize,
        mask: &[__mmask8; XV],
    ) {
        let mut acc = [[_mm512_setzero_pd(); XV]; CB];
        for j in 0..CB {
            for v in 0..XV {
                acc[j][v] = _mm512_maskz_loadu_pd(mask[v], out.add(j * ovol + v * LANES));
            }
        }
        for ci in 0..cin {
            let s0 = src.add(ci * svol);
            let w0 = wb.add(ci * 27 * CB);
            for dz in 0..3 {
                for dy in 0..3 {
                    let r = s0.add((dz * sd[1] + dy) * sd[2]);
                    for dx in 0..3 {
                        let t = dz * 9 + dy * 3 + dx;
                        let mut sv = [_mm512_setzero_pd(); XV];
                        for v in 0..XV {
                            sv[v] = _mm512_maskz_loadu_pd(mask[v], r.add(dx + v * LANES));
                        }
                        for j in 0..CB {
                            let w = _mm512_set1_pd(*w0.add(t * CB + j));
                            for v in 0..XV {
                                acc[j][v] = _mm512_fmadd_pd(w, sv[v], acc[j][v]);
                            }
                        }
                    }
                }
            }
        }
        for j in 0..CB {
            for v in 0..XV {
                _mm512_mask_storeu_pd(out.add(j * ovol + v * LANES), mask[v], acc[j][v]);
            }
        }
    }

    /// Repacks `w[co0..co0+CB][ci][t]` as `[ci][t][CB]`.
    fn pack<const CB: usize>(w: &[f64], cin: usize, co0: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.resize(cin * 27 * CB, 0.0);
        for ci in 0..cin {
            for t in 0..27 {
                for j in 0..CB {
                    buf[(ci * 27 + t) * CB + j] = w[((co0 + j) * cin + ci) * 27 + t];
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn channel_block<const CB: usize, const XV: usize>(
        batch: usize,
        cin: usize,
        cout: usize,
        co0: usize,
        src: &[f64],
        sd: Dims,
        od: Dims,
        wb: &[f64],
        out: &mut [f64],
    ) {
        let (svol, ovol) = (vol(sd), vol(od));
        let seg = XV * LANES;
        for b in 0..batch {
            let sb = src.as_ptr().add(b * cin * svol);
            let ob = out.as_mut_ptr().add((b * cout + co0) * ovol);
            for z in 0..od[0] {
                for y in 0..od[1] {
                    let mut x0 = 0;
                    while x0 < od[2] {
                        let m = masks::<XV>(x0, od[2]);
                        row_tile::<CB, XV>(
                            cin,
                            sb.add((z * sd[1] + y) * sd[2] + x0),
                            svol,
                            sd,
                            wb.as_ptr(),
                            ob.add((z * od[1] + y) * od[2] + x0),
                            ovol,
                            &m,
                        );
                        x0 += seg;
                    }
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn correlate_xv<const XV: usize>(
        batch: usize,
        cin: usize,
        cout: usize,
        src: &[f64],
        sd: Dims,
        od: Dims,
        w: &[f64],
        out: &mut [f64],
    ) {
        let mut wb = Vec::new();
        let mut co0 = 0;
        // Wide tiles only where the accumulators still fit in registers.
        if XV <= 2 {
            while co0 + 8 <= cout {
                pack::<8>(w, cin, co0, &mut wb);
                channel_block::<8, XV>(batch, cin, cout, co0, src, sd, od, &wb, out);
                co0 += 8;
            }
        }
        while co0 + 4 <= cout {
            pack::<4>(w, cin, co0, &mut wb);
            channel_block::<4, XV>(batch, cin, cout, co0, src, sd, od, &wb, out);
            co0 += 4;
        }
        while co0 < cout {
            pack::<1>(w, cin, co0, &mut wb);
            channel_block::<1, XV>(batch, cin, cout, co0, src, sd, od, &wb, out);
            co0 += 1;
        }
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn correlate(
        batch: usize,
        cin: usize,
        cout: usize,
        src: &[f64],
        sd: Dims,
        od: Dims,
        w: &[f64],
        out: &mut [f64],
    ) {
        match od[2].div_ceil(LANES) {
            1 => correlate_xv::<1>(batch, cin, cout, src, sd, od, w, out),
            2 => correlate_xv::<2>(batch, cin, cout, src, sd, od, w, out),
            3 => correlate_xv::<3>(batch, cin, cout, src, sd, od, w, out),
            _ => correlate_xv::<4>(batch, cin, cout, src, sd, od, w, out),
        }
    }

    /// Reductions for `CB` output channels, one input channel and one
    /// `(dz, dy)` kernel row: `CB * 3` vector accumulators.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn wgrad_tile<const CB: usize>(
        batch: usize,
        cin: usize,
        cout: usize,
        co0: usize,
        ci: usize,
        dz: usize,
        dy: usize,
        src: &[f64],
        sd: Dims,
        od: Dims,
        g: &[f64],
        gw: &mut [f64],
    ) {
        let (svol, ovol) = (vol(sd), vol(od));
        let mut acc = [[_mm512_setzero_pd(); 3]; CB];
        for b in 0..batch {
            let sb = src.as_ptr().add((b * cin + ci) * svol);
            let gb = g.as_ptr().add((b * cout + co0) * ovol);
            for z in 0..od[0] {
                for y in 0..od[1] {
                    let srow = sb.add(((z + dz) * sd[1] + y + dy) * sd[2]);
                    let grow = gb.add((z * od[1] + y) * od[2]);
                    let mut x0 = 0;
                    while x0 < od[2] {
                        let n = (od[2] - x0).min(LANES);
                        let m: __mmask8 = if n == LANES {
                            0xff
                        } else {
                            ((1u16 << n) - 1) as u8
                        };
                        let s = [
                            _mm512_maskz_loadu_pd(m, srow.add(x0)),
                            _mm512_maskz_loadu_pd(m, srow.add(x0 + 1)),
                            _mm512_maskz_loadu_pd(m, srow.add(x0 + 2)),
                        ];
                        for j in 0..CB {
                            let gv = _mm512_maskz_loadu_pd(m, grow.add(j * ovol + x0));
                            for dx in 0..3 {
                                acc[j][dx] = _mm512_fmadd_pd(gv, s[dx], acc[j][dx]);
                            }
                        }
                        x0 += LANES;
                    }
                }
            }
        }
        for j in 0..CB {
            for dx in 0..3 {
                gw[((co0 + j) * cin + ci) * 27 + dz * 9 + dy * 3 + dx] +=
                    _mm512_reduce_add_pd(acc[j][dx]);
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn weight_grad(
        batch: usize,
        cin: usize,
        cout: usize,
        src: &[f64],
        sd: Dims,
        od: Dims,
        g: &[f64],
        gw: &mut [f64],
    ) {
        let mut co0 = 0;
        while co0 < cout {
            let wide = cout - co0 >= 4;
            for ci in 0..cin {
                for dz in 0..3 {
                    for dy in 0..3 {
                        if wide {
                            wgrad_tile::<4>(batch, cin, cout, co0, ci, dz, dy, src, sd, od, g, gw);
                        } else {
                            wgrad_tile::<1>(batch, cin, cout, co0, ci, dz, dy, src, sd, od, g, gw);
                        }
                    }
                }
            }
            co0 += if wide { 4 } else { 1 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn dispatch_matches_scalar_on_odd_shapes() {
        for &(batch, cin, cout, od) in &[
            (2, 3, 5, [2, 3, 5]),
            (1, 2, 9, [3, 4, 13]),
            (2, 4, 4, [2, 2, 32]),
            (1, 1, 1, [1, 1, 1]),
            (1, 5, 12, [2, 3, 17]),
        ] {
            let sd = [od[0] + 2, od[1] + 2, od[2] + 2];
            let src = pseudo(batch * cin * vol(sd), 1);
            let w = pseudo(cout * cin * 27, 2);
            let init = pseudo(batch * cout * vol(od), 3);
            let mut fast = init.clone();
            let mut slow = init.clone();
            correlate(batch, cin, cout, &src, od, &w, &mut fast);
            scalar::correlate(batch, cin, cout, &src, sd, od, &w, &mut slow);
            close(&fast, &slow);

            let g = pseudo(batch * cout * vol(od), 4);
            let mut gf = pseudo(cout * cin * 27, 5);
            let mut gs = gf.clone();
            weight_grad(batch, cin, cout, &src, od, &g, &mut gf);
            scalar::weight_grad(batch, cin, cout, &src, sd, od, &g, &mut gs);
            close(&gf, &gs);
        }
    }

    #[test]
    fn pad_places_interior() {
        let (p, pd) = pad(&[1.0, 2.0], 1, [1, 1, 2], 1);
        assert_eq!(pd, [3, 3, 4]);
        assert_eq!(p.iter().sum::<f64>(), 3.0);
        assert_eq!(p[(3 + 1) * 4 + 1], 1.0);
    }
}
