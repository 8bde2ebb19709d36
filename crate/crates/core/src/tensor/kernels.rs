//! Raw slice kernels. Shapes are validated by the caller (`Graph`).

/// 2x2 max over the (y, x) plane. Returns flat argmax input indices.
pub(crate) fn max_pool_xy_forward(dims: [usize; 5], input: &[f64], out: &mut [f64]) -> Vec<usize> {
    let [b, c, z, y, x] = dims;
    let (oy, ox) = (y / 2, x / 2);
    let mut arg = Vec::with_capacity(b * c * z * oy * ox);
    let mut o = 0;
    for plane in 0..b * c * z {
        let base = plane * y * x;
        for py in 0..oy {
            for px in 0..ox {
                let mut best = base + (2 * py) * x + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * py + dy) * x + 2 * px + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out[o] = input[best];
                arg.push(best);
                o += 1;
            }
        }
    }
    arg
}

/// Source taps for one output coordinate of the factor-2, half-pixel
/// bilinear map along an axis of length `n`.
pub(crate) fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub(crate) fn upsample_xy_forward(dims: [usize; 5], input: &[f64], out: &mut [f64]) {
    let [b, c, z, y, x] = dims;
    let (ty, tx) = (upsample_taps(y), upsample_taps(x));
    let (oy, ox) = (2 * y, 2 * x);
    for plane in 0..b * c * z {
        let src = &input[plane * y * x..(plane + 1) * y * x];
        let dst = &mut out[plane * oy * ox..(plane + 1) * oy * ox];
        for (yo, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[yo * ox + xo] = wy0 * (wx0 * src[y0 * x + x0] + wx1 * src[y0 * x + x1])
                    + wy1 * (wx0 * src[y1 * x + x0] + wx1 * src[y1 * x + x1]);
            }
        }
    }
}

pub(crate) fn upsample_xy_backward(dims: [usize; 5], grad_out: &[f64], grad_in: &mut [f64]) {
    let [b, c, z, y, x] = dims;
    let (ty, tx) = (upsample_taps(y), upsample_taps(x));
    let (oy, ox) = (2 * y, 2 * x);
    for plane in 0..b * c * z {
        let go = &grad_out[plane * oy * ox..(plane + 1) * oy * ox];
        let gi = &mut grad_in[plane * y * x..(plane + 1) * y * x];
        for (yo, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = go[yo * ox + xo];
                gi[y0 * x + x0] += wy0 * wx0 * g;
                gi[y0 * x + x1] += wy0 * wx1 * g;
                gi[y1 * x + x0] += wy1 * wx0 * g;
                gi[y1 * x + x1] += wy1 * wx1 * g;
            }
        }
    }
}

/// Per-channel view helper: calls `f(channel, slice)` for every
/// contiguous `[z*y*x]` block of channel `c` across the batch.
pub(crate) fn for_channel_blocks(
    batch: usize,
    channels: usize,
    vol: usize,
    data: &[f64],
    mut f: impl FnMut(usize, &[f64]),
) {
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * vol;
            f(c, &data[off..off + vol]);
        }
    }
}
