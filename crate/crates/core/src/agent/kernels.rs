//! Element-wise inner loops with a wider-vector path on x86-64.
//!
//! Every output element is computed by the same sequence of IEEE operations
//! on both paths (no fused multiply-add, no reassociation), so results are
//! bit-identical whichever path runs.

/// `y[i] += a * x[i]`.
#[inline(always)]
fn axpy_plain(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `y[i] += x[i]`.
#[inline]
pub(crate) fn add_assign(y: &mut [f64], x: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support checked above.
            unsafe { add_avx(y, x) };
            return;
        }
    }
    add_plain(y, x);
}

#[inline(always)]
fn add_plain(y: &mut [f64], x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn add_avx(y: &mut [f64], x: &[f64]) {
    add_plain(y, x);
}

const TILE: usize = 16;

/// `y[s, :] += x[s, :] . w` for row-major `x: [n, inp]`, `w: [inp, out]`.
/// Zero inputs are skipped; each output accumulates in input order.
pub(crate) fn dense_rows(y: &mut [f64], x: &[f64], w: &[f64], n: usize, inp: usize, out: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support checked above.
            unsafe { dense_rows_avx(y, x, w, n, inp, out) };
            return;
        }
    }
    dense_rows_plain(y, x, w, n, inp, out);
}

#[inline(always)]
fn tile_accumulate(acc: &mut [f64; TILE], terms: &[(f64, usize)], src: &[f64], offset: usize) {
    let mut sum = *acc;
    for &(a, base) in terms {
        let row: &[f64; TILE] = src[base + offset..base + offset + TILE]
            .try_into()
            .expect("tile in range");
        for k in 0..TILE {
            sum[k] += a * row[k];
        }
    }
    *acc = sum;
}

#[inline(always)]
fn dense_rows_plain(y: &mut [f64], x: &[f64], w: &[f64], n: usize, inp: usize, out: usize) {
    let mut terms: Vec<(f64, usize)> = Vec::with_capacity(inp);
    for s in 0..n {
        terms.clear();
        terms.extend(
            x[s * inp..(s + 1) * inp]
                .iter()
                .enumerate()
                .filter(|(_, &xi)| xi != 0.0)
                .map(|(i, &xi)| (xi, i * out)),
        );
        let ys = &mut y[s * out..(s + 1) * out];
        let mut o0 = 0;
        while o0 + TILE <= out {
            let acc: &mut [f64; TILE] = (&mut ys[o0..o0 + TILE]).try_into().expect("tile in range");
            tile_accumulate(acc, &terms, w, o0);
            o0 += TILE;
        }
        if o0 < out {
            for &(xi, base) in &terms {
                axpy_plain(&mut ys[o0..], xi, &w[base + o0..base + out]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dense_rows_avx(y: &mut [f64], x: &[f64], w: &[f64], n: usize, inp: usize, out: usize) {
    dense_rows_plain(y, x, w, n, inp, out);
}

/// `dw[i, :] += sum_s x[s, i] * dy[s, :]`, accumulated in sample order.
/// Samples whose `dy` row is all zero are skipped.
pub(crate) fn dense_weight_grad(dw: &mut [f64], x: &[f64], dy: &[f64], n: usize, inp: usize, out: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support checked above.
            unsafe { dense_weight_grad_avx(dw, x, dy, n, inp, out) };
            return;
        }
    }
    dense_weight_grad_plain(dw, x, dy, n, inp, out);
}

#[inline(always)]
fn dense_weight_grad_plain(dw: &mut [f64], x: &[f64], dy: &[f64], n: usize, inp: usize, out: usize) {
    // terms[i] lists (x[s, i], s * out) over live samples, in sample order.
    let mut terms: Vec<Vec<(f64, usize)>> = vec![Vec::new(); inp];
    for s in 0..n {
        if dy[s * out..(s + 1) * out].iter().all(|&v| v == 0.0) {
            continue;
        }
        for (i, &xi) in x[s * inp..(s + 1) * inp].iter().enumerate() {
            if xi != 0.0 {
                terms[i].push((xi, s * out));
            }
        }
    }
    for (i, t) in terms.iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        let row = &mut dw[i * out..(i + 1) * out];
        let mut o0 = 0;
        while o0 + TILE <= out {
            let acc: &mut [f64; TILE] = (&mut row[o0..o0 + TILE]).try_into().expect("tile in range");
            tile_accumulate(acc, t, dy, o0);
            o0 += TILE;
        }
        if o0 < out {
            for &(xi, base) in t {
                axpy_plain(&mut row[o0..], xi, &dy[base + o0..base + out]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dense_weight_grad_avx(dw: &mut [f64], x: &[f64], dy: &[f64], n: usize, inp: usize, out: usize) {
    dense_weight_grad_plain(dw, x, dy, n, inp, out);
}

/// Dot product accumulated in four interleaved lanes, combined as
/// `(l0 + l1) + (l2 + l3)`.
#[inline(always)]
fn dot_plain(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut lanes = [0.0f64; 4];
    let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[f64; 4], &[f64; 4]) = (
            x.try_into().expect("chunk of four"),
            y.try_into().expect("chunk of four"),
        );
        for k in 0..4 {
            lanes[k] += x[k] * y[k];
        }
    }
    for (k, (x, y)) in ra.iter().zip(rb).enumerate() {
        lanes[k] += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

/// `dx[s, i] = dot(w[i, :], dy[s, :])` for every sample whose `dy` row is
/// not all zero; other rows of `dx` are left untouched.
pub(crate) fn dense_input_grad(dx: &mut [f64], dy: &[f64], w: &[f64], n: usize, inp: usize, out: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support checked above.
            unsafe { dense_input_grad_avx(dx, dy, w, n, inp, out) };
            return;
        }
    }
    dense_input_grad_plain(dx, dy, w, n, inp, out);
}

#[inline(always)]
fn dense_input_grad_plain(dx: &mut [f64], dy: &[f64], w: &[f64], n: usize, inp: usize, out: usize) {
    for s in 0..n {
        let g = &dy[s * out..(s + 1) * out];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (i, d) in dx[s * inp..(s + 1) * inp].iter_mut().enumerate() {
            *d = dot_plain(&w[i * out..(i + 1) * out], g);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dense_input_grad_avx(dx: &mut [f64], dy: &[f64], w: &[f64], n: usize, inp: usize, out: usize) {
    for s in 0..n {
        let g = &dy[s * out..(s + 1) * out];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (i, d) in dx[s * inp..(s + 1) * inp].iter_mut().enumerate() {
            *d = dot_avx(&w[i * out..(i + 1) * out], g);
        }
    }
}

/// Same lanes and combination order as [`dot_plain`].
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn dot_avx(a: &[f64], b: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let full = n / 4 * 4;
    let mut acc = _mm256_setzero_pd();
    let mut j = 0;
    while j < full {
        // SAFETY: j + 4 <= n for both slices.
        let (x, y) = unsafe { (_mm256_loadu_pd(a.as_ptr().add(j)), _mm256_loadu_pd(b.as_ptr().add(j))) };
        acc = _mm256_add_pd(acc, _mm256_mul_pd(x, y));
        j += 4;
    }
    let mut lanes = [0.0f64; 4];
    // SAFETY: lanes holds four f64.
    unsafe { _mm256_storeu_pd(lanes.as_mut_ptr(), acc) };
    for (k, (x, y)) in a[full..n].iter().zip(&b[full..n]).enumerate() {
        lanes[k] += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

/// True when no value is NaN or infinite.
pub(crate) fn all_finite(values: &[f64]) -> bool {
    // v * 0 is NaN exactly for non-finite v.
    let mut lanes = [0.0f64; 4];
    let chunks = values.chunks_exact(4);
    for (k, &v) in chunks.remainder().iter().enumerate() {
        lanes[k] += v * 0.0;
    }
    for c in chunks {
        let c: &[f64; 4] = c.try_into().expect("chunk of four");
        for k in 0..4 {
            lanes[k] += c[k] * 0.0;
        }
    }
    lanes.iter().all(|l| *l == 0.0)
}

/// RMSProp update of one tensor: `v = rho v + (1 - rho) g^2`,
/// `w -= lr g / (sqrt(v) + eps)`.
#[inline]
pub(crate) fn rmsprop(w: &mut [f64], g: &[f64], v: &mut [f64], rho: f64, lr: f64, eps: f64) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support checked above.
            unsafe { rmsprop_avx(w, g, v, rho, lr, eps) };
            return;
        }
    }
    rmsprop_plain(w, g, v, rho, lr, eps);
}

#[inline(always)]
fn rmsprop_plain(w: &mut [f64], g: &[f64], v: &mut [f64], rho: f64, lr: f64, eps: f64) {
    let n = w.len().min(g.len()).min(v.len());
    let (w, g, v) = (&mut w[..n], &g[..n], &mut v[..n]);
    for i in 0..n {
        let gi = g[i];
        let vi = rho * v[i] + (1.0 - rho) * gi * gi;
        v[i] = vi;
        w[i] -= lr * gi / (vi.sqrt() + eps);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn rmsprop_avx(w: &mut [f64], g: &[f64], v: &mut [f64], rho: f64, lr: f64, eps: f64) {
    rmsprop_plain(w, g, v, rho, lr, eps);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_agree_bitwise() {
        let x: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a: Vec<f64> = (0..37).map(|i| (i as f64 * 1.1).cos()).collect();
        let mut b = a.clone();
        add_assign(&mut a, &x);
        add_plain(&mut b, &x);
        assert_eq!(a, b);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx") {
            for len in [0, 3, 4, 9, 37] {
                // SAFETY: AVX support checked above.
                let fast = unsafe { dot_avx(&a[..len], &x[..len]) };
                assert_eq!(fast.to_bits(), dot_plain(&a[..len], &x[..len]).to_bits());
            }
        }
        let exact: f64 = a.iter().zip(&x).map(|(p, q)| p * q).sum();
        assert!((dot_plain(&a, &x) - exact).abs() < 1e-12);
        let (mut w1, mut v1) = (a.clone(), vec![0.01; 37]);
        let (mut w2, mut v2) = (a.clone(), vec![0.01; 37]);
        rmsprop(&mut w1, &x, &mut v1, 0.95, 1e-3, 1e-6);
        rmsprop_plain(&mut w2, &x, &mut v2, 0.95, 1e-3, 1e-6);
        assert_eq!((w1, v1), (w2, v2));
        assert!(all_finite(&x));
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            for at in [0, 5, 36] {
                let mut y = x.clone();
                y[at] = bad;
                assert!(!all_finite(&y));
            }
        }
    }

    /// Reference: per-sample, per-input axpy in the same order.
    fn dense_reference(x: &[f64], w: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
        let mut y = vec![0.5; n * out];
        for s in 0..n {
            for i in 0..inp {
                if x[s * inp + i] != 0.0 {
                    axpy_plain(
                        &mut y[s * out..(s + 1) * out],
                        x[s * inp + i],
                        &w[i * out..(i + 1) * out],
                    );
                }
            }
        }
        y
    }

    #[test]
    fn tiled_dense_matches_reference_bitwise() {
        for &(n, inp, out) in &[(3usize, 7usize, 37usize), (2, 5, 16), (4, 3, 5)] {
            let x: Vec<f64> = (0..n * inp)
                .map(|k| if k % 3 == 0 { 0.0 } else { (k as f64).sin() })
                .collect();
            let w: Vec<f64> = (0..inp * out).map(|k| (k as f64 * 0.7).cos()).collect();
            let mut y = vec![0.5; n * out];
            dense_rows(&mut y, &x, &w, n, inp, out);
            assert_eq!(y, dense_reference(&x, &w, n, inp, out));

            let dy: Vec<f64> = (0..n * out)
                .map(|k| if k / out == 1 { 0.0 } else { (k as f64 * 0.3).sin() })
                .collect();
            let mut dw = vec![0.25; inp * out];
            dense_weight_grad(&mut dw, &x, &dy, n, inp, out);
            let mut want = vec![0.25; inp * out];
            for s in 0..n {
                for i in 0..inp {
                    let xi = x[s * inp + i];
                    if xi != 0.0 && s != 1 {
                        axpy_plain(&mut want[i * out..(i + 1) * out], xi, &dy[s * out..(s + 1) * out]);
                    }
                }
            }
            assert_eq!(dw, want);

            let mut dx = vec![-1.0; n * inp];
            dense_input_grad(&mut dx, &dy, &w, n, inp, out);
            for s in 0..n {
                for i in 0..inp {
                    let want = if s == 1 {
                        -1.0
                    } else {
                        dot_plain(&w[i * out..(i + 1) * out], &dy[s * out..(s + 1) * out])
                    };
                    assert_eq!(dx[s * inp + i].to_bits(), want.to_bits());
                }
            }
        }
    }
}
