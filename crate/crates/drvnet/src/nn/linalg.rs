//! Patch extraction for GEMM-based convolution.
//!
//! Layout convention: a feature map is (H, W, C) in standard row-major
//! layout, so each pixel's channel run is contiguous. A patch row is laid
//! out (dh, dw, c) with c fastest, which matches reshaping a
//! (kh, kw, c_in, c_out) weight tensor to (kh*kw*c_in, c_out).

use ndarray::{Array2, ArrayView3};

/// Force a matrix into row-major layout.
///
/// `dot` with a unit inner dimension returns a column-major result, which
/// breaks flat views and reshapes downstream. A no-op move when the input
/// is already row-major.
pub fn row_major(m: Array2<f64>) -> Array2<f64> {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

/// Extract im2col rows for flattened pixels `r0..r1` of a same-padded
/// k×k convolution over `x`. Out-of-image taps read as zero.
pub fn im2col(x: ArrayView3<'_, f64>, k: usize, r0: usize, r1: usize) -> Array2<f64> {
    let (h, w, c) = x.dim();
    let pad = k / 2;
    debug_assert!(r1 <= h * w && r0 <= r1);
    let xs = x.as_standard_layout();
    let flat = xs.as_slice().expect("standard layout");

    let mut cols = Array2::<f64>::zeros((r1 - r0, k * k * c));
    let out = cols.as_slice_mut().expect("freshly allocated");
    let row_len = k * k * c;

    for p in r0..r1 {
        let (i, j) = (p / w, p % w);
        let dst_base = (p - r0) * row_len;
        for dh in 0..k {
            let si = i + dh;
            if si < pad || si - pad >= h {
                continue;
            }
            let si = si - pad;
            for dw in 0..k {
                let sj = j + dw;
                if sj < pad || sj - pad >= w {
                    continue;
                }
                let sj = sj - pad;
                let src = (si * w + sj) * c;
                let dst = dst_base + (dh * k + dw) * c;
                out[dst..dst + c].copy_from_slice(&flat[src..src + c]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: fold patch-row gradients back onto the image.
///
/// Implemented as a gather over output pixels, so it is free of
/// overlapping writes.
pub fn col2im(dcols: &Array2<f64>, h: usize, w: usize, c: usize, k: usize) -> ndarray::Array3<f64> {
    let pad = k / 2;
    debug_assert_eq!(dcols.dim(), (h * w, k * k * c));
    // Matrix products with a unit inner dimension come back column-major
    // from ndarray; normalize before taking the flat view.
    let dcols = dcols.as_standard_layout();
    let src = dcols.as_slice().expect("standard layout");
    let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
    let out = dx.as_slice_mut().expect("freshly allocated");

    for a in 0..h {
        for b in 0..w {
            let dst = (a * w + b) * c;
            for dh in 0..k {
                // The patch anchored at pixel (i, j) touches (a, b) when
                // i = a - dh + pad is in range, likewise for columns.
                let ii = a + pad;
                if ii < dh || ii - dh >= h {
                    continue;
                }
                let i = ii - dh;
                for dw in 0..k {
                    let jj = b + pad;
                    if jj < dw || jj - dw >= w {
                        continue;
                    }
                    let j = jj - dw;
                    let s = (i * w + j) * (k * k * c) + (dh * k + dw) * c;
                    for ch in 0..c {
                        out[dst + ch] += src[s + ch];
                    }
                }
            }
        }
    }
    dx
}
