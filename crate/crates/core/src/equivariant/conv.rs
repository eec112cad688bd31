//! im2col / col2im for same-size, zero-padded correlation.

/// Unfolds `input` (`channels × side × side`) into a
/// `(channels · k²) × (side²)` matrix. Row `(ch, dr, dc)` holds
/// `input[ch][r + dr - p][c + dc - p]`, zero outside the frame.
#[cfg(test)]
pub(crate) fn im2col(input: &[f64], channels: usize, side: usize, k: usize) -> Vec<f64> {
    let mut cols = Vec::new();
    im2col_into(input, channels, side, k, &mut cols);
    cols
}

/// [`im2col`] into a reusable buffer.
pub(crate) fn im2col_into(
    input: &[f64],
    channels: usize,
    side: usize,
    k: usize,
    cols: &mut Vec<f64>,
) {
    let p = k / 2;
    let hw = side * side;
    cols.clear();
    cols.resize(channels * k * k * hw, 0.0);
    for ch in 0..channels {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for dr in 0..k {
            for dc in 0..k {
                let row = &mut cols[((ch * k + dr) * k + dc) * hw..][..hw];
                for r in 0..side {
                    let sr = r as isize + dr as isize - p as isize;
                    if sr < 0 || sr >= side as isize {
                        continue;
                    }
                    let src = &plane[sr as usize * side..][..side];
                    let dst = &mut row[r * side..][..side];
                    let shift = dc as isize - p as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (side as isize - shift).min(side as isize) as usize;
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the image.
pub(crate) fn col2im(cols: &[f64], channels: usize, side: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let hw = side * side;
    let mut out = vec![0.0; channels * hw];
    for ch in 0..channels {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for dr in 0..k {
            for dc in 0..k {
                let row = &cols[((ch * k + dr) * k + dc) * hw..][..hw];
                for r in 0..side {
                    let sr = r as isize + dr as isize - p as isize;
                    if sr < 0 || sr >= side as isize {
                        continue;
                    }
                    let shift = dc as isize - p as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (side as isize - shift).min(side as isize) as usize;
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        let dst = &mut plane[sr as usize * side + s0..][..hi - lo];
                        for (d, s) in dst.iter_mut().zip(&row[r * side + lo..r * side + hi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}
