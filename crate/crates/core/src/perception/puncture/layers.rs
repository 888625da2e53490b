//! Forward and backward kernels for the small convolutional network.
//!
//! Feature maps are channel-major: `x[(c * side + y) * side + x]`.
//! Backward functions accumulate into the gradient slices they are given.

pub fn conv3x3(x: &[f64], c_in: usize, side: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let hw = side * side;
    let mut out = vec![0.0; c_out * hw];
    for co in 0..c_out {
        let plane = &mut out[co * hw..(co + 1) * hw];
        plane.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let src = &x[ci * hw..(ci + 1) * hw];
            let k = &w[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let (y0, y1) = (dy.max(0) as usize, (side as isize + dy.min(0)) as usize);
                    let (x0, x1) = ((-dx).max(0) as usize, (side as isize - dx.max(0)) as usize);
                    for yy in (y0 as isize - dy) as usize..(y1 as isize - dy) as usize {
                        let sy = (yy as isize + dy) as usize;
                        let orow = &mut plane[yy * side..(yy + 1) * side];
                        let irow = &src[sy * side..(sy + 1) * side];
                        for xx in x0..x1 {
                            orow[xx] += wv * irow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `dx`; adds into `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    x: &[f64],
    c_in: usize,
    side: usize,
    w: &[f64],
    c_out: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let hw = side * side;
    let mut dx = vec![0.0; c_in * hw];
    for co in 0..c_out {
        let g = &dy[co * hw..(co + 1) * hw];
        db[co] += g.iter().sum::<f64>();
        for ci in 0..c_in {
            let src = &x[ci * hw..(ci + 1) * hw];
            let base = (co * c_in + ci) * 9;
            let dsrc = &mut dx[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (oy, ox) = (ky as isize - 1, kx as isize - 1);
                    let wv = w[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    let ys = (-oy).max(0) as usize..(side as isize - oy.max(0)) as usize;
                    let xs = (-ox).max(0) as usize..(side as isize - ox.max(0)) as usize;
                    for yy in ys {
                        let sy = (yy as isize + oy) as usize;
                        for xx in xs.clone() {
                            let sx = (xx as isize + ox) as usize;
                            let gv = g[yy * side + xx];
                            acc += gv * src[sy * side + sx];
                            dsrc[sy * side + sx] += gv * wv;
                        }
                    }
                    dw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
    dx
}

pub fn avgpool2(x: &[f64], c: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; c * half * half];
    for ch in 0..c {
        for y in 0..half {
            for xx in 0..half {
                let i = |dy: usize, dx: usize| x[(ch * side + 2 * y + dy) * side + 2 * xx + dx];
                out[(ch * half + y) * half + xx] = 0.25 * (i(0, 0) + i(0, 1) + i(1, 0) + i(1, 1));
            }
        }
    }
    out
}

pub fn avgpool2_backward(dy: &[f64], c: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut dx = vec![0.0; c * side * side];
    for ch in 0..c {
        for y in 0..side {
            for xx in 0..side {
                dx[(ch * side + y) * side + xx] = 0.25 * dy[(ch * half + y / 2) * half + xx / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling of `side x side` maps.
pub fn upsample2(x: &[f64], c: usize, side: usize) -> Vec<f64> {
    let big = side * 2;
    let mut out = vec![0.0; c * big * big];
    for ch in 0..c {
        for y in 0..big {
            for xx in 0..big {
                out[(ch * big + y) * big + xx] = x[(ch * side + y / 2) * side + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[f64], c: usize, side: usize) -> Vec<f64> {
    let big = side * 2;
    let mut dx = vec![0.0; c * side * side];
    for ch in 0..c {
        for y in 0..big {
            for xx in 0..big {
                dx[(ch * side + y / 2) * side + xx / 2] += dy[(ch * big + y) * big + xx];
            }
        }
    }
    dx
}

/// `w` is row-major `[n_out, n_in]`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

pub fn dense_backward(x: &[f64], w: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn tanh_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.tanh());
}

/// Gradient through `y = tanh(.)` given the activations `y`.
pub fn tanh_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(a, g)| g * (1.0 - a * a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a zero-padded 3x3 cross-correlation.
    fn conv_oracle(x: &[f64], c_in: usize, side: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; c_out * side * side];
        for co in 0..c_out {
            for y in 0..side as isize {
                for xx in 0..side as isize {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, xx + kx);
                                if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                                    continue;
                                }
                                let wi = (co * c_in + ci) * 9 + ((ky + 1) * 3 + kx + 1) as usize;
                                acc += w[wi] * x[(ci * side + sy as usize) * side + sx as usize];
                            }
                        }
                    }
                    out[(co * side + y as usize) * side + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect()
    }

    #[test]
    fn conv_matches_direct_definition() {
        let (c_in, c_out, side) = (2, 3, 5);
        let x = ramp(c_in * side * side, 0.05);
        let w = ramp(c_out * c_in * 9, 0.03);
        let b = vec![0.1, -0.2, 0.05];
        let got = conv3x3(&x, c_in, side, &w, &b, c_out);
        let want = conv_oracle(&x, c_in, side, &w, &b, c_out);
        for (g, o) in got.iter().zip(&want) {
            assert!((g - o).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> is linear in x and w, so its gradients are exact adjoints
        let (c_in, c_out, side) = (2, 2, 4);
        let x = ramp(c_in * side * side, 0.05);
        let w = ramp(c_out * c_in * 9, 0.03);
        let b = vec![0.0; c_out];
        let dy = ramp(c_out * side * side, 0.02);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; c_out];
        let dx = conv3x3_backward(&x, c_in, side, &w, c_out, &dy, &mut dw, &mut db);
        let inner = |x: &[f64], w: &[f64]| -> f64 {
            conv3x3(x, c_in, side, w, &b, c_out).iter().zip(&dy).map(|(a, g)| a * g).sum()
        };
        let h = 1e-6;
        for i in [0, 5, 17, 31] {
            let mut xp = x.clone();
            xp[i] += h;
            assert!(((inner(&xp, &w) - inner(&x, &w)) / h - dx[i]).abs() < 1e-6);
        }
        for i in [0, 9, 20, 35] {
            let mut wp = w.clone();
            wp[i] += h;
            assert!(((inner(&x, &wp) - inner(&x, &w)) / h - dw[i]).abs() < 1e-6);
        }
        assert!((db[1] - dy[16..].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn pooling_and_upsampling() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(avgpool2(&x, 1, 4), vec![2.5, 4.5, 10.5, 12.5]);
        let up = upsample2(&[1.0, 2.0, 3.0, 4.0], 1, 2);
        assert_eq!(&up[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(upsample2_backward(&up, 1, 2), vec![4.0, 8.0, 12.0, 16.0]);
        assert_eq!(avgpool2_backward(&[4.0], 1, 2), vec![1.0; 4]);
    }

    #[test]
    fn dense_and_sigmoid() {
        let y = dense(&[1.0, 2.0], &[1.0, 0.5, -1.0, 2.0], &[0.5, 0.0]);
        assert_eq!(y, vec![2.5, 3.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-800.0)).is_finite() && sigmoid(800.0) == 1.0);
    }
}
