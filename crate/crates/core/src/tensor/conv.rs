use super::Tensor;
use crate::error::{shape_err, Result};

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("convolution stride must be positive");
    }
    if extent + 2 * padding < kernel {
        return shape_err(format!(
            "kernel {kernel} exceeds padded extent {} (extent {extent}, padding {padding})",
            extent + 2 * padding
        ));
    }
    Ok((extent + 2 * padding - kernel) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + offset - padding`
/// falls inside `[0, extent)`.
fn valid_range(out_ext: usize, extent: usize, offset: usize, stride: usize, padding: usize) -> (usize, usize) {
    let (s, off, p, ext) = (stride as i64, offset as i64, padding as i64, extent as i64);
    let lo = if p > off { (p - off + s - 1) / s } else { 0 };
    let num = ext - 1 + p - off;
    let hi = if num < 0 { 0 } else { (num / s + 1).min(out_ext as i64) };
    let lo = lo.min(out_ext as i64);
    (lo as usize, (hi.max(lo)) as usize)
}

struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    inp: [usize; 3],
    out: [usize; 3],
    stride: usize,
    padding: usize,
}

fn geometry(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Geometry> {
    let [n, cin, d, h, w] = input.dims5("conv3d input")?;
    let [cout, wcin, kd, kh, kw] = weights.dims5("conv3d weights")?;
    if wcin != cin {
        return shape_err(format!(
            "conv3d: input has {cin} channels but weights expect {wcin}"
        ));
    }
    if kd != kh || kh != kw {
        return shape_err(format!("conv3d: kernel must be cubic, got {kd}×{kh}×{kw}"));
    }
    let out = [
        conv_output_extent(d, kd, stride, padding)?,
        conv_output_extent(h, kh, stride, padding)?,
        conv_output_extent(w, kw, stride, padding)?,
    ];
    Ok(Geometry {
        n,
        cin,
        cout,
        k: kd,
        inp: [d, h, w],
        out,
        stride,
        padding,
    })
}

/// Fills `col` (`cin·k³ × oh·ow`) with the input patches feeding output slice `oz`.
fn im2col_slice(g: &Geometry, xin: &[f32], oz: usize, col: &mut [f32]) {
    let [d, h, w] = g.inp;
    let [_, oh, ow] = g.out;
    let (s, p, k) = (g.stride, g.padding, g.k);
    let plane = oh * ow;
    let in_vol = d * h * w;
    col.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..g.cin {
        let x = &xin[ci * in_vol..(ci + 1) * in_vol];
        for kz in 0..k {
            let iz = (oz * s + kz) as i64 - p as i64;
            if iz < 0 || iz >= d as i64 {
                continue;
            }
            let iz = iz as usize;
            for ky in 0..k {
                let (y0, y1) = valid_range(oh, h, ky, s, p);
                for kx in 0..k {
                    let (x0, x1) = valid_range(ow, w, kx, s, p);
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &mut col[r * plane..(r + 1) * plane];
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let src = &x[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = x0 + kx - p;
                            dst[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                dst[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds `col` back onto the input gradient (adjoint of [`im2col_slice`]).
fn col2im_slice(g: &Geometry, col: &[f32], oz: usize, gin: &mut [f32]) {
    let [d, h, w] = g.inp;
    let [_, oh, ow] = g.out;
    let (s, p, k) = (g.stride, g.padding, g.k);
    let plane = oh * ow;
    let in_vol = d * h * w;
    for ci in 0..g.cin {
        let x = &mut gin[ci * in_vol..(ci + 1) * in_vol];
        for kz in 0..k {
            let iz = (oz * s + kz) as i64 - p as i64;
            if iz < 0 || iz >= d as i64 {
                continue;
            }
            let iz = iz as usize;
            for ky in 0..k {
                let (y0, y1) = valid_range(oh, h, ky, s, p);
                for kx in 0..k {
                    let (x0, x1) = valid_range(ow, w, kx, s, p);
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &col[r * plane..(r + 1) * plane];
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let dst = &mut x[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = x0 + kx - p;
                            for (a, b) in dst[ix0..ix0 + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                                *a += b;
                            }
                        } else {
                            for ox in x0..x1 {
                                dst[ox * s + kx - p] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

pub fn conv3d(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = geometry(input, weights, stride, padding)?;
    let in_vol: usize = g.inp.iter().product();
    let plane = g.out[1] * g.out[2];
    let out_vol = g.out[0] * plane;
    let rows = g.cin * g.k * g.k * g.k;
    let mut out = vec![0.0f32; g.n * g.cout * out_vol];
    let mut col = vec![0.0f32; rows * plane];
    let x = input.data();
    let wt = weights.data();

    for n in 0..g.n {
        let xin = &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let out_n = &mut out[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        for oz in 0..g.out[0] {
            im2col_slice(&g, xin, oz, &mut col);
            for co in 0..g.cout {
                let o = &mut out_n[co * out_vol + oz * plane..][..plane];
                let wrow = &wt[co * rows..(co + 1) * rows];
                for (r, wv) in wrow.iter().enumerate() {
                    for (a, b) in o.iter_mut().zip(&col[r * plane..(r + 1) * plane]) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.out[0], g.out[1], g.out[2]], out)
}

/// Returns `(grad_input, grad_weights)`.
pub fn conv3d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = geometry(input, weights, stride, padding)?;
    let expected = [g.n, g.cout, g.out[0], g.out[1], g.out[2]];
    if grad_out.shape() != expected {
        return shape_err(format!(
            "conv3d backward: gradient shape {:?} does not match output {:?}",
            grad_out.shape(),
            expected
        ));
    }
    let in_vol: usize = g.inp.iter().product();
    let plane = g.out[1] * g.out[2];
    let out_vol = g.out[0] * plane;
    let rows = g.cin * g.k * g.k * g.k;
    let x = input.data();
    let wt = weights.data();
    let go = grad_out.data();
    let mut gin = vec![0.0f32; input.len()];
    let mut gw = vec![0.0f64; weights.len()];
    let mut col = vec![0.0f32; rows * plane];
    let mut gcol = vec![0.0f32; rows * plane];

    for n in 0..g.n {
        let xin = &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let gout_n = &go[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        let gin_n = &mut gin[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        for oz in 0..g.out[0] {
            im2col_slice(&g, xin, oz, &mut col);
            gcol.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..g.cout {
                let gslice = &gout_n[co * out_vol + oz * plane..][..plane];
                let wrow = &wt[co * rows..(co + 1) * rows];
                let gwrow = &mut gw[co * rows..(co + 1) * rows];
                for r in 0..rows {
                    let crow = &col[r * plane..(r + 1) * plane];
                    gwrow[r] += lane_dot(gslice, crow) as f64;
                    let wv = wrow[r];
                    for (a, b) in gcol[r * plane..(r + 1) * plane].iter_mut().zip(gslice) {
                        *a += wv * b;
                    }
                }
            }
            col2im_slice(&g, &gcol, oz, gin_n);
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gin)?,
        Tensor::new(weights.shape().to_vec(), gw.into_iter().map(|v| v as f32).collect())?,
    ))
}
