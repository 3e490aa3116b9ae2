use super::Tensor;
use crate::error::{shape_err, Result};

/// `x·W + b` with `x: N×in`, `W: in×out`, `b: out`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, fin] = input.dims2("dense input")?;
    let [win, fout] = weight.dims2("dense weight")?;
    if win != fin {
        return shape_err(format!("dense: input width {fin} but weight expects {win}"));
    }
    if bias.len() != fout {
        return shape_err(format!("dense: bias length {} but {fout} outputs", bias.len()));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * fout);
    for i in 0..n {
        let mut acc: Vec<f64> = bias.data().iter().map(|v| *v as f64).collect();
        for (k, xv) in x[i * fin..(i + 1) * fin].iter().enumerate() {
            let xv = *xv as f64;
            for (a, wv) in acc.iter_mut().zip(&w[k * fout..(k + 1) * fout]) {
                *a += xv * *wv as f64;
            }
        }
        out.extend(acc.into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![n, fout], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let [n, fin] = input.dims2("dense input")?;
    let [_, fout] = weight.dims2("dense weight")?;
    if grad_out.shape() != [n, fout] {
        return shape_err(format!(
            "dense backward: gradient {:?} for output {:?}",
            grad_out.shape(),
            [n, fout]
        ));
    }
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();
    let mut gx = vec![0.0f32; n * fin];
    let mut gw = vec![0.0f64; fin * fout];
    let mut gb = vec![0.0f64; fout];
    for i in 0..n {
        let grow = &gy[i * fout..(i + 1) * fout];
        for (b, g) in gb.iter_mut().zip(grow) {
            *b += *g as f64;
        }
        for k in 0..fin {
            let wrow = &w[k * fout..(k + 1) * fout];
            let xv = x[i * fin + k] as f64;
            let mut dot = 0.0f64;
            for ((gwv, wv), g) in gw[k * fout..(k + 1) * fout].iter_mut().zip(wrow).zip(grow) {
                *gwv += xv * *g as f64;
                dot += *wv as f64 * *g as f64;
            }
            gx[i * fin + k] = dot as f32;
        }
    }
    Ok((
        Tensor::new(vec![n, fin], gx)?,
        Tensor::new(vec![fin, fout], gw.into_iter().map(|v| v as f32).collect())?,
        gb.into_iter().map(|v| v as f32).collect(),
    ))
}
