use super::Tensor;
use crate::error::{shape_err, Result};

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Gradient of ReLU given its forward input; zero at the kink.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return shape_err("relu backward: shape mismatch");
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub fn pool_output_extent(extent: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return shape_err("pooling kernel and stride must be positive");
    }
    if extent < kernel {
        return shape_err(format!(
            "max-pooling kernel {kernel} exceeds extent {extent}"
        ));
    }
    Ok((extent - kernel) / stride + 1)
}

/// Max pooling without padding. Returns the output and, per output
/// element, the linear input index of its maximum (first index on ties).
pub fn maxpool3d(input: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, d, h, w] = input.dims5("maxpool3d input")?;
    let od = pool_output_extent(d, kernel, stride)?;
    let oh = pool_output_extent(h, kernel, stride)?;
    let ow = pool_output_extent(w, kernel, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for kz in 0..kernel {
                        for ky in 0..kernel {
                            let row = base + ((z * stride + kz) * h + y * stride + ky) * w + xo * stride;
                            for kx in 0..kernel {
                                let v = x[row + kx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = row + kx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, od, oh, ow], out)?, argmax))
}

pub fn maxpool3d_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return shape_err("maxpool backward: index map does not match gradient");
    }
    let mut gin = Tensor::zeros(input_shape);
    let g = gin.data_mut();
    for (idx, gv) in argmax.iter().zip(grad_out.data()) {
        g[*idx as usize] += gv;
    }
    Ok(gin)
}

/// Averages every channel over its spatial extent: `N×C×D×H×W → N×C`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, d, h, w] = input.dims5("global_avg_pool input")?;
    let s = d * h * w;
    let data = input
        .data()
        .chunks(s)
        .map(|plane| (plane.iter().map(|v| *v as f64).sum::<f64>() / s as f64) as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c] = grad_out.dims2("global_avg_pool gradient")?;
    if input_shape.len() != 5 || input_shape[0] != n || input_shape[1] != c {
        return shape_err("global_avg_pool backward: shape mismatch");
    }
    let s: usize = input_shape[2..].iter().product();
    let mut data = Vec::with_capacity(n * c * s);
    for g in grad_out.data() {
        let v = g / s as f32;
        data.extend(std::iter::repeat_n(v, s));
    }
    Tensor::new(input_shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{numeric_grad, random_tensor, rel_error, weighted_sum};

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[2], 5.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
    }

    #[test]
    fn global_avg_of_constant_is_constant() {
        let x = Tensor::full(&[2, 3, 3, 3, 3], 7.25);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|v| *v == 7.25));
    }

    #[test]
    fn maxpool_routes_gradient_to_first_maximum() {
        // every value tied: first index of each window wins
        let x = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let (y, idx) = maxpool3d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(idx, vec![0]);
        let g = maxpool3d_backward(x.shape(), &idx, &Tensor::full(&[1, 1, 1, 1, 1], 3.0)).unwrap();
        assert_eq!(g.data()[0], 3.0);
        assert!(g.data()[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn maxpool_extents_follow_cascade() {
        let x = Tensor::zeros(&[1, 1, 10, 10, 10]);
        let (y, _) = maxpool3d(&x, 3, 3).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
        assert!(maxpool3d(&Tensor::zeros(&[1, 1, 2, 2, 2]), 3, 3).is_err());
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        let x = random_tensor(&[1, 2, 6, 6, 6], 3);
        let (y, idx) = maxpool3d(&x, 3, 3).unwrap();
        let coef = random_tensor(y.shape(), 4);
        let g = maxpool3d_backward(x.shape(), &idx, &coef).unwrap();
        let fd = numeric_grad(&x, 1e-4, |xp| weighted_sum(&maxpool3d(xp, 3, 3).unwrap().0, &coef));
        assert!(rel_error(g.data(), &fd) < 1e-3);
    }

    #[test]
    fn global_avg_gradient_matches_finite_differences() {
        let x = random_tensor(&[2, 2, 2, 3, 2], 5);
        let coef = random_tensor(&[2, 2], 6);
        let g = global_avg_pool_backward(x.shape(), &coef).unwrap();
        let fd = numeric_grad(&x, 1e-3, |xp| weighted_sum(&global_avg_pool(xp).unwrap(), &coef));
        assert!(rel_error(g.data(), &fd) < 1e-3);
    }
}
