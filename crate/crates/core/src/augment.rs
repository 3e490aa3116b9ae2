//! Random 3D view generation: affine resampling, sharpening or blurring,
//! gamma contrast and additive Gaussian noise.
//!
//! Every operation expects intensities in `[0, 255]` and clamps its
//! output to that range.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const INTENSITY_MAX: f32 = 255.0;

fn clamp(v: f64) -> f32 {
    v.clamp(0.0, INTENSITY_MAX as f64) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Per-axis rotation range in degrees.
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    /// Per-axis translation as a fraction of the extent.
    pub shift: (f64, f64),
    pub gamma: (f64, f64),
    pub sharpen_amount: (f64, f64),
    pub sharpen_sigma: f64,
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub p_affine: f64,
    pub p_sharpen: f64,
    pub p_blur: f64,
    pub p_gamma: f64,
    pub p_noise: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotation_deg: (-20.0, 20.0),
            scale: (0.7, 1.3),
            shift: (-0.05, 0.05),
            gamma: (0.7, 1.5),
            sharpen_amount: (0.5, 1.5),
            sharpen_sigma: 1.0,
            blur_sigma: (0.5, 1.0),
            noise_sigma: (2.0, 8.0),
            p_affine: 0.5,
            p_sharpen: 0.5,
            p_blur: 0.5,
            p_gamma: 0.5,
            p_noise: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Every transform switched off.
    pub fn identity() -> Self {
        Self {
            p_affine: 0.0,
            p_sharpen: 0.0,
            p_blur: 0.0,
            p_gamma: 0.0,
            p_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("shift", self.shift),
            ("gamma", self.gamma),
            ("sharpen_amount", self.sharpen_amount),
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("augment range {name} = [{lo}, {hi}] is not ordered")));
            }
        }
        let probs = [
            ("p_affine", self.p_affine),
            ("p_sharpen", self.p_sharpen),
            ("p_blur", self.p_blur),
            ("p_gamma", self.p_gamma),
            ("p_noise", self.p_noise),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment probability {name} = {p} is outside [0, 1]")));
            }
        }
        if self.scale.0 <= 0.0 || self.gamma.0 <= 0.0 || self.blur_sigma.0 < 0.0 || self.noise_sigma.0 < 0.0 || self.sharpen_sigma < 0.0 {
            return Err(Error::Config("scale and gamma must be positive, sigmas non-negative".into()));
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation about axis `axis` (0 = z, 1 = y, 2 = x) acting on `(z, y, x)` vectors.
fn axis_rotation(axis: usize, deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    m
}

/// `R = R_z · R_y · R_x` for angles given per axis `(z, y, x)` in degrees.
pub fn rotation_matrix(angles_deg: [f64; 3]) -> Mat3 {
    let r = matmul(&axis_rotation(0, angles_deg[0]), &axis_rotation(1, angles_deg[1]));
    matmul(&r, &axis_rotation(2, angles_deg[2]))
}

fn trilinear(src: &[f32], e: [usize; 3], q: [f64; 3]) -> f64 {
    let f = q.map(f64::floor);
    let t = [q[0] - f[0], q[1] - f[1], q[2] - f[2]];
    let base = f.map(|v| v as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - t[0] } else { t[0] };
        if wz == 0.0 {
            continue;
        }
        let z = base[0] + dz;
        if z < 0 || z >= e[0] as i64 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
            if wy == 0.0 {
                continue;
            }
            let y = base[1] + dy;
            if y < 0 || y >= e[1] as i64 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - t[2] } else { t[2] };
                if wx == 0.0 {
                    continue;
                }
                let x = base[2] + dx;
                if x < 0 || x >= e[2] as i64 {
                    continue;
                }
                let idx = ((z as usize * e[1]) + y as usize) * e[2] + x as usize;
                acc += wz * wy * wx * src[idx] as f64;
            }
        }
    }
    acc
}

/// Rotate, scale and translate about the volume center with trilinear
/// resampling; samples from outside the field read 0. The forward map is
/// `y = s·R(x − c) + c + shift·extent`. The mask is resampled the same way
/// and thresholded at one half.
pub fn affine3d(vol: &Volume, angles_deg: [f64; 3], scale: f64, shift: [f64; 3]) -> Result<Volume> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("affine scale must be positive, got {scale}")));
    }
    let e = vol.extents;
    let center = e.map(|n| (n as f64 - 1.0) / 2.0);
    let offset = [0, 1, 2].map(|a| shift[a] * e[a] as f64);
    let r = rotation_matrix(angles_deg);
    // inverse of a rotation is its transpose
    let inv = |d: [f64; 3]| -> [f64; 3] { [0, 1, 2].map(|i| (0..3).map(|k| r[k][i] * d[k]).sum::<f64>() / scale) };
    let mask_f: Option<Vec<f32>> = vol.mask.as_ref().map(|m| m.iter().map(|b| *b as f32).collect());
    let mut data = Vec::with_capacity(vol.len());
    let mut mask = mask_f.as_ref().map(|_| Vec::with_capacity(vol.len()));
    for z in 0..e[0] {
        for y in 0..e[1] {
            for x in 0..e[2] {
                let p = [z as f64, y as f64, x as f64];
                let d = [0, 1, 2].map(|a| p[a] - center[a] - offset[a]);
                let s = inv(d);
                let q = [0, 1, 2].map(|a| center[a] + s[a]);
                data.push(clamp(trilinear(&vol.data, e, q)));
                if let (Some(m), Some(src)) = (mask.as_mut(), mask_f.as_ref()) {
                    m.push((trilinear(src, e, q) >= 0.5) as u8);
                }
            }
        }
    }
    let mut out = vol.with_data(data);
    out.mask = mask;
    Ok(out)
}

pub fn gamma_adjust(vol: &Volume, gamma: f64) -> Result<Volume> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let m = INTENSITY_MAX as f64;
    Ok(vol.with_data(vol.data.iter().map(|v| clamp(m * (*v as f64 / m).clamp(0.0, 1.0).powf(gamma))).collect()))
}

/// Normalized 1-D Gaussian taps over `±⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn blur_data(data: &[f32], e: [usize; 3], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut cur: Vec<f64> = data.iter().map(|v| *v as f64).collect();
    let strides = [e[1] * e[2], e[2], 1];
    for axis in 0..3 {
        let n = e[axis] as i64;
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / stride) as i64 % n;
            let base = idx - pos as usize * stride;
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                // replicate the border voxel
                let p = (pos + t as i64 - r).clamp(0, n - 1) as usize;
                acc += w * cur[base + p * stride];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Separable Gaussian smoothing with replicated borders.
pub fn gaussian_blur(vol: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("blur sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    Ok(vol.with_data(blur_data(&vol.data, vol.extents, sigma).into_iter().map(clamp).collect()))
}

/// Unsharp masking `v + amount·(v − blur_σ(v))`.
pub fn sharpen(vol: &Volume, amount: f64, sigma: f64) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sharpen sigma must be non-negative, got {sigma}")));
    }
    let blurred = blur_data(&vol.data, vol.extents, sigma);
    Ok(vol.with_data(
        vol.data
            .iter()
            .zip(&blurred)
            .map(|(v, b)| clamp(*v as f64 + amount * (*v as f64 - b)))
            .collect(),
    ))
}

pub fn add_noise(vol: &Volume, sigma: f64, rng: &mut Rng) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Ok(vol.with_data(vol.data.iter().map(|v| clamp(*v as f64 + normal.sample(rng))).collect()))
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// One random augmentation chain: affine, then sharpen or blur, then
/// gamma, then noise, each applied with its own probability.
pub fn augment_once(vol: &Volume, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Volume> {
    let mut out = vol.clone();
    if rng.random_bool(policy.p_affine) {
        let angles = [0, 1, 2].map(|_| uniform(rng, policy.rotation_deg));
        let scale = uniform(rng, policy.scale);
        let shift = [0, 1, 2].map(|_| uniform(rng, policy.shift));
        out = affine3d(&out, angles, scale, shift)?;
    }
    if rng.random_bool(policy.p_sharpen) {
        let amount = uniform(rng, policy.sharpen_amount);
        out = sharpen(&out, amount, policy.sharpen_sigma)?;
    } else if rng.random_bool(policy.p_blur) {
        let sigma = uniform(rng, policy.blur_sigma);
        out = gaussian_blur(&out, sigma)?;
    }
    if rng.random_bool(policy.p_gamma) {
        out = gamma_adjust(&out, uniform(rng, policy.gamma))?;
    }
    if rng.random_bool(policy.p_noise) {
        let sigma = uniform(rng, policy.noise_sigma);
        out = add_noise(&out, sigma, rng)?;
    }
    Ok(out)
}

/// Two independent augmentation chains of the same source.
pub fn make_views(vol: &Volume, policy: &AugmentPolicy, rng: &mut Rng) -> Result<(Volume, Volume)> {
    policy.validate()?;
    let a = augment_once(vol, policy, rng)?;
    let b = augment_once(vol, policy, rng)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;

    fn blob(e: usize, width: f64) -> Volume {
        let c = (e as f64 - 1.0) / 2.0;
        let data = (0..e * e * e)
            .map(|i| {
                let (z, y, x) = ((i / (e * e)) as f64, ((i / e) % e) as f64, (i % e) as f64);
                let r2 = (z - c).powi(2) + (y - c).powi(2) + (x - c).powi(2);
                (200.0 * (-r2 / (2.0 * width * width)).exp()) as f32
            })
            .collect();
        Volume::new("blob", [e, e, e], data, None, 0).unwrap()
    }

    fn random_volume(seed: u64) -> Volume {
        let mut rng = Rng::seed_from_u64(seed);
        let data = (0..6 * 7 * 5).map(|_| rng.random_range(0.0..255.0)).collect();
        Volume::new("r", [6, 7, 5], data, Some(vec![1; 210]), 0).unwrap()
    }

    #[test]
    fn identity_affine_is_exact() {
        let v = random_volume(1);
        let out = affine3d(&v, [0.0; 3], 1.0, [0.0; 3]).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn quarter_turn_moves_a_spike() {
        let e = 9;
        let mut data = vec![0.0f32; e * e * e];
        // center 4; spike at (z, y, x) = (4, 4, 7), i.e. offset (0, 0, 3)
        data[(4 * e + 4) * e + 7] = 255.0;
        let v = Volume::new("s", [e, e, e], data, None, 0).unwrap();
        let out = affine3d(&v, [90.0, 0.0, 0.0], 1.0, [0.0; 3]).unwrap();
        // about the z axis (y, x) ↦ (y cos − x sin, y sin + x cos): (0, 3) ↦ (−3, 0)
        let target = (4 * e + 1) * e + 4;
        assert!((out.data[target] - 255.0).abs() < 1e-3, "{}", out.data[target]);
        let total: f32 = out.data.iter().sum();
        assert!((total - 255.0).abs() < 1e-2);
    }

    #[test]
    fn scale_round_trip_recovers_the_center() {
        let v = blob(24, 4.0);
        let small = affine3d(&v, [0.0; 3], 0.7, [0.0; 3]).unwrap();
        let back = affine3d(&small, [0.0; 3], 1.0 / 0.7, [0.0; 3]).unwrap();
        let mut diff = 0.0;
        let mut n = 0;
        for z in 6..18 {
            for y in 6..18 {
                for x in 6..18 {
                    let i = v.index(z, y, x);
                    diff += (v.data[i] - back.data[i]).abs() as f64;
                    n += 1;
                }
            }
        }
        assert!(diff / (n as f64) < 5.0, "{}", diff / n as f64);
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        assert!(affine3d(&random_volume(2), [0.0; 3], 0.0, [0.0; 3]).is_err());
    }

    #[test]
    fn gamma_examples() {
        let v = Volume::new("g", [1, 1, 3], vec![0.0, 100.0, 255.0], None, 0).unwrap();
        assert_eq!(gamma_adjust(&v, 1.0).unwrap().data, v.data);
        for g in [0.7, 1.0, 1.2, 1.5] {
            let out = gamma_adjust(&v, g).unwrap();
            assert_eq!(out.data[0], 0.0);
            assert_eq!(out.data[2], 255.0);
        }
    }

    #[test]
    fn blur_keeps_constants_and_kernel_is_normalized() {
        for sigma in [0.3, 0.5, 1.0, 1.7, 3.0] {
            let total: f64 = gaussian_kernel(sigma).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        let v = Volume::new("c", [4, 5, 6], vec![42.0; 120], None, 0).unwrap();
        assert_eq!(gaussian_blur(&v, 1.3).unwrap().data, v.data);
        assert_eq!(sharpen(&v, 1.0, 1.0).unwrap().data, v.data);
        assert!(gaussian_blur(&v, -1.0).is_err());
        assert!(add_noise(&v, -1.0, &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_probability_policy_returns_the_source() {
        let v = random_volume(3);
        let (a, b) = make_views(&v, &AugmentPolicy::identity(), &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, v);
        assert_eq!(b, v);
    }

    #[test]
    fn views_are_reproducible_and_distinct() {
        let v = blob(12, 3.0);
        let policy = AugmentPolicy::default();
        let mut r1 = Rng::seed_from_u64(9);
        let mut r2 = Rng::seed_from_u64(9);
        assert_eq!(make_views(&v, &policy, &mut r1).unwrap(), make_views(&v, &policy, &mut r2).unwrap());
        let mut rng = Rng::seed_from_u64(10);
        for _ in 0..100 {
            let (a, b) = make_views(&v, &policy, &mut rng).unwrap();
            let mad: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64;
            assert!(mad > 0.0);
        }
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            scale: (1.3, 0.7),
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            p_noise: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range(seed in 0u64..500) {
            let v = random_volume(seed);
            let mut rng = Rng::seed_from_u64(seed);
            let policy = AugmentPolicy {
                p_affine: 1.0, p_sharpen: 0.5, p_blur: 1.0, p_gamma: 1.0, p_noise: 1.0,
                ..AugmentPolicy::default()
            };
            let (a, b) = make_views(&v, &policy, &mut rng).unwrap();
            for out in [a, b] {
                prop_assert_eq!(out.extents, v.extents);
                prop_assert!(out.data.iter().all(|x| (0.0..=255.0).contains(x)));
            }
        }
    }
}
