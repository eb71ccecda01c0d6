//! RGB float images, binary PPM interchange and PSNR/SSIM metrics.

use std::io::Write;
use std::path::Path;

use crate::error::ImageError;

/// Row-major interleaved RGB, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn check_same_dims(&self, other: &Image) -> Result<(), ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::DimensionMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    /// 8-bit quantization used by PPM output: `floor(x·255 + 0.5)` after clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Image { width, height, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
        let bad = |m: &str| ImageError::MalformedPpm(m.to_string());
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("expected P6 magic"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
        if raster.len() != w * h * 3 {
            return Err(bad("raster size does not match header"));
        }
        Ok(Image::from_rgb8(w, h, raster))
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::File::create(path)?.write_all(&self.encode_ppm())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image, Box<dyn std::error::Error + Send + Sync>> {
        Ok(Image::decode_ppm(&std::fs::read(path)?)?)
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, ImageError> {
    a.check_same_dims(b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio on unit dynamic range, capped at 100 dB.
pub fn compute_psnr(a: &Image, b: &Image) -> Result<f64, ImageError> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(100.0);
    }
    Ok((-10.0 * m.log10()).min(100.0))
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable 11×11 Gaussian window over one plane. Windows clipped by the
/// border are renormalized to unit weight.
struct Window {
    kernel: [f64; 2 * SSIM_RADIUS + 1],
    width: usize,
    height: usize,
    norm_x: Vec<f64>,
    norm_y: Vec<f64>,
}

impl Window {
    fn new(width: usize, height: usize) -> Self {
        let kernel = ssim_kernel();
        let norm = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|p| {
                    (0..kernel.len())
                        .filter(|&k| {
                            let q = p as isize + k as isize - SSIM_RADIUS as isize;
                            q >= 0 && (q as usize) < n
                        })
                        .map(|k| kernel[k])
                        .sum()
                })
                .collect()
        };
        Window { kernel, width, height, norm_x: norm(width), norm_y: norm(height) }
    }

    fn pass(&self, src: &[f64], horizontal: bool, pre_divide: bool) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let norm = if horizontal { &self.norm_x } else { &self.norm_y };
        let len = if horizontal { w } else { h };
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = if horizontal { x } else { y };
                let mut acc = 0.0;
                for (k, &g) in self.kernel.iter().enumerate() {
                    let q = p as isize + k as isize - SSIM_RADIUS as isize;
                    if q < 0 || q as usize >= len {
                        continue;
                    }
                    let q = q as usize;
                    let idx = if horizontal { y * w + q } else { q * w + x };
                    let v = if pre_divide { src[idx] / norm[q] } else { src[idx] };
                    acc += g * v;
                }
                out[y * w + x] = if pre_divide { acc } else { acc / norm[p] };
            }
        }
        out
    }

    fn blur(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, true, false), false, false)
    }

    fn blur_transpose(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, false, true), true, true)
    }
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels, and optionally its gradient with
/// respect to `a`.
pub fn ssim_with_gradient(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>), ImageError> {
    a.check_same_dims(b)?;
    let (w, h) = a.dims();
    let win = Window::new(w, h);
    let n = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let x = plane(a, c);
        let y = plane(b, c);
        let mx = win.blur(&x);
        let my = win.blur(&y);
        let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(p, q)| p * q).collect::<Vec<_>>();
        let exx = win.blur(&sq(&x, &x));
        let eyy = win.blur(&sq(&y, &y));
        let exy = win.blur(&sq(&x, &y));
        let mut d_mx = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * (exy[i] - mx[i] * my[i]) + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = exx[i] - mx[i] * mx[i] + eyy[i] - my[i] * my[i] + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // Arranged so every term cancels exactly when a == b.
                d_mx[i] = (2.0 * my[i] * (a2 - a1) - 2.0 * mx[i] * s * (b2 - b1)) / (b1 * b2);
                d_exx[i] = -s / b2;
                d_exy[i] = (2.0 / b2) * (a1 / b1);
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mx = win.blur_transpose(&d_mx);
            let t_exx = win.blur_transpose(&d_exx);
            let t_exy = win.blur_transpose(&d_exy);
            for i in 0..w * h {
                g[3 * i + c] = (t_mx[i] + 2.0 * x[i] * t_exx[i] + y[i] * t_exy[i]) / n;
            }
        }
    }
    Ok((total / n, grad))
}

pub fn compute_ssim(a: &Image, b: &Image) -> Result<f64, ImageError> {
    Ok(ssim_with_gradient(a, b, false)?.0)
}
