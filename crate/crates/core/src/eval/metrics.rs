use crate::error::{Error, Result};
use crate::frame::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// A full-reference image quality metric.
pub trait ImageMetric {
    fn name(&self) -> &str;
    fn evaluate(&self, pred: &Image, gt: &Image) -> Result<f64>;
}

pub struct Psnr;
pub struct Ssim;

impl ImageMetric for Psnr {
    fn name(&self) -> &str {
        "psnr"
    }

    fn evaluate(&self, pred: &Image, gt: &Image) -> Result<f64> {
        psnr(pred, gt)
    }
}

impl ImageMetric for Ssim {
    fn name(&self) -> &str {
        "ssim"
    }

    fn evaluate(&self, pred: &Image, gt: &Image) -> Result<f64> {
        ssim(pred, gt)
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    same_shape(pred, gt)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a `w x h` plane.
fn filter(plane: &[f64], w: usize, h: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over the valid window positions and the three channels.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    same_shape(pred, gt)?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let a: Vec<f64> = pred.data().iter().skip(ch).step_by(3).copied().collect();
        let b: Vec<f64> = gt.data().iter().skip(ch).step_by(3).copied().collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let (ma, _, _) = filter(&a, w, h, &g);
        let (mb, _, _) = filter(&b, w, h, &g);
        let (saa, _, _) = filter(&prod(&a, &a), w, h, &g);
        let (sbb, _, _) = filter(&prod(&b, &b), w, h, &g);
        let (sab, ow, oh) = filter(&prod(&a, &b), w, h, &g);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}
