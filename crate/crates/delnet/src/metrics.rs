//! Restoration quality metrics and the sequential forgetting matrix.
//!
//! PSNR is computed on all channels; SSIM on the Rec. 601 luminance
//! plane with the standard 11x11 Gaussian window (sigma 1.5, K1 0.01,
//! K2 0.03), averaged over windows that lie fully inside the image.
//! The forgetting matrix records (psnr, ssim) after each training task
//! for every task seen so far, and the report diffs final-row PSNR
//! against the diagonal.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::Serialize;

/// Returned when the reference and prediction are bit-identical; keeps
/// CSV output numeric where the true value would be infinite.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

// ─── psnr ───────────────────────────────────────────────────────────────

pub fn psnr(pred: &Tensor, gt: &Tensor, max_val: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let n = pred.numel() as f64;
    let mse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

// ─── ssim ───────────────────────────────────────────────────────────────

/// Rec. 601 luma plane of a [3,H,W], [1,H,W], or [H,W] image.
fn luminance(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    match img.shape() {
        [h, w] => Ok((img.data().to_vec(), *h, *w)),
        [1, h, w] => Ok((img.data().to_vec(), *h, *w)),
        [3, h, w] => {
            let plane = h * w;
            let d = img.data();
            let y = (0..plane)
                .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
                .collect();
            Ok((y, *h, *w))
        }
        other => Err(Error::shape("ssim", format!("expected image, got {other:?}"))),
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            w.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM over all fully-contained 11x11 windows, on luminance,
/// with data range 1.0.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let (x, h, w) = luminance(pred)?;
    let (y, _, _) = luminance(gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let win = gaussian_window();

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                let row = (y0 + wy) * w + x0;
                let wrow = wy * SSIM_WINDOW;
                for wx in 0..SSIM_WINDOW {
                    let g = win[wrow + wx];
                    let a = x[row + wx];
                    let b = y[row + wx];
                    mx += g * a;
                    my += g * b;
                    mxx += g * a * a;
                    myy += g * b * b;
                    // Grouped so the product rounds identically when the
                    // arguments swap; every other term is symmetric too,
                    // making ssim(a, b) == ssim(b, a) bit-exact.
                    mxy += g * (a * b);
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ─── forgetting matrix ──────────────────────────────────────────────────

/// Quality after training task `i`, evaluated on task `j ≤ i`.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct QualityEntry {
    pub psnr: f64,
    pub ssim: f64,
    pub n_samples: usize,
}

/// Lower-triangular matrix of evaluations in sequential order.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ForgettingMatrix {
    entries: Vec<((usize, usize), QualityEntry)>,
}

impl ForgettingMatrix {
    pub fn new() -> ForgettingMatrix {
        ForgettingMatrix::default()
    }

    pub fn record(
        &mut self,
        after_task: usize,
        eval_task: usize,
        entry: QualityEntry,
    ) -> Result<()> {
        if eval_task > after_task {
            return Err(Error::invalid(
                "forgetting matrix",
                format!("eval task {eval_task} not yet trained at row {after_task}"),
            ));
        }
        if self.entry(after_task, eval_task).is_some() {
            return Err(Error::invalid(
                "forgetting matrix",
                format!("duplicate entry ({after_task}, {eval_task})"),
            ));
        }
        self.entries.push(((after_task, eval_task), entry));
        Ok(())
    }

    pub fn entry(&self, after_task: usize, eval_task: usize) -> Option<&QualityEntry> {
        self.entries
            .iter()
            .find(|((i, j), _)| *i == after_task && *j == eval_task)
            .map(|(_, e)| e)
    }

    pub fn rows(&self) -> &[((usize, usize), QualityEntry)] {
        &self.entries
    }

    /// Largest row index present.
    pub fn final_task(&self) -> Option<usize> {
        self.entries.iter().map(|((i, _), _)| *i).max()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ForgettingSummary {
    /// (task, final-row psnr − diagonal psnr) for every task before the
    /// final one. Negative values mean quality was lost.
    pub per_task: Vec<(usize, f64)>,
    pub min: f64,
    pub mean: f64,
}

/// PSNR drift of each earlier task after the final task finished
/// training. Pure measurement: negative drift is reported, not
/// rejected.
pub fn forgetting_report(matrix: &ForgettingMatrix) -> Result<ForgettingSummary> {
    let last = matrix
        .final_task()
        .ok_or_else(|| Error::invalid("forgetting_report", "empty matrix"))?;
    if last == 0 {
        return Err(Error::invalid(
            "forgetting_report",
            "need at least 2 tasks to measure forgetting",
        ));
    }
    let mut per_task = Vec::with_capacity(last);
    for j in 0..last {
        let diag = matrix.entry(j, j).ok_or_else(|| {
            Error::invalid("forgetting_report", format!("missing diagonal entry ({j}, {j})"))
        })?;
        let fin = matrix.entry(last, j).ok_or_else(|| {
            Error::invalid("forgetting_report", format!("missing final-row entry ({last}, {j})"))
        })?;
        per_task.push((j, fin.psnr - diag.psnr));
    }
    let min = per_task.iter().map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
    let mean = per_task.iter().map(|(_, d)| *d).sum::<f64>() / per_task.len() as f64;
    Ok(ForgettingSummary { per_task, min, mean })
}
