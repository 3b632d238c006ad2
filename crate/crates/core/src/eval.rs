//! Fidelity and realism metrics and the sweep over the dial `t`.
//!
//! PSNR is measured after clipping to `[−1, 1]` and mapping to `[0, 1]`. The
//! perceptual proxy compares forward-difference gradient magnitudes at three
//! dyadic scales; it only supports ordering statements, not comparisons with
//! learned perceptual metrics.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::flow::condition_batch;
use crate::random::seeded;
use crate::solvers::{estimate_final, solve, SolverSpec, VelocityField};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB; `+∞` for identical images.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.check_same_shape(y)?;
    if x.numel() == 0 {
        return Err(Error::Dimension("PSNR of empty images".into()));
    }
    let unit = |v: f64| (v.clamp(-1.0, 1.0) + 1.0) * 0.5;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (unit(*a) - unit(*b)).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Number of dyadic scales in [`perceptual_proxy`].
pub const PROXY_SCALES: usize = 3;

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::Dimension(format!("image tensor needs rank >= 2, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((s[..s.len() - 2].iter().product(), h, w))
}

fn gradient_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 1) * (w - 1));
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let c = p[i * w + j];
            let dx = p[i * w + j + 1] - c;
            let dy = p[(i + 1) * w + j] - c;
            out.push((dx * dx + dy * dy).sqrt());
        }
    }
    out
}

fn halve(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (hh, hw) = (h / 2, w / 2);
    let mut out = vec![0.0; hh * hw];
    for i in 0..hh {
        for j in 0..hw {
            let a = p[2 * i * w + 2 * j] + p[2 * i * w + 2 * j + 1];
            let b = p[(2 * i + 1) * w + 2 * j] + p[(2 * i + 1) * w + 2 * j + 1];
            out[i * hw + j] = 0.25 * (a + b);
        }
    }
    out
}

/// `Σ_scales mean (|∇x| − |∇y|)²` over three block-mean scales. Leading axes
/// are treated as independent planes.
pub fn perceptual_proxy(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.check_same_shape(y)?;
    let (np, h, w) = planes(x)?;
    if h < 4 || w < 4 {
        return Err(Error::Dimension(format!("perceptual proxy needs at least 4x4 images, got {h}x{w}")));
    }
    let mut total = 0.0;
    for p in 0..np {
        let mut a = x.data()[p * h * w..(p + 1) * h * w].to_vec();
        let mut b = y.data()[p * h * w..(p + 1) * h * w].to_vec();
        let (mut hh, mut ww) = (h, w);
        for level in 0..PROXY_SCALES {
            if hh >= 2 && ww >= 2 {
                let ga = gradient_magnitude(&a, hh, ww);
                let gb = gradient_magnitude(&b, hh, ww);
                let n = ga.len() as f64;
                total += ga.iter().zip(&gb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / n;
            }
            if level + 1 < PROXY_SCALES {
                a = halve(&a, hh, ww);
                b = halve(&b, hh, ww);
                hh /= 2;
                ww /= 2;
            }
        }
    }
    Ok(total / np as f64)
}

/// How the estimate `x̂₁ᵗ` is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepMode {
    /// `x₀ + v(x₀, t)`: one evaluation of a one-step student.
    Student,
    /// Integrate the PF-ODE to `t`, then `x_t + (1−t)·v(x_t, t)`.
    Teacher(SolverSpec),
}

/// Conditioning used to turn ground truth into source points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSetup {
    pub sigma_p: f64,
    pub degradation: Option<DegradationSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub t: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    /// `NaN` when the samples are too small for the proxy.
    pub proxy_mean: f64,
    pub proxy_std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub model_id: String,
    pub dataset_id: String,
    pub rows: Vec<SweepRow>,
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::Usage("empty t grid".into()));
    }
    if let Some(t) = t_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Range(format!("grid time {t} outside [0, 1]")));
    }
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("t grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Estimates `x̂₁ᵗ` for every grid time from one shared draw of `x₀`.
pub fn sweep_estimates(
    model: &dyn VelocityField,
    mode: SweepMode,
    x1: &Tensor,
    t_grid: &[f64],
    setup: &SweepSetup,
) -> Result<Vec<Tensor>> {
    check_grid(t_grid)?;
    if x1.batch() == 0 {
        return Err(Error::Usage("empty dataset".into()));
    }
    let mut rng = seeded(setup.seed);
    let c = condition_batch(x1, setup.degradation.as_ref(), setup.sigma_p, &mut rng)?;
    let n = x1.batch();
    match mode {
        SweepMode::Student => t_grid
            .iter()
            .map(|&t| c.x0.add(&model.velocity(&c.x0, &c.cond, &vec![t; n])?))
            .collect(),
        SweepMode::Teacher(spec) => {
            let mut out = Vec::with_capacity(t_grid.len());
            let (mut x, mut t_prev) = (c.x0.clone(), 0.0);
            for &t in t_grid {
                x = solve(model, &x, &c.cond, (t_prev, t), &spec)?.x;
                t_prev = t;
                let v = model.velocity(&x, &c.cond, &vec![t; n])?;
                out.push(estimate_final(&x, t, &v)?);
            }
            Ok(out)
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-image PSNR and proxy statistics of each estimate against `x1`.
pub fn score_estimates(estimates: &[Tensor], x1: &Tensor, t_grid: &[f64]) -> Result<Vec<SweepRow>> {
    let n = x1.batch();
    let spatial_ok = x1.rank() >= 2 && x1.shape()[x1.rank() - 1] >= 4 && x1.shape()[x1.rank() - 2] >= 4;
    t_grid
        .iter()
        .zip(estimates)
        .map(|(&t, est)| {
            let mut p = Vec::with_capacity(n);
            let mut q = Vec::with_capacity(n);
            for i in 0..n {
                let (a, b) = (est.select(i), x1.select(i));
                p.push(psnr(&a, &b)?);
                if spatial_ok {
                    q.push(perceptual_proxy(&a, &b)?);
                }
            }
            let (psnr_mean, psnr_std) = mean_std(&p);
            let (proxy_mean, proxy_std) = if spatial_ok { mean_std(&q) } else { (f64::NAN, f64::NAN) };
            Ok(SweepRow { t, psnr_mean, psnr_std, proxy_mean, proxy_std, n })
        })
        .collect()
}

/// Sweeps the dial over `t_grid` on ground truth `x1`.
pub fn tradeoff_sweep(
    model: &dyn VelocityField,
    mode: SweepMode,
    x1: &Tensor,
    t_grid: &[f64],
    setup: &SweepSetup,
    model_id: &str,
    dataset_id: &str,
) -> Result<SweepResult> {
    let est = sweep_estimates(model, mode, x1, t_grid, setup)?;
    Ok(SweepResult {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        rows: score_estimates(&est, x1, t_grid)?,
    })
}

/// Mean per-pixel squared error of each estimate.
pub fn mse_curve(estimates: &[Tensor], x1: &Tensor) -> Result<Vec<f64>> {
    estimates.iter().map(|e| e.mse(x1)).collect()
}

pub const REPORT_HEADER: &str = "t,psnr_mean,psnr_std,proxy_mean,proxy_std,n";

/// Report CSV with 17 significant digits per value.
pub fn report_csv(result: &SweepResult) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in &result.rows {
        let _ = writeln!(
            s,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.t, r.psnr_mean, r.psnr_std, r.proxy_mean, r.proxy_std, r.n
        );
    }
    s
}

pub fn emit_report(result: &SweepResult, path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(result))?;
    Ok(())
}

/// Parses a report; model and dataset ids are not part of the CSV.
pub fn parse_report(text: &str) -> Result<SweepResult> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Format(format!("report must start with {REPORT_HEADER:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("report line {} has {} fields", i + 2, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?} on line {}", i + 2)));
        rows.push(SweepRow {
            t: num(f[0])?,
            psnr_mean: num(f[1])?,
            psnr_std: num(f[2])?,
            proxy_mean: num(f[3])?,
            proxy_std: num(f[4])?,
            n: f[5].parse().map_err(|_| Error::Format(format!("bad count {:?} on line {}", f[5], i + 2)))?,
        });
    }
    Ok(SweepResult { model_id: String::new(), dataset_id: String::new(), rows })
}

pub fn read_report(path: &Path) -> Result<SweepResult> {
    parse_report(&std::fs::read_to_string(path)?)
}

/// Writes a binary PGM grid: one row per entry of `rows`, each image a
/// single-channel `[.., H, W]` tensor in `[−1, 1]`, separated by 1-pixel gaps.
pub fn write_pgm_grid(path: &Path, rows: &[Vec<Tensor>]) -> Result<()> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Usage("no images to write".into()))?;
    let (_, h, w) = planes(first)?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + 1) - 1, cols * (w + 1) - 1);
    let mut pix = vec![0u8; gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (np, ih, iw) = planes(img)?;
            if np != 1 || ih != h || iw != w {
                return Err(Error::Dimension(format!("grid images must be single {h}x{w} planes, got {:?}", img.shape())));
            }
            for i in 0..h {
                for j in 0..w {
                    let v = (img.data()[i * w + j].clamp(-1.0, 1.0) + 1.0) * 127.5;
                    pix[(r * (h + 1) + i) * gw + c * (w + 1) + j] = v.round() as u8;
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{gw} {gh}\n255\n")?;
    f.write_all(&pix)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::randn;

    #[test]
    fn psnr_values() {
        let x = Tensor::full(&[1, 1, 4, 4], 0.3);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        // a 0.2 offset in [−1, 1] is 0.1 on the unit scale: MSE 0.01
        let y = x.map(|v| v + 0.2);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let lo = Tensor::full(&[4], -1.0);
        let hi = Tensor::full(&[4], 1.0);
        assert!(psnr(&lo, &hi).unwrap().abs() < 1e-12);
        assert!(psnr(&lo, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn proxy_basics() {
        let mut rng = seeded(4);
        let a = randn(&[2, 1, 8, 8], &mut rng);
        let b = randn(&[2, 1, 8, 8], &mut rng);
        assert_eq!(perceptual_proxy(&a, &a).unwrap(), 0.0);
        assert_eq!(perceptual_proxy(&a, &b).unwrap(), perceptual_proxy(&b, &a).unwrap());
        assert!(perceptual_proxy(&a, &b).unwrap() > 0.0);
        // a constant shift leaves every gradient unchanged
        assert!(perceptual_proxy(&a, &a.map(|v| v + 0.5)).unwrap() < 1e-28);
        let small = Tensor::zeros(&[1, 3, 3]);
        assert!(matches!(perceptual_proxy(&small, &small), Err(Error::Dimension(_))));
    }

    #[test]
    fn report_round_trip() {
        let result = SweepResult {
            model_id: String::new(),
            dataset_id: String::new(),
            rows: vec![
                SweepRow { t: 0.0, psnr_mean: 21.123456789012345, psnr_std: 0.1, proxy_mean: 1e-3, proxy_std: 2e-4, n: 100 },
                SweepRow { t: 0.5, psnr_mean: 1.0 / 3.0, psnr_std: 0.0, proxy_mean: 0.3, proxy_std: 0.01, n: 100 },
                SweepRow { t: 1.0, psnr_mean: f64::INFINITY, psnr_std: 0.0, proxy_mean: 7.0, proxy_std: 0.0, n: 1 },
            ],
        };
        let text = report_csv(&result);
        assert_eq!(text.lines().count(), 4);
        assert!(!text.contains(';'));
        assert_eq!(parse_report(&text).unwrap(), result);
        assert!(parse_report("t,psnr\n").is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[0.5, 0.2]).is_err());
        assert!(check_grid(&[0.0, 1.2]).is_err());
        assert!(check_grid(&[0.0, 0.5, 1.0]).is_ok());
    }
}
