//! Forecast metrics, radially binned energy spectra, report emission, and the
//! command-line entry point.

pub mod cli;

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::write_file;
use crate::error::{invalid, Error, Result};
use crate::fft::{wavenumber, Fft2};
use crate::forecast::{ensemble_mean, rollout, LatentModel, RolloutMode, RolloutResult, TrainedCodec};
use crate::pdelab::{derive_seed, Trajectory};

/// RMSE of `pred` against `reference` over one channel, divided by the RMS of `reference`.
/// Both are `frames × points × channels` interleaved.
pub fn nrmse_frames(pred: &[f64], reference: &[f64], channels: usize, variable: usize) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch { op: "nrmse", lhs: vec![pred.len()], rhs: vec![reference.len()] });
    }
    if variable >= channels {
        return invalid(format!("variable {variable} out of {channels} channels"));
    }
    let (mut err, mut norm) = (0.0, 0.0);
    for (p, r) in pred.chunks(channels).zip(reference.chunks(channels)) {
        err += (p[variable] - r[variable]).powi(2);
        norm += r[variable].powi(2);
    }
    if norm == 0.0 {
        return invalid("reference has zero RMS over the window; NRMSE undefined");
    }
    Ok((err / norm).sqrt())
}

/// NRMSE of one variable over a frame window shared by both trajectories.
pub fn nrmse(pred: &Trajectory, reference: &Trajectory, window: Range<usize>, variable: usize) -> Result<f64> {
    if pred.extents != reference.extents || pred.channels != reference.channels {
        return Err(Error::ShapeMismatch { op: "nrmse", lhs: pred.extents.clone(), rhs: reference.extents.clone() });
    }
    if window.is_empty() || window.end > pred.len() || window.end > reference.len() {
        return invalid(format!("window {window:?} outside trajectories of {} and {} frames", pred.len(), reference.len()));
    }
    let f = pred.frame_len();
    let r = window.start * f..window.end * f;
    nrmse_frames(&pred.frames[r.clone()], &reference.frames[r], pred.channels, variable)
}

/// Mean energy per integer radial wavenumber bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySpectrum {
    pub energy: Vec<f64>,
    /// Modes falling in each bin.
    pub counts: Vec<usize>,
}

impl EnergySpectrum {
    /// `Σ_bins mean · multiplicity`, the mean-square of the field.
    pub fn total(&self) -> f64 {
        self.energy.iter().zip(&self.counts).map(|(e, c)| e * *c as f64).sum()
    }
}

/// `|X_k|²/N^{2d}` binned by `⌊|k|⌋` and averaged within bins, for a periodic
/// field of extents `(N)` or `(N, N)` and a power-of-two `N`.
pub fn energy_spectrum(field: &[f64], extents: &[usize]) -> Result<EnergySpectrum> {
    let n = extents[0];
    let (power, radius): (Vec<f64>, Box<dyn Fn(usize) -> f64>) = match extents {
        [_] => {
            let spec = crate::fft::rfft(field)?;
            let mut full = vec![0.0; n];
            for (i, c) in spec.iter().enumerate() {
                full[i] = c.norm_sqr();
                if i > 0 && i < n - i {
                    full[n - i] = c.norm_sqr();
                }
            }
            (full, Box::new(move |i| wavenumber(i, n).unsigned_abs() as f64))
        }
        [a, b] if a == b => {
            let mut fft = Fft2::new(n)?;
            let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.forward(&mut buf);
            (
                buf.iter().map(|c| c.norm_sqr()).collect(),
                Box::new(move |idx| {
                    let (kx, ky) = (wavenumber(idx / n, n) as f64, wavenumber(idx % n, n) as f64);
                    (kx * kx + ky * ky).sqrt()
                }),
            )
        }
        _ => return invalid(format!("energy spectrum needs a square 1D/2D field, got extents {extents:?}")),
    };
    if field.len() != power.len() {
        return Err(Error::ShapeMismatch { op: "energy_spectrum", lhs: vec![field.len()], rhs: extents.to_vec() });
    }
    let scale = (power.len() as f64).powi(2);
    let bins = (0..power.len()).map(|i| radius(i).floor() as usize).max().unwrap_or(0) + 1;
    let mut energy = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (i, p) in power.iter().enumerate() {
        let b = radius(i).floor() as usize;
        energy[b] += p / scale;
        counts[b] += 1;
    }
    for (e, c) in energy.iter_mut().zip(&counts) {
        if *c > 0 {
            *e /= *c as f64;
        }
    }
    Ok(EnergySpectrum { energy, counts })
}

/// Mean of per-frame spectra over `center ± half_width` for one variable.
pub fn windowed_spectrum(traj: &Trajectory, center: usize, half_width: usize, variable: usize) -> Result<EnergySpectrum> {
    if center < half_width || center + half_width >= traj.len() {
        return invalid(format!("window {center}±{half_width} outside {} frames", traj.len()));
    }
    if variable >= traj.channels {
        return invalid(format!("variable {variable} out of {} channels", traj.channels));
    }
    let mut acc: Option<EnergySpectrum> = None;
    let count = 2 * half_width + 1;
    for m in center - half_width..=center + half_width {
        let field: Vec<f64> = traj.frame(m).iter().skip(variable).step_by(traj.channels).copied().collect();
        let s = energy_spectrum(&field, &traj.extents)?;
        match &mut acc {
            None => acc = Some(s),
            Some(a) => a.energy.iter_mut().zip(&s.energy).for_each(|(x, y)| *x += y),
        }
    }
    let mut s = acc.expect("window holds at least one frame");
    s.energy.iter_mut().for_each(|e| *e /= count as f64);
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub variable: usize,
    pub horizon: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub model: String,
    pub variable: usize,
    pub center: usize,
    pub half_width: usize,
    pub wavenumber: usize,
    pub energy: f64,
}

/// A 2D array rendered as an 8-bit grayscale image, `rows × cols` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub metrics: Vec<MetricRow>,
    pub spectra: Vec<SpectrumRow>,
    pub images: Vec<Image>,
    pub config_digest: String,
    /// Wall-clock seconds per model; omitted from deterministic emissions.
    pub runtime: Option<Vec<(String, f64)>>,
}

impl EvalReport {
    pub fn add_spectrum(&mut self, model: &str, variable: usize, center: usize, half_width: usize, s: &EnergySpectrum) {
        for (k, e) in s.energy.iter().enumerate() {
            self.spectra.push(SpectrumRow { model: model.into(), variable, center, half_width, wavenumber: k, energy: *e });
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("model,variable,horizon,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.model, r.variable, r.horizon, num(r.value));
    }
    s
}

pub fn spectra_csv(rows: &[SpectrumRow]) -> String {
    let mut s = String::from("model,variable,center,half_width,wavenumber,energy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.model, r.variable, r.center, r.half_width, r.wavenumber, num(r.energy));
    }
    s
}

/// Parse a metrics CSV written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let bad = |l: &str| Error::Format(format!("malformed metrics row {l:?}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(l));
            }
            Ok(MetricRow {
                model: f[0].to_string(),
                variable: f[1].parse().map_err(|_| bad(l))?,
                horizon: f[2].parse().map_err(|_| bad(l))?,
                value: f[3].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

/// Binary PGM with per-image min-max scaling; returns the bytes and `(min, max)`.
pub fn pgm(img: &Image) -> (Vec<u8>, f64, f64) {
    let lo = img.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", img.cols, img.rows).into_bytes();
    out.extend(img.data.iter().map(|v| if v.is_finite() { ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 }));
    (out, lo, hi)
}

/// Write `metrics.csv`, `spectra.csv`, `spectra.json`, `report.json` and one
/// `.pgm` plus `.pgm.json` sidecar per image.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&report.metrics).as_bytes())?;
    write_file(&dir.join("spectra.csv"), spectra_csv(&report.spectra).as_bytes())?;
    let spectra_meta = json!({
        "normalization": "energy = |X_k|^2 / N^(2d), averaged within integer bins floor(|k|); a constant field c has bin-0 energy c^2",
        "variables": "one spectrum per field variable",
    });
    write_file(&dir.join("spectra.json"), serde_json::to_string_pretty(&spectra_meta)?.as_bytes())?;
    let mut meta = json!({
        "config_digest": report.config_digest,
        "nrmse": "RMSE over the window divided by the reference RMS over the same window, per variable",
    });
    if let Some(rt) = &report.runtime {
        meta["runtime_seconds"] = rt.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<serde_json::Map<_, _>>().into();
    }
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    for img in &report.images {
        let (bytes, lo, hi) = pgm(img);
        write_file(&dir.join(format!("{}.pgm", img.name)), &bytes)?;
        let side = json!({"rows": img.rows, "cols": img.cols, "scaling": "per-image min-max to 0..255", "min": lo, "max": hi});
        write_file(&dir.join(format!("{}.pgm.json", img.name)), serde_json::to_string_pretty(&side)?.as_bytes())?;
    }
    Ok(())
}

/// Field image of one frame: 2D frames as-is, 1D frames as a single row.
pub fn frame_image(name: &str, frame: &[f64], extents: &[usize], channels: usize, variable: usize) -> Image {
    let data: Vec<f64> = frame.iter().skip(variable).step_by(channels).copied().collect();
    let (rows, cols) = match extents {
        [n] => (1, *n),
        [a, b, ..] => (*a, *b),
        [] => (0, 0),
    };
    Image { name: name.into(), rows, cols, data }
}

/// Rollouts of one model over a set of reference trajectories.
pub struct ForecastEval {
    /// Ensemble-mean predictions per trajectory as trajectories aligned with
    /// reference frames `start + h ..`.
    pub predictions: Vec<Trajectory>,
    pub references: Vec<Trajectory>,
    pub results: Vec<RolloutResult>,
}

impl ForecastEval {
    /// Mean over trajectories of the NRMSE over predicted frames `0..horizon`.
    pub fn nrmse(&self, horizon: usize, variable: usize, member: Option<usize>) -> Result<f64> {
        let mut acc = 0.0;
        for ((p, r), res) in self.predictions.iter().zip(&self.references).zip(&self.results) {
            let v = match member {
                None => nrmse(p, r, 0..horizon, variable)?,
                Some(e) => {
                    let f = res.frame_len;
                    let m = &res.members[e];
                    if m.steps < horizon {
                        f64::INFINITY
                    } else {
                        nrmse_frames(&m.frames[..horizon * f], &r.frames[..horizon * f], r.channels, variable)?
                    }
                }
            };
            acc += v;
        }
        Ok(acc / self.predictions.len() as f64)
    }
}

/// Roll out from frames `start..start+h` of each reference and align predictions
/// with the frames that follow. Trajectory `i` uses seed `derive_seed(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_forecasts(
    codec: &TrainedCodec,
    model: &LatentModel,
    refs: &[&Trajectory],
    start: usize,
    horizon: usize,
    ensemble: usize,
    mode: RolloutMode,
    seed: u64,
) -> Result<ForecastEval> {
    let h = model.meta.denoiser.history;
    let mut out = ForecastEval { predictions: Vec::new(), references: Vec::new(), results: Vec::new() };
    for (i, t) in refs.iter().enumerate() {
        if start + h + horizon > t.len() {
            return invalid(format!("trajectory {i} has {} frames; needs {}", t.len(), start + h + horizon));
        }
        let geom = codec.geometry(&t.extents)?;
        let init = t.window(start, h)?;
        let res = rollout(codec, model, &geom, &init, &t.xi, horizon, ensemble, mode, derive_seed(seed, i as u64))?;
        let f = t.frame_len();
        let reference = Trajectory { frames: t.frames[(start + h) * f..(start + h + horizon) * f].to_vec(), ..(*t).clone() };
        let prediction = Trajectory { frames: ensemble_mean(&res), ..reference.clone() };
        out.predictions.push(prediction);
        out.references.push(reference);
        out.results.push(res);
    }
    Ok(out)
}
