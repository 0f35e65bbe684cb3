//! Spectra, crystalline fraction, Gaussian fits of `f(θ)`, phase-boundary
//! widths, decay envelopes and echo peaks.
//!
//! Spectrum convention: `S_k = L^{-1/2} Σ_n s_n e^{−2πikn/L}` over the
//! window (after optional taper and zero padding to `P ≥ L` points, in
//! which case `P` replaces `L`). One-sided power is `|S_0|²`, `2|S_k|²` for
//! `0 < k < P/2`, and `|S_{P/2}|²`, so the powers sum to `Σ s_n²`. The
//! frequency of bin `k` is `ν̃ = k/P` in units of the drive frequency.

use std::fmt::Write as _;

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::engine::EvolutionRecord;
use crate::error::{Error, Result};

pub const SPECTRUM_FORMAT_VERSION: u32 = 1;
pub const FIT_FORMAT_VERSION: u32 = 1;
pub const NORMALIZATION: &str = "unitary-dft-one-sided";
pub const DEFAULT_CUTOFF: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Taper {
    None,
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumOptions {
    /// First cycle index N in the window.
    pub start: usize,
    /// Window length; `None` takes every sample from `start`, dropping the
    /// last one if needed to make the length even.
    pub length: Option<usize>,
    pub subtract_mean: bool,
    pub taper: Taper,
    /// Total transform length after zero padding.
    pub padded_length: Option<usize>,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            start: 1,
            length: None,
            subtract_mean: false,
            taper: Taper::None,
            padded_length: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumBin {
    pub nu_tilde: f64,
    pub re: f64,
    pub im: f64,
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    pub bins: Vec<SpectrumBin>,
    pub window_start: usize,
    pub window_length: usize,
    pub transform_length: usize,
    pub normalization: &'static str,
}

impl Spectrum {
    pub fn total_power(&self) -> f64 {
        self.bins.iter().map(|b| b.power).sum()
    }

    /// Index of the most powerful bin (lowest index on ties).
    pub fn peak_bin(&self) -> usize {
        let mut best = 0;
        for (k, b) in self.bins.iter().enumerate() {
            if b.power > self.bins[best].power {
                best = k;
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# dtcsim-spectrum format_version={SPECTRUM_FORMAT_VERSION}\n# normalization={}\n# window_start={}\n# window_length={}\n# transform_length={}\nnu_tilde,re,im,power\n",
            self.normalization, self.window_start, self.window_length, self.transform_length
        );
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{}", b.nu_tilde, b.re, b.im, b.power);
        }
        out
    }
}

/// Real samples `M_z(N)` for `N = start .. start + L`.
fn window(record: &EvolutionRecord, opts: &SpectrumOptions) -> Result<Vec<f64>> {
    let first = record
        .samples
        .iter()
        .position(|s| s.n == opts.start)
        .ok_or_else(|| Error::InvalidWindow(format!("record has no sample N = {}", opts.start)))?;
    let available = record.samples.len() - first;
    let length = match opts.length {
        Some(l) => {
            if l % 2 == 1 {
                return Err(Error::InvalidWindow(format!("window length {l} is odd; the ν̃ = 1/2 bin needs even L")));
            }
            if l > available {
                return Err(Error::InvalidWindow(format!("window length {l} exceeds the {available} samples available")));
            }
            l
        }
        None => available - available % 2,
    };
    if length < 4 {
        return Err(Error::InvalidWindow(format!("window length {length} is below 4")));
    }
    let values: Vec<f64> = record.samples[first..first + length].iter().map(|s| s.mz).collect();
    for (k, s) in record.samples[first..first + length].iter().enumerate() {
        if s.n != opts.start + k {
            return Err(Error::InvalidWindow(format!("samples are not consecutive at N = {}", s.n)));
        }
    }
    Ok(values)
}

pub fn spectrum(record: &EvolutionRecord, opts: &SpectrumOptions) -> Result<Spectrum> {
    let values = window(record, opts)?;
    spectrum_of(&values, opts.start, opts)
}

/// Spectrum of an explicit window of samples.
pub fn spectrum_of(values: &[f64], start: usize, opts: &SpectrumOptions) -> Result<Spectrum> {
    let l = values.len();
    if l < 4 || l % 2 == 1 {
        return Err(Error::InvalidWindow(format!("window length {l} must be even and at least 4")));
    }
    let mut s: Vec<f64> = values.to_vec();
    if opts.subtract_mean {
        let mean = s.iter().sum::<f64>() / l as f64;
        for x in &mut s {
            *x -= mean;
        }
    }
    if opts.taper == Taper::Hann {
        for (n, x) in s.iter_mut().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / l as f64).cos();
            *x *= w;
        }
    }
    let p = opts.padded_length.unwrap_or(l);
    if p < l || p % 2 == 1 {
        return Err(Error::InvalidWindow(format!(
            "padded length {p} must be even and at least the window length {l}"
        )));
    }
    let mut buf: Vec<Complex64> = s.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    buf.resize(p, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(p).process(&mut buf);
    let scale = 1.0 / (p as f64).sqrt();
    let bins = (0..=p / 2)
        .map(|k| {
            let c = buf[k] * scale;
            let fold = if k == 0 || k == p / 2 { 1.0 } else { 2.0 };
            SpectrumBin {
                nu_tilde: k as f64 / p as f64,
                re: c.re,
                im: c.im,
                power: fold * c.norm_sqr(),
            }
        })
        .collect();
    Ok(Spectrum {
        bins,
        window_start: start,
        window_length: l,
        transform_length: p,
        normalization: NORMALIZATION,
    })
}

/// Nyquist-bin power over total one-sided power.
pub fn crystalline_fraction(spec: &Spectrum) -> Result<f64> {
    if spec.transform_length % 2 == 1 {
        return Err(Error::InvalidWindow("no ν̃ = 1/2 bin".into()));
    }
    let total = spec.total_power();
    if !(total > 0.0) {
        return Err(Error::UndefinedFraction);
    }
    Ok(spec.bins.last().expect("nonempty").power / total)
}

// ---------------------------------------------------------------------------
// Gaussian fits

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
    /// Residual sum of squares.
    pub rss: f64,
    pub r_squared: f64,
    pub iterations: usize,
}

impl GaussianFit {
    pub fn eval(&self, x: f64) -> f64 {
        gauss(self.amplitude, self.center, self.sigma, x)
    }
}

fn gauss(a: f64, c: f64, s: f64, x: f64) -> f64 {
    a * (-(x - c).powi(2) / (2.0 * s * s)).exp()
}

const FIT_MAX_ITER: usize = 200;
const FIT_GRAD_TOL: f64 = 1e-10;

fn rss_of(p: [f64; 3], x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&xi, &yi)| (gauss(p[0], p[1], p[2], xi) - yi).powi(2)).sum()
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    if !d.is_finite() || d == 0.0 {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = b[r];
        }
        *o = det(mk) / d;
    }
    Some(out)
}

/// Least-squares fit of `A·exp(−(θ−θ₀)²/2σ²)` by damped Gauss–Newton
/// (Levenberg–Marquardt) from a data-driven start.
pub fn fit_gaussian(theta: &[f64], f: &[f64]) -> Result<GaussianFit> {
    let fail = |iterations, gradient_norm, reason: &str| Error::FitFailure {
        iterations,
        gradient_norm,
        reason: reason.to_string(),
    };
    if theta.len() != f.len() {
        return Err(Error::InvalidInput("θ and f lengths differ".into()));
    }
    if theta.len() < 5 {
        return Err(fail(0, f64::NAN, "fewer than 5 points"));
    }
    if theta.iter().chain(f).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite fit input".into()));
    }
    let (mut kmax, mut fmin) = (0, f64::INFINITY);
    for (k, &v) in f.iter().enumerate() {
        if v > f[kmax] {
            kmax = k;
        }
        fmin = fmin.min(v);
    }
    let fmax = f[kmax];
    if !(fmax > 0.0) || fmax - fmin <= 1e-12 {
        return Err(fail(0, f64::NAN, "flat data"));
    }
    let half: Vec<f64> = theta
        .iter()
        .zip(f)
        .filter(|(_, &v)| v >= 0.5 * fmax)
        .map(|(&t, _)| t)
        .collect();
    let lo = half.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = half.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut spacing = f64::INFINITY;
    for w in theta.windows(2) {
        let d = (w[1] - w[0]).abs();
        if d > 0.0 {
            spacing = spacing.min(d);
        }
    }
    let fwhm = if hi > lo { hi - lo } else { spacing };
    let mut p = [fmax, theta[kmax], (fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt())).max(1e-12)];
    let mut rss = rss_of(p, theta, f);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut gnorm = f64::INFINITY;
    let mut stalled = 0usize;
    while iterations < FIT_MAX_ITER {
        let mut jtj = [[0.0; 3]; 3];
        let mut g = [0.0; 3];
        for (&x, &y) in theta.iter().zip(f) {
            let e = gauss(1.0, p[1], p[2], x);
            let r = p[0] * e - y;
            let dx = x - p[1];
            let j = [e, p[0] * e * dx / (p[2] * p[2]), p[0] * e * dx * dx / p[2].powi(3)];
            for a in 0..3 {
                g[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm <= FIT_GRAD_TOL || stalled >= 8 {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..50 {
            let mut m = jtj;
            for a in 0..3 {
                m[a][a] += lambda * jtj[a][a].max(1e-300);
            }
            let Some(step) = solve3(m, [-g[0], -g[1], -g[2]]) else {
                lambda *= 4.0;
                continue;
            };
            let trial = [(p[0] + step[0]).max(0.0), p[1] + step[1], (p[2] + step[2]).abs().max(1e-300)];
            let trial_rss = rss_of(trial, theta, f);
            if trial_rss <= rss {
                stalled = if rss - trial_rss <= 1e-15 * rss.max(1e-300) { stalled + 1 } else { 0 };
                p = trial;
                rss = trial_rss;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 2.0;
        }
        if !accepted {
            // no downhill step exists at machine precision: a minimum
            stalled = usize::MAX;
        }
    }
    if gnorm > FIT_GRAD_TOL && stalled < 8 {
        return Err(fail(iterations, gnorm, "iteration limit reached"));
    }
    if !(p.iter().all(|v| v.is_finite()) && p[2] > 0.0) {
        return Err(fail(iterations, gnorm, "parameters diverged"));
    }
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let tss: f64 = f.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(GaussianFit {
        amplitude: p[0],
        center: p[1],
        sigma: p[2],
        rss,
        r_squared: 1.0 - rss / tss,
        iterations,
    })
}

/// `σ·sqrt(2 ln(A/cutoff))`, or 0 when `A ≤ cutoff`.
pub fn boundary_half_width(amplitude: f64, sigma: f64, cutoff: f64) -> f64 {
    if amplitude <= cutoff {
        0.0
    } else {
        sigma * (2.0 * (amplitude / cutoff).ln()).sqrt()
    }
}

/// One τ of a θ sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrystalFitRow {
    pub tau: f64,
    /// `W^{P,P}·τ`, the reference half-width in radians.
    pub w_tau: f64,
    pub theta: Vec<f64>,
    pub f: Vec<f64>,
    pub fit: Option<GaussianFit>,
    /// Why no fit is available.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryRow {
    pub tau: f64,
    pub w_tau: f64,
    pub width: Option<f64>,
    pub status: String,
}

/// Fits every row with at least five points.
pub fn fit_rows(rows: &mut [CrystalFitRow]) {
    for r in rows {
        if r.theta.len() < 5 {
            r.fit = None;
            r.status = "skipped: fewer than 5 points".into();
            continue;
        }
        match fit_gaussian(&r.theta, &r.f) {
            Ok(fit) => {
                r.fit = Some(fit);
                r.status = "ok".into();
            }
            Err(e) => {
                r.fit = None;
                r.status = format!("failed: {e}");
            }
        }
    }
}

pub fn dtc_boundary(rows: &[CrystalFitRow], cutoff: f64) -> Vec<BoundaryRow> {
    rows.iter()
        .map(|r| {
            let (width, status) = match &r.fit {
                Some(fit) if fit.amplitude > cutoff => (Some(boundary_half_width(fit.amplitude, fit.sigma, cutoff)), "ok".to_string()),
                Some(_) => (Some(0.0), "empty region".to_string()),
                None => (None, r.status.clone()),
            };
            BoundaryRow {
                tau: r.tau,
                w_tau: r.w_tau,
                width,
                status,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `tau,w_tau,A,theta0,sigma,residual,r_squared,width,points,status` with
/// angles in radians.
pub fn fits_csv(rows: &[CrystalFitRow], cutoff: f64) -> String {
    let mut out = format!("# dtcsim-fits format_version={FIT_FORMAT_VERSION}\n# cutoff={cutoff}\ntau,w_tau,A,theta0,sigma,residual,r_squared,width,points,status\n");
    let bounds = dtc_boundary(rows, cutoff);
    for (r, b) in rows.iter().zip(bounds) {
        let f = r.fit.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.tau,
            r.w_tau,
            opt(f.map(|f| f.amplitude)),
            opt(f.map(|f| f.center)),
            opt(f.map(|f| f.sigma)),
            opt(f.map(|f| f.rss)),
            opt(f.map(|f| f.r_squared)),
            opt(b.width),
            r.theta.len(),
            b.status.replace(',', ";")
        );
    }
    out
}

/// `tau,w_tau,width,status`; `w_tau` is the `|θ−π| = Wτ` reference line.
pub fn boundary_csv(rows: &[BoundaryRow], cutoff: f64) -> String {
    let mut out = format!("# dtcsim-boundary format_version={FIT_FORMAT_VERSION}\n# cutoff={cutoff}\ntau,w_tau,width,status\n");
    for b in rows {
        let _ = writeln!(out, "{},{},{},{}", b.tau, b.w_tau, opt(b.width), b.status.replace(',', ";"));
    }
    out
}

// ---------------------------------------------------------------------------
// Envelopes, decay times, echo peaks

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeModel {
    pub epsilon: f64,
    /// `|cos ε|^N` for N = 0..=N_max.
    pub values: Vec<f64>,
}

pub fn cos_n_envelope(epsilon: f64, n_max: usize) -> EnvelopeModel {
    let c = epsilon.cos().abs();
    EnvelopeModel {
        epsilon,
        values: (0..=n_max).map(|n| if n == 0 { 1.0 } else { c.powi(n as i32) }).collect(),
    }
}

impl EnvelopeModel {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# dtcsim-envelope format_version=1\n# epsilon={}\nN,envelope\n", self.epsilon);
        for (n, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{n},{v}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum DecayTime {
    Finite(f64),
    Never,
}

impl DecayTime {
    pub fn value(self) -> f64 {
        match self {
            DecayTime::Finite(v) => v,
            DecayTime::Never => f64::INFINITY,
        }
    }
}

/// First `N` where `|M_z(N)|` drops below `1/e`, linearly interpolated
/// between the bracketing samples. Later recoveries are ignored.
pub fn decay_time(record: &EvolutionRecord) -> DecayTime {
    let thr = (-1.0f64).exp();
    let mut prev: Option<(f64, f64)> = None;
    for s in &record.samples {
        let (n, v) = (s.n as f64, s.mz.abs());
        if v < thr {
            return match prev {
                Some((n0, v0)) => DecayTime::Finite(n0 + (v0 - thr) / (v0 - v) * (n - n0)),
                None => DecayTime::Finite(n),
            };
        }
        prev = Some((n, v));
    }
    DecayTime::Never
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EchoPeak {
    Found { location: f64, amplitude: f64, offset: f64 },
    NoEcho,
}

/// Largest interior local maximum of `|M(N′)|`, refined by the parabola
/// through it and its two neighbours.
pub fn echo_peak(points: &[(f64, f64)], expected: f64) -> EchoPeak {
    if points.len() < 3 {
        return EchoPeak::NoEcho;
    }
    let a: Vec<f64> = points.iter().map(|p| p.1.abs()).collect();
    let mut best: Option<usize> = None;
    for k in 1..points.len() - 1 {
        let local = a[k] >= a[k - 1] && a[k] >= a[k + 1] && (a[k] > a[k - 1] || a[k] > a[k + 1]);
        if local && best.is_none_or(|b| a[k] > a[b]) {
            best = Some(k);
        }
    }
    let Some(k) = best else {
        return EchoPeak::NoEcho;
    };
    let (x0, x1, x2) = (points[k - 1].0, points[k].0, points[k + 1].0);
    let (y0, y1, y2) = (a[k - 1], a[k], a[k + 1]);
    let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
    let ca = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
    let cb = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
    let cc = y1 - ca * x1 * x1 - cb * x1;
    let (location, amplitude) = if ca < 0.0 {
        let xv = -cb / (2.0 * ca);
        (xv, ca * xv * xv + cb * xv + cc)
    } else {
        (x1, y1)
    };
    EchoPeak::Found {
        location,
        amplitude,
        offset: location - expected,
    }
}
