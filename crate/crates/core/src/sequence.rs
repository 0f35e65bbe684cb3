//! Pulse programs as flat event lists.
//!
//! A pulse with `duration == 0` is an instantaneous rotation; any other
//! pulse is applied together with the internal Hamiltonian. Repeat blocks
//! are expanded at construction time.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::TransversePhase;

pub const PROGRAM_FORMAT_VERSION: u32 = 1;
const PROGRAM_HEADER: &str = "# dtcsim-program format_version=1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseMode {
    Delta,
    Finite,
}

impl PulseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PulseMode::Delta => "delta",
            PulseMode::Finite => "finite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(PulseMode::Delta),
            "finite" => Ok(PulseMode::Finite),
            other => Err(Error::InvalidInput(format!("unknown pulse mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pulse {
    /// rf phase in the transverse plane, rad.
    pub phase: f64,
    /// Nominal rotation angle, rad.
    pub angle: f64,
    /// Seconds; zero for an instantaneous pulse.
    pub duration: f64,
    /// ω₁ in rad/s (ignored for instantaneous pulses).
    pub amplitude: f64,
    pub species: String,
}

impl Pulse {
    pub fn is_delta(&self) -> bool {
        self.duration == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleSegment {
    Forward,
    Echo,
}

impl SampleSegment {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleSegment::Forward => "forward",
            SampleSegment::Echo => "echo",
        }
    }
}

/// Records `M_z` here. A `readout` pulse is applied virtually before the
/// measurement without changing the evolving state.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub segment: SampleSegment,
    pub index: usize,
    pub readout: Option<Pulse>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PulseEvent {
    Delay { duration: f64 },
    Pulse(Pulse),
    Sample(Sample),
}

/// rf settings shared by all pulses of a program.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseParams {
    /// ω₁, rad/s.
    pub amplitude: f64,
    pub species: String,
}

impl PulseParams {
    pub fn new(amplitude: f64, species: impl Into<String>) -> Self {
        PulseParams {
            amplitude,
            species: species.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::InvalidInput(format!(
                "rf amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }

    pub fn pulse(&self, phase: f64, angle: f64, mode: PulseMode) -> Pulse {
        Pulse {
            phase,
            angle,
            duration: match mode {
                PulseMode::Delta => 0.0,
                PulseMode::Finite => angle / self.amplitude,
            },
            amplitude: self.amplitude,
            species: self.species.clone(),
        }
    }

    /// A pulse that always has finite duration `duration`.
    pub fn finite_for(&self, phase: f64, duration: f64) -> Pulse {
        Pulse {
            phase,
            angle: self.amplitude * duration,
            duration,
            amplitude: self.amplitude,
            species: self.species.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PulseProgram {
    pub events: Vec<PulseEvent>,
    /// `T = τ + t_p`, s. In delta mode `t_p` is the nominal duration θ/ω₁.
    pub floquet_period: f64,
    pub mode: PulseMode,
    /// Family and parameters, serialized alongside the events.
    pub meta: BTreeMap<String, String>,
}

impl PulseProgram {
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.events.iter().filter_map(|e| match e {
            PulseEvent::Sample(s) => Some(s),
            _ => None,
        })
    }

    /// Sum of all delay and pulse durations, s.
    pub fn total_duration(&self) -> f64 {
        self.events
            .iter()
            .map(|e| match e {
                PulseEvent::Delay { duration } => *duration,
                PulseEvent::Pulse(p) => p.duration,
                PulseEvent::Sample(_) => 0.0,
            })
            .sum()
    }

    pub fn pulses(&self) -> impl Iterator<Item = &Pulse> {
        self.events.iter().filter_map(|e| match e {
            PulseEvent::Pulse(p) => Some(p),
            PulseEvent::Sample(s) => s.readout.as_ref(),
            _ => None,
        })
    }
}

fn check_duration(name: &str, t: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidInput(format!("{name} must be a non-negative duration, got {t}")));
    }
    Ok(())
}

fn check_angle(theta: f64) -> Result<()> {
    if !theta.is_finite() || theta < 0.0 {
        return Err(Error::InvalidInput(format!("pulse angle must be non-negative, got {theta}")));
    }
    Ok(())
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn push_cycles(events: &mut Vec<PulseEvent>, tau: f64, pulse: &Pulse, n: usize) {
    for k in 1..=n {
        events.push(PulseEvent::Delay { duration: tau });
        events.push(PulseEvent::Pulse(pulse.clone()));
        events.push(PulseEvent::Sample(Sample {
            segment: SampleSegment::Forward,
            index: k,
            readout: None,
        }));
    }
}

/// `{τ − X_θ}^N` with a sample after every pulse.
pub fn dtc_program(tau: f64, theta: f64, n: usize, mode: PulseMode, params: &PulseParams) -> Result<PulseProgram> {
    check_duration("tau", tau)?;
    check_angle(theta)?;
    params.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("cycle count N must be at least 1".into()));
    }
    let pulse = params.pulse(0.0, theta, mode);
    let mut events = Vec::with_capacity(3 * n);
    push_cycles(&mut events, tau, &pulse, n);
    let period = tau + theta / params.amplitude;
    if !(period > 0.0) {
        return Err(Error::InvalidInput("Floquet period must be positive".into()));
    }
    let meta = BTreeMap::from([
        ("family".to_string(), "dtc".to_string()),
        ("tau".to_string(), fmt_f(tau)),
        ("theta".to_string(), fmt_f(theta)),
        ("n".to_string(), n.to_string()),
    ]);
    Ok(PulseProgram {
        events,
        floquet_period: period,
        mode,
        meta,
    })
}

/// `{τ − X_θ}^N − (X_{π/2} − {X̄_θ − Y_Φ}^{N′} − X̄_{π/2})` with Φ = ω₁·2τ.
///
/// The forward part is sampled after every cycle. Echo samples (N′ = 0..=N′)
/// carry a virtual X̄_{π/2} readout. The Y_Φ spin-lock burst always lasts 2τ.
pub fn echo_program(
    tau: f64,
    theta: f64,
    n: usize,
    n_echo: usize,
    mode: PulseMode,
    params: &PulseParams,
) -> Result<PulseProgram> {
    check_duration("tau", tau)?;
    check_angle(theta)?;
    params.validate()?;
    if tau == 0.0 {
        return Err(Error::InvalidInput("echo programs need tau > 0 for the Y_Φ block".into()));
    }
    let forward = params.pulse(0.0, theta, mode);
    let back = params.pulse(PI, theta, mode);
    let open = params.pulse(0.0, 0.5 * PI, mode);
    let close = params.pulse(PI, 0.5 * PI, mode);
    let lock = params.finite_for(0.5 * PI, 2.0 * tau);

    let mut events = Vec::with_capacity(3 * n + 3 * n_echo + 4);
    push_cycles(&mut events, tau, &forward, n);
    events.push(PulseEvent::Pulse(open));
    let echo_sample = |k| {
        PulseEvent::Sample(Sample {
            segment: SampleSegment::Echo,
            index: k,
            readout: Some(close.clone()),
        })
    };
    events.push(echo_sample(0));
    for k in 1..=n_echo {
        events.push(PulseEvent::Pulse(back.clone()));
        events.push(PulseEvent::Pulse(lock.clone()));
        events.push(echo_sample(k));
    }
    events.push(PulseEvent::Pulse(close.clone()));
    let meta = BTreeMap::from([
        ("family".to_string(), "echo".to_string()),
        ("tau".to_string(), fmt_f(tau)),
        ("theta".to_string(), fmt_f(theta)),
        ("n".to_string(), n.to_string()),
        ("n_echo".to_string(), n_echo.to_string()),
        ("lock_angle".to_string(), fmt_f(lock.angle)),
    ]);
    Ok(PulseProgram {
        events,
        floquet_period: tau + theta / params.amplitude,
        mode,
        meta,
    })
}

/// `{τ − α_π − τ − β_π}^N`, sampled after each block.
pub fn phase_pair_program(
    tau: f64,
    alpha: TransversePhase,
    beta: TransversePhase,
    n: usize,
    mode: PulseMode,
    params: &PulseParams,
) -> Result<PulseProgram> {
    check_duration("tau", tau)?;
    params.validate()?;
    for p in [alpha, beta] {
        if !matches!(p, TransversePhase::X | TransversePhase::Y) {
            return Err(Error::InvalidInput(format!(
                "phase-pair sequences take X or Y, got {}",
                p.label()
            )));
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("block count N must be at least 1".into()));
    }
    let a = params.pulse(alpha.radians(), PI, mode);
    let b = params.pulse(beta.radians(), PI, mode);
    let mut events = Vec::with_capacity(5 * n);
    for k in 1..=n {
        events.push(PulseEvent::Delay { duration: tau });
        events.push(PulseEvent::Pulse(a.clone()));
        events.push(PulseEvent::Delay { duration: tau });
        events.push(PulseEvent::Pulse(b.clone()));
        events.push(PulseEvent::Sample(Sample {
            segment: SampleSegment::Forward,
            index: k,
            readout: None,
        }));
    }
    let meta = BTreeMap::from([
        ("family".to_string(), "phase_pair".to_string()),
        ("tau".to_string(), fmt_f(tau)),
        ("alpha".to_string(), alpha.label().to_string()),
        ("beta".to_string(), beta.label().to_string()),
        ("n".to_string(), n.to_string()),
    ]);
    Ok(PulseProgram {
        events,
        floquet_period: tau + PI / params.amplitude,
        mode,
        meta,
    })
}

// ---------------------------------------------------------------------------
// Text form: one event per line, SI units.

fn write_pulse(out: &mut String, p: &Pulse) {
    let _ = write!(
        out,
        "phase={} angle={} duration={} amplitude={} species={}",
        p.phase, p.angle, p.duration, p.amplitude, p.species
    );
}

impl PulseProgram {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(PROGRAM_HEADER);
        out.push('\n');
        let _ = write!(out, "# mode={} floquet_period={}", self.mode.as_str(), self.floquet_period);
        for (k, v) in &self.meta {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
        for e in &self.events {
            match e {
                PulseEvent::Delay { duration } => {
                    let _ = writeln!(out, "delay duration={duration}");
                }
                PulseEvent::Pulse(p) => {
                    out.push_str("pulse ");
                    write_pulse(&mut out, p);
                    out.push('\n');
                }
                PulseEvent::Sample(s) => {
                    let _ = write!(out, "sample segment={} index={}", s.segment.as_str(), s.index);
                    if let Some(r) = &s.readout {
                        out.push_str(" readout ");
                        write_pulse(&mut out, r);
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == PROGRAM_HEADER => {}
            _ => return Err(Error::parse(1, format!("expected header `{PROGRAM_HEADER}`"))),
        }
        let (meta_no, meta_line) = lines.next().ok_or_else(|| Error::parse(2, "missing metadata line"))?;
        let meta_body = meta_line
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(meta_no + 1, "metadata line must start with `#`"))?;
        let mut meta = key_values(meta_body.split_whitespace(), meta_no + 1)?;
        let mode = PulseMode::parse(&take(&mut meta, "mode", meta_no + 1)?)
            .map_err(|e| Error::parse(meta_no + 1, e.to_string()))?;
        let floquet_period = num(&take(&mut meta, "floquet_period", meta_no + 1)?, meta_no + 1)?;
        if !(floquet_period.is_finite() && floquet_period > 0.0) {
            return Err(Error::parse(meta_no + 1, "floquet_period must be positive"));
        }

        let mut events = Vec::new();
        for (no, line) in lines {
            let line_no = no + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.split_whitespace();
            let kind = words.next().expect("nonempty line");
            match kind {
                "delay" => {
                    let mut kv = key_values(words, line_no)?;
                    let duration = non_negative(num(&take(&mut kv, "duration", line_no)?, line_no)?, line_no)?;
                    reject_extra(&kv, line_no)?;
                    events.push(PulseEvent::Delay { duration });
                }
                "pulse" => {
                    let mut kv = key_values(words, line_no)?;
                    let p = parse_pulse(&mut kv, line_no)?;
                    reject_extra(&kv, line_no)?;
                    events.push(PulseEvent::Pulse(p));
                }
                "sample" => {
                    let rest: Vec<&str> = words.collect();
                    let split = rest.iter().position(|w| *w == "readout");
                    let (head, tail) = match split {
                        Some(k) => (&rest[..k], Some(&rest[k + 1..])),
                        None => (&rest[..], None),
                    };
                    let mut kv = key_values(head.iter().copied(), line_no)?;
                    let segment = match take(&mut kv, "segment", line_no)?.as_str() {
                        "forward" => SampleSegment::Forward,
                        "echo" => SampleSegment::Echo,
                        other => return Err(Error::parse(line_no, format!("unknown segment `{other}`"))),
                    };
                    let index = take(&mut kv, "index", line_no)?
                        .parse::<usize>()
                        .map_err(|_| Error::parse(line_no, "index must be a non-negative integer"))?;
                    reject_extra(&kv, line_no)?;
                    let readout = match tail {
                        Some(t) => {
                            let mut kv = key_values(t.iter().copied(), line_no)?;
                            let p = parse_pulse(&mut kv, line_no)?;
                            reject_extra(&kv, line_no)?;
                            Some(p)
                        }
                        None => None,
                    };
                    events.push(PulseEvent::Sample(Sample { segment, index, readout }));
                }
                other => return Err(Error::parse(line_no, format!("unknown event kind `{other}`"))),
            }
        }
        Ok(PulseProgram {
            events,
            floquet_period,
            mode,
            meta,
        })
    }
}

fn key_values<'a>(words: impl Iterator<Item = &'a str>, line: usize) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| Error::parse(line, format!("expected key=value, found `{w}`")))?;
        if k.is_empty() || v.is_empty() {
            return Err(Error::parse(line, format!("empty key or value in `{w}`")));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::parse(line, format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

fn take(kv: &mut BTreeMap<String, String>, key: &str, line: usize) -> Result<String> {
    kv.remove(key)
        .ok_or_else(|| Error::parse(line, format!("missing `{key}`")))
}

fn reject_extra(kv: &BTreeMap<String, String>, line: usize) -> Result<()> {
    match kv.keys().next() {
        Some(k) => Err(Error::parse(line, format!("unexpected key `{k}`"))),
        None => Ok(()),
    }
}

fn num(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::parse(line, format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("`{s}` is not finite")));
    }
    Ok(v)
}

fn non_negative(v: f64, line: usize) -> Result<f64> {
    if v < 0.0 {
        return Err(Error::parse(line, "durations must be non-negative"));
    }
    Ok(v)
}

fn parse_pulse(kv: &mut BTreeMap<String, String>, line: usize) -> Result<Pulse> {
    Ok(Pulse {
        phase: num(&take(kv, "phase", line)?, line)?,
        angle: num(&take(kv, "angle", line)?, line)?,
        duration: non_negative(num(&take(kv, "duration", line)?, line)?, line)?,
        amplitude: num(&take(kv, "amplitude", line)?, line)?,
        species: take(kv, "species", line)?,
    })
}
