//! Event-driven duty-cycling sampler.
//!
//! The camera runs in one of three modes. Short-term sampling watches for a
//! face and for heart-rate events; a run of frames without a face sends the
//! camera to sleep for a fixed period; high heart-rate variability (pNN50)
//! or a jump in average heart rate switches to long-term recording, which
//! lasts until variability settles (after a minimum recording length) or
//! the face is gone for a run of frames.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    ShortTerm,
    Sleeping,
    LongTerm,
}

impl Mode {
    pub fn is_active(&self) -> bool {
        !matches!(self, Mode::Sleeping)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    SampleFrame,
    Sleep,
    StartLongTerm,
    StopLongTerm,
    NoOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub fps: f64,
    pub no_face_limit_frames: u32,
    pub sleep_duration_s: f64,
    pub pnn50_enter_threshold_pct: f64,
    pub pnn50_exit_threshold_pct: f64,
    pub min_hrv_window_s: f64,
    /// Change in average heart rate (bpm) that triggers long-term sampling.
    pub hr_change_trigger_bpm: f64,
    pub exit_no_face_frames: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            fps: 30.0,
            no_face_limit_frames: 10,
            sleep_duration_s: 1.0,
            pnn50_enter_threshold_pct: 20.0,
            pnn50_exit_threshold_pct: 20.0,
            min_hrv_window_s: 240.0,
            hr_change_trigger_bpm: 5.0,
            exit_no_face_frames: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.fps > 0.0
            && self.no_face_limit_frames > 0
            && self.sleep_duration_s > 0.0
            && self.min_hrv_window_s > 0.0
            && self.hr_change_trigger_bpm > 0.0
            && self.exit_no_face_frames > 0;
        let pct = |v: f64| v > 0.0 && v < 100.0;
        if !positive || !pct(self.pnn50_enter_threshold_pct) || !pct(self.pnn50_exit_threshold_pct)
        {
            return Err(Error::validation(format!(
                "invalid sampler config {self:?}"
            )));
        }
        Ok(())
    }

    /// Wall time of the no-face run that triggers sleep.
    pub fn no_face_limit_s(&self) -> f64 {
        self.no_face_limit_frames as f64 / self.fps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub mode: Mode,
    pub no_face_run: u32,
    pub sleep_until: f64,
    pub recording_elapsed_s: f64,
    pub last_avg_bpm: Option<f64>,
    pub last_timestamp: Option<f64>,
}

impl Default for SamplerState {
    fn default() -> Self {
        Self {
            mode: Mode::ShortTerm,
            no_face_run: 0,
            sleep_until: 0.0,
            recording_elapsed_s: 0.0,
            last_avg_bpm: None,
            last_timestamp: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    pub timestamp: f64,
    pub face_present: bool,
    pub pnn50_pct: Option<f64>,
    pub avg_bpm: Option<f64>,
}

impl FrameEvent {
    pub fn face(timestamp: f64) -> Self {
        Self {
            timestamp,
            face_present: true,
            pnn50_pct: None,
            avg_bpm: None,
        }
    }

    pub fn no_face(timestamp: f64) -> Self {
        Self {
            face_present: false,
            ..Self::face(timestamp)
        }
    }
}

/// Advances the automaton by one event.
pub fn step(
    state: &SamplerState,
    cfg: &SamplerConfig,
    ev: &FrameEvent,
) -> Result<(SamplerState, Action)> {
    if let Some(prev) = state.last_timestamp {
        if ev.timestamp < prev {
            return Err(Error::Protocol(format!(
                "event at {} precedes previous event at {prev}",
                ev.timestamp
            )));
        }
    }
    let mut next = *state;
    next.last_timestamp = Some(ev.timestamp);

    if next.mode == Mode::Sleeping {
        if ev.timestamp < next.sleep_until {
            return Ok((next, Action::Sleep));
        }
        next.mode = Mode::ShortTerm;
        next.no_face_run = 0;
    }

    let action = match next.mode {
        Mode::ShortTerm => short_term(&mut next, cfg, ev),
        Mode::LongTerm => {
            if let Some(prev) = state.last_timestamp {
                next.recording_elapsed_s += ev.timestamp - prev;
            }
            long_term(&mut next, cfg, ev)
        }
        Mode::Sleeping => unreachable!("woken above"),
    };
    Ok((next, action))
}

fn short_term(s: &mut SamplerState, cfg: &SamplerConfig, ev: &FrameEvent) -> Action {
    if !ev.face_present {
        s.no_face_run += 1;
        if s.no_face_run >= cfg.no_face_limit_frames {
            s.mode = Mode::Sleeping;
            s.sleep_until = ev.timestamp + cfg.sleep_duration_s;
            s.no_face_run = 0;
            return Action::Sleep;
        }
        return Action::SampleFrame;
    }
    s.no_face_run = 0;
    let hrv_event = ev
        .pnn50_pct
        .is_some_and(|p| p > cfg.pnn50_enter_threshold_pct);
    let hr_jump = match (ev.avg_bpm, s.last_avg_bpm) {
        (Some(now), Some(before)) => (now - before).abs() > cfg.hr_change_trigger_bpm,
        _ => false,
    };
    if let Some(bpm) = ev.avg_bpm {
        s.last_avg_bpm = Some(bpm);
    }
    if hrv_event || hr_jump {
        s.mode = Mode::LongTerm;
        s.recording_elapsed_s = 0.0;
        return Action::StartLongTerm;
    }
    Action::SampleFrame
}

fn long_term(s: &mut SamplerState, cfg: &SamplerConfig, ev: &FrameEvent) -> Action {
    if let Some(bpm) = ev.avg_bpm {
        s.last_avg_bpm = Some(bpm);
    }
    if !ev.face_present {
        s.no_face_run += 1;
        if s.no_face_run >= cfg.exit_no_face_frames {
            leave_long_term(s);
            return Action::StopLongTerm;
        }
        return Action::SampleFrame;
    }
    s.no_face_run = 0;
    let settled = ev
        .pnn50_pct
        .is_some_and(|p| p <= cfg.pnn50_exit_threshold_pct);
    if settled && s.recording_elapsed_s >= cfg.min_hrv_window_s {
        leave_long_term(s);
        return Action::StopLongTerm;
    }
    Action::SampleFrame
}

fn leave_long_term(s: &mut SamplerState) {
    s.mode = Mode::ShortTerm;
    s.no_face_run = 0;
    s.recording_elapsed_s = 0.0;
}

/// Replays a trace from the initial state, returning the state and action
/// after every event.
pub fn replay(trace: &[FrameEvent], cfg: &SamplerConfig) -> Result<Vec<(SamplerState, Action)>> {
    let mut state = SamplerState::default();
    trace
        .iter()
        .map(|ev| {
            let (next, action) = step(&state, cfg, ev)?;
            state = next;
            Ok((next, action))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    pub p_sample_w: f64,
    pub p_sleep_w: f64,
    pub p_infer_w: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            p_sample_w: 2.2,
            p_sleep_w: 0.2,
            p_infer_w: 1.1,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_sleep_w < self.p_sample_w) || self.p_sleep_w < 0.0 || self.p_infer_w < 0.0 {
            return Err(Error::validation(format!("invalid energy model {self:?}")));
        }
        Ok(())
    }

    /// Power draw while the camera is in `mode`.
    pub fn power_w(&self, mode: Mode) -> f64 {
        if mode.is_active() {
            self.p_sample_w + self.p_infer_w
        } else {
            self.p_sleep_w
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub duty_ratio: f64,
    pub energy_j: f64,
    pub energy_always_on_j: f64,
    pub saving_fraction: f64,
    pub total_s: f64,
    pub n_events: usize,
}

/// Replays the trace through the sampler and integrates power over time.
/// The interval after each event (up to the next event, or one frame period
/// after the last) is charged at the mode the sampler is in after handling
/// that event.
pub fn simulate_energy(
    trace: &[FrameEvent],
    cfg: &SamplerConfig,
    model: &EnergyModel,
) -> Result<EnergyReport> {
    if trace.is_empty() {
        return Err(Error::validation(
            "energy simulation needs a non-empty trace",
        ));
    }
    cfg.validate()?;
    model.validate()?;
    let states = replay(trace, cfg)?;
    let frame = 1.0 / cfg.fps;
    let mut active_s = 0.0;
    let mut total_s = 0.0;
    let mut energy = 0.0;
    for (i, (state, _)) in states.iter().enumerate() {
        let dt = match trace.get(i + 1) {
            Some(next) => next.timestamp - trace[i].timestamp,
            None => frame,
        };
        total_s += dt;
        if state.mode.is_active() {
            active_s += dt;
        }
        energy += model.power_w(state.mode) * dt;
    }
    let always_on = (model.p_sample_w + model.p_infer_w) * total_s;
    Ok(EnergyReport {
        duty_ratio: if total_s > 0.0 {
            active_s / total_s
        } else {
            1.0
        },
        energy_j: energy,
        energy_always_on_j: always_on,
        saving_fraction: if always_on > 0.0 {
            1.0 - energy / always_on
        } else {
            0.0
        },
        total_s,
        n_events: trace.len(),
    })
}

pub const TRACE_HEADER: &str = "timestamp,face_present,pnn50_pct,avg_bpm";

/// Reads a trace CSV (`timestamp,face_present,pnn50_pct,avg_bpm`, empty
/// fields for absent values).
pub fn read_trace(reader: impl BufRead) -> Result<Vec<FrameEvent>> {
    let mut events = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_offset = offset;
        offset += line.len() + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if lineno == 0 {
            if trimmed.replace(' ', "") != TRACE_HEADER {
                return Err(Error::parse(0, format!("expected header `{TRACE_HEADER}`")));
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                line_offset,
                format!("line {}: expected 4 fields", lineno + 1),
            ));
        }
        let bad =
            |what: &str| Error::parse(line_offset, format!("line {}: bad {what}", lineno + 1));
        let timestamp: f64 = fields[0].parse().map_err(|_| bad("timestamp"))?;
        let face_present = match fields[1] {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad("face_present")),
        };
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        events.push(FrameEvent {
            timestamp,
            face_present,
            pnn50_pct: opt(fields[2], "pnn50_pct")?,
            avg_bpm: opt(fields[3], "avg_bpm")?,
        });
    }
    Ok(events)
}

pub fn write_trace(events: &[FrameEvent], mut out: impl Write) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for ev in events {
        writeln!(
            out,
            "{},{},{},{}",
            ev.timestamp,
            u8::from(ev.face_present),
            opt(ev.pnn50_pct),
            opt(ev.avg_bpm)
        )?;
    }
    Ok(())
}

/// A trace at `fps` lasting `duration_s`, with the face alternately present
/// and absent in blocks of `block_s` seconds (present first).
pub fn alternating_presence_trace(duration_s: f64, block_s: f64, fps: f64) -> Vec<FrameEvent> {
    let n = (duration_s * fps).round() as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / fps;
            if ((t / block_s).floor() as u64) % 2 == 0 {
                FrameEvent::face(t)
            } else {
                FrameEvent::no_face(t)
            }
        })
        .collect()
}
