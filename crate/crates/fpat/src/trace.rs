//! Per-iteration reconstruction records and their CSV serialization.

use std::io::{self, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Sim,
    Opt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Sim => "sim",
            Phase::Opt => "opt",
        }
    }
}

/// One reconstruction iteration. Objective and gradient norm are absent for
/// squeeze iterations, the envelope gap for optimization iterations.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub phase: Phase,
    pub iter: usize,
    pub objective: Option<f64>,
    pub grad_norm: Option<f64>,
    pub eps_f: Option<f64>,
    pub envelope_gap: Option<f64>,
    pub wall_ms: f64,
    /// RTE solves spent inside iteration bodies, cumulative.
    pub cum_solves: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ReconTrace {
    pub rows: Vec<TraceRow>,
    /// Solves spent outside iteration bodies (initial evaluation, initial
    /// stepsize trials); kept apart so the per-iteration budget stays 4*S.
    pub setup_solves: usize,
    /// Set when a driver stopped on its iteration cap instead of tolerance.
    pub hit_iteration_cap: bool,
}

impl ReconTrace {
    pub fn last_eps_f(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eps_f)
    }

    pub fn iteration_solves(&self) -> usize {
        self.rows.last().map_or(0, |r| r.cum_solves)
    }

    /// `iter,objective,grad_norm,eps_f,envelope_gap,wall_ms` with an extra
    /// leading `phase` column when requested (hybrid traces).
    pub fn write_csv<W: Write>(&self, mut w: W, with_phase: bool) -> io::Result<()> {
        if with_phase {
            writeln!(w, "phase,iter,objective,grad_norm,eps_f,envelope_gap,wall_ms")?;
        } else {
            writeln!(w, "iter,objective,grad_norm,eps_f,envelope_gap,wall_ms")?;
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            if with_phase {
                write!(w, "{},", r.phase.as_str())?;
            }
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iter,
                opt(r.objective),
                opt(r.grad_norm),
                opt(r.eps_f),
                opt(r.envelope_gap),
                r.wall_ms
            )?;
        }
        Ok(())
    }
}

/// Wall-clock capture that can be disabled for bit-reproducible traces.
#[derive(Debug, Clone, Copy)]
pub struct Stopwatch {
    pub enabled: bool,
}

impl Stopwatch {
    pub fn start(self) -> Option<std::time::Instant> {
        self.enabled.then(std::time::Instant::now)
    }

    pub fn elapsed_ms(self, start: Option<std::time::Instant>) -> f64 {
        match start {
            Some(t) if self.enabled => t.elapsed().as_secs_f64() * 1e3,
            _ => 0.0,
        }
    }
}
