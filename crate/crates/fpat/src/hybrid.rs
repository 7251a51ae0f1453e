//! Two-phase reconstruction: a cheap squeeze phase narrows the coefficient
//! envelopes, then projected BB descent refines from the lower envelope.

use thiserror::Error;

use crate::geometry::ScalarField;
use crate::opt::{run_opt, OptContext, OptError, OptOptions, OptResult};
use crate::sim::{run_sim, SimContext, SimError, SimOptions, SimResult};
use crate::trace::ReconTrace;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("invalid hybrid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Opt(#[from] OptError),
}

/// Which squeeze-phase iterate seeds the descent phase.
///
/// With exact data the lower envelope is the natural start: it converges to
/// the answer from below. When the data carry noise or a model mismatch the
/// envelopes bracket a biased pair and the midpoint is the better point
/// estimate, so it is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Handoff {
    Lower,
    #[default]
    Midpoint,
}

impl Handoff {
    pub fn as_str(self) -> &'static str {
        match self {
            Handoff::Lower => "lower",
            Handoff::Midpoint => "midpoint",
        }
    }
}

impl std::str::FromStr for Handoff {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lower" => Ok(Handoff::Lower),
            "midpoint" => Ok(Handoff::Midpoint),
            other => Err(format!("unknown handoff `{other}` (lower|midpoint)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HybridOptions {
    pub sim: SimOptions,
    pub opt: OptOptions,
    /// Cap on the total iteration count across both phases; phase 2 runs
    /// with whatever the squeeze phase left over.
    pub total_budget: usize,
    pub handoff: Handoff,
}

impl HybridOptions {
    pub fn validate(&self) -> Result<(), HybridError> {
        if !(self.sim.tol > 0.0) {
            return Err(HybridError::BadConfig("squeeze tolerance must be > 0".into()));
        }
        if !(self.opt.tol_objective > 0.0) || !(self.opt.tol_gradient > 0.0) {
            return Err(HybridError::BadConfig(
                "optimization tolerances must be > 0".into(),
            ));
        }
        if self.total_budget == 0 {
            return Err(HybridError::BadConfig("total budget must be > 0".into()));
        }
        if self.sim.max_iter + self.opt.max_iter < self.total_budget {
            return Err(HybridError::BadConfig(
                "phase caps cannot cover the total budget".into(),
            ));
        }
        Ok(())
    }
}

pub struct HybridResult {
    pub estimate: ScalarField,
    pub objective: f64,
    /// The squeeze phase output that seeded the descent phase.
    pub handoff: ScalarField,
    pub trace: ReconTrace,
    pub sim_iterations: usize,
    pub opt_iterations: usize,
    pub solver_degraded: bool,
}

/// Runs the squeeze phase from the `[c1, c2]` envelopes, hands the chosen
/// squeeze iterate to the descent phase unchanged, and concatenates both
/// traces with a continuing solve counter.
pub fn run_hybrid(ctx: &OptContext, opts: &HybridOptions) -> Result<HybridResult, HybridError> {
    opts.validate()?;
    let sim_ctx = SimContext {
        grid: ctx.grid,
        angles: ctx.angles,
        kernel: ctx.kernel,
        coeffs: ctx.coeffs,
        data: ctx.data,
        truth: ctx.truth,
    };
    let sim: SimResult = run_sim(&sim_ctx, &opts.sim)?;
    let sim_iterations = sim.trace.rows.len();
    let handoff = match opts.handoff {
        Handoff::Lower => sim.estimate.clone(),
        Handoff::Midpoint => sim.midpoint.clone(),
    };

    let mut opt_opts = opts.opt;
    opt_opts.max_iter = opts
        .opt
        .max_iter
        .min(opts.total_budget.saturating_sub(sim_iterations));
    let opt: OptResult = run_opt(&handoff, ctx, &opt_opts)?;
    let opt_iterations = opt.trace.rows.len();

    let mut trace = ReconTrace {
        rows: sim.trace.rows,
        setup_solves: sim.trace.setup_solves + opt.trace.setup_solves,
        hit_iteration_cap: opt.trace.hit_iteration_cap,
    };
    let base = trace.rows.last().map_or(0, |r| r.cum_solves);
    for mut row in opt.trace.rows {
        row.cum_solves += base;
        trace.rows.push(row);
    }
    Ok(HybridResult {
        estimate: opt.estimate,
        objective: opt.objective,
        handoff,
        trace,
        sim_iterations,
        opt_iterations,
        solver_degraded: sim.state.solver_degraded || opt.solver_degraded,
    })
}
