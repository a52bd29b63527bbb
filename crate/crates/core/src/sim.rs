//! Closed-loop simulation, traces and performance accounting.

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{quad, Mat, Vector};
use crate::model::SystemModel;
use crate::policies::SnapshotPair;

/// Runs stop early once the disturbance is exhausted and the state norm falls
/// below this value.
pub const DECAY_NORM: f64 = 1e-9;

/// Fraction of the horizon used for the tail transmission rate.
pub const TAIL_FRACTION: f64 = 0.25;

/// `Ax + Bu + w`
pub fn step(sys: &SystemModel, x: &Vector, u: &Vector, w: &Vector) -> Vector {
    sys.drift(x, u) + w
}

/// `xᵀQx + uᵀRu`
pub fn stage_cost(sys: &SystemModel, x: &Vector, u: &Vector) -> f64 {
    quad(x, sys.q()) + quad(u, sys.r())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub x: Vector,
    pub u: Vector,
    pub w: Vector,
    pub sigma: bool,
    pub stage_z2: f64,
    pub stage_w2: f64,
    /// Running certificate at `t`, NaN when no γ was supplied.
    pub eta: f64,
}

/// Time-indexed record of one run. `final_x` is the state after the last row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub final_x: Vector,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn z2_total(&self) -> f64 {
        self.rows.iter().map(|r| r.stage_z2).sum()
    }

    pub fn w2_total(&self) -> f64 {
        self.rows.iter().map(|r| r.stage_w2).sum()
    }

    /// `Σ (zᵀz − γ²wᵀw)` over all rows.
    pub fn game_sum(&self, gamma: f64) -> f64 {
        self.rows.iter().map(|r| r.stage_z2 - gamma * gamma * r.stage_w2).sum()
    }

    pub fn transmissions(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.sigma).map(|r| r.t).collect()
    }

    /// State at time `t`, including the state after the last row.
    pub fn state(&self, t: usize) -> Option<&Vector> {
        match t.cmp(&self.rows.len()) {
            std::cmp::Ordering::Less => Some(&self.rows[t].x),
            std::cmp::Ordering::Equal => Some(&self.final_x),
            std::cmp::Ordering::Greater => None,
        }
    }

    /// Largest `‖x_{t+1} − Ax_t − Bu_t − w_t‖ / max(1, ‖x_{t+1}‖)` over the trace.
    pub fn reconstruction_residual(&self, sys: &SystemModel) -> f64 {
        (0..self.rows.len())
            .map(|t| {
                let r = &self.rows[t];
                let next = self.state(t + 1).unwrap();
                (next - step(sys, &r.x, &r.u, &r.w)).norm() / next.norm().max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

/// γ and P̄_γ used for the running certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSpec {
    pub gamma: f64,
    pub pbar: Mat,
}

/// What a disturbance source may look at when choosing `w_t`.
pub struct StepContext<'a, P> {
    pub t: usize,
    pub x: &'a Vector,
    pub u: &'a Vector,
    pub sigma: bool,
    /// The pair has already processed `x_t`. Sources may probe it through
    /// snapshot and restore but must leave it as they found it.
    pub pair: &'a mut P,
    pub trace: &'a Trace,
}

pub trait DisturbanceSource<P: SnapshotPair> {
    fn next(&mut self, sys: &SystemModel, ctx: StepContext<'_, P>) -> Result<Vector>;

    /// True once the source will only emit zeros.
    fn exhausted(&self) -> bool {
        false
    }
}

/// `w_0` (if any) followed by zeros.
#[derive(Debug, Clone)]
pub struct ZeroSource {
    pub w0: Option<Vector>,
}

impl<P: SnapshotPair> DisturbanceSource<P> for ZeroSource {
    fn next(&mut self, sys: &SystemModel, ctx: StepContext<'_, P>) -> Result<Vector> {
        Ok(match (&self.w0, ctx.t) {
            (Some(w0), 0) => w0.clone(),
            _ => Vector::zeros(sys.n()),
        })
    }

    fn exhausted(&self) -> bool {
        true
    }
}

/// Replays a recorded disturbance sequence, then zeros.
#[derive(Debug, Clone)]
pub struct SequenceSource {
    pub ws: Vec<Vector>,
}

impl<P: SnapshotPair> DisturbanceSource<P> for SequenceSource {
    fn next(&mut self, sys: &SystemModel, ctx: StepContext<'_, P>) -> Result<Vector> {
        Ok(self.ws.get(ctx.t).cloned().unwrap_or_else(|| Vector::zeros(sys.n())))
    }
}

/// `w_0` at `t = 0`, then `w = L(Ax + Bu)`, plus `eps · direction` at
/// transmission times when a direction is given.
#[derive(Debug, Clone)]
pub struct ProbingSource {
    pub l: Mat,
    pub w0: Vector,
    pub direction: Option<Vector>,
    pub eps: f64,
}

impl<P: SnapshotPair> DisturbanceSource<P> for ProbingSource {
    fn next(&mut self, sys: &SystemModel, ctx: StepContext<'_, P>) -> Result<Vector> {
        if ctx.t == 0 {
            return Ok(self.w0.clone());
        }
        let mut w = &self.l * sys.drift(ctx.x, ctx.u);
        if let (true, Some(v)) = (ctx.sigma, &self.direction) {
            w += v * self.eps;
        }
        Ok(w)
    }
}

/// Runs the loop for `t = 0 .. horizon` from `x_0 = 0`.
///
/// At each step the pair processes `x_t` and returns `(σ_t, u_t)`, the source
/// picks `w_t`, and the plant advances. The run ends early when the source is
/// exhausted and the state has decayed.
pub fn run_closed_loop<P, D>(
    sys: &SystemModel,
    pair: &mut P,
    source: &mut D,
    horizon: usize,
    eta: Option<&EtaSpec>,
) -> Result<Trace>
where
    P: SnapshotPair,
    D: DisturbanceSource<P> + ?Sized,
{
    if horizon == 0 {
        return Err(Error::HorizonTooSmall);
    }
    if pair.dims() != (sys.n(), sys.m()) {
        return Err(Error::PolicyDimensionMismatch(format!(
            "pair has dimensions {:?}, system has ({}, {})",
            pair.dims(),
            sys.n(),
            sys.m()
        )));
    }
    let mut trace = Trace { rows: Vec::with_capacity(horizon.min(1 << 16)), final_x: Vector::zeros(sys.n()) };
    let mut x = Vector::zeros(sys.n());
    let mut game = 0.0;
    for t in 0..horizon {
        let dec = pair.step(&x)?;
        if dec.u.len() != sys.m() {
            return Err(Error::PolicyDimensionMismatch(format!("control has length {}", dec.u.len())));
        }
        let eta_t = eta.map_or(f64::NAN, |e| game + quad(&x, &e.pbar));
        let ctx = StepContext { t, x: &x, u: &dec.u, sigma: dec.sigma, pair: &mut *pair, trace: &trace };
        let w = source.next(sys, ctx)?;
        if w.len() != sys.n() {
            return Err(Error::PolicyDimensionMismatch(format!("disturbance has length {}", w.len())));
        }
        let stage_z2 = stage_cost(sys, &x, &dec.u);
        let stage_w2 = w.norm_squared();
        if let Some(e) = eta {
            game += stage_z2 - e.gamma * e.gamma * stage_w2;
        }
        let next = step(sys, &x, &dec.u, &w);
        trace.rows.push(TraceRow { t, x, u: dec.u, w, sigma: dec.sigma, stage_z2, stage_w2, eta: eta_t });
        x = next;
        if source.exhausted() && x.norm() < DECAY_NORM {
            break;
        }
    }
    trace.final_x = x;
    Ok(trace)
}

/// `η_t = Σ_{j<t}(z_jᵀz_j − γ²w_jᵀw_j) + x_tᵀP̄x_t`, recomputed from the rows.
pub fn eta(trace: &Trace, t: usize, pbar: &Mat, gamma: f64) -> Result<f64> {
    let x = trace
        .state(t)
        .ok_or_else(|| Error::InvalidArgument(format!("t = {t} beyond trace of length {}", trace.len())))?;
    let sum: f64 = trace.rows[..t].iter().map(|r| r.stage_z2 - gamma * gamma * r.stage_w2).sum();
    Ok(sum + quad(x, pbar))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub steps: usize,
    pub z2_total: f64,
    pub w2_total: f64,
    pub ratio: f64,
    /// Mean of σ over all recorded steps.
    pub rate: f64,
    /// Mean of σ over the last quarter of the recorded steps.
    pub tail_rate: f64,
    pub hbar_avg: f64,
    pub transmissions: usize,
    /// `(t, η_t)` at every transmission time.
    pub eta_at: Vec<(usize, f64)>,
}

pub fn tail_rate(trace: &Trace) -> f64 {
    let len = trace.len();
    let tail = ((len as f64 * TAIL_FRACTION).ceil() as usize).max(1).min(len);
    let rows = &trace.rows[len - tail..];
    rows.iter().filter(|r| r.sigma).count() as f64 / rows.len().max(1) as f64
}

pub fn trace_metrics(trace: &Trace) -> Result<Metrics> {
    if trace.is_empty() {
        return Err(Error::HorizonTooSmall);
    }
    let z2 = trace.z2_total();
    let w2 = trace.w2_total();
    if w2 == 0.0 {
        return Err(Error::DivisionByZero);
    }
    let transmissions = trace.transmissions();
    let rate = transmissions.len() as f64 / trace.len() as f64;
    Ok(Metrics {
        steps: trace.len(),
        z2_total: z2,
        w2_total: w2,
        ratio: z2 / w2,
        rate,
        tail_rate: tail_rate(trace),
        hbar_avg: 1.0 / rate,
        transmissions: transmissions.len(),
        eta_at: transmissions.iter().map(|&t| (t, trace.rows[t].eta)).collect(),
    })
}

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("trace csv: {e}"))
}

/// Writes `t,x_0..,u_0..,w_0..,sigma,stage_z2,stage_w2,eta`.
pub fn write_trace_csv<W: Write>(trace: &Trace, out: W) -> Result<()> {
    let (n, m) = trace.rows.first().map_or((trace.final_x.len(), 0), |r| (r.x.len(), r.u.len()));
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..m).map(|i| format!("u_{i}")));
    header.extend((0..n).map(|i| format!("w_{i}")));
    header.extend(["sigma", "stage_z2", "stage_w2", "eta"].map(String::from));
    wr.write_record(&header).map_err(csv_err)?;
    for r in &trace.rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.x.iter().chain(r.u.iter()).chain(r.w.iter()).map(|v| fmt_f64(*v)));
        rec.push(u8::from(r.sigma).to_string());
        rec.extend([r.stage_z2, r.stage_w2, r.eta].map(fmt_f64));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::InvalidArgument(format!("trace csv: {e}")))?;
    Ok(())
}

/// Reads a trace written by [`write_trace_csv`]. The state after the last row
/// is rebuilt from the plant equation.
pub fn read_trace_csv<R: Read>(sys: &SystemModel, input: R) -> Result<Trace> {
    let (n, m) = (sys.n(), sys.m());
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers().map_err(csv_err)?.clone();
    let width = 1 + 2 * n + m + 4;
    if headers.len() != width {
        return Err(Error::Dimension(format!("trace csv has {} columns, expected {width}", headers.len())));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|e| Error::InvalidArgument(format!("trace csv: {e}")))
        };
        let vec = |start: usize, len: usize| -> Result<Vector> {
            Ok(Vector::from_vec((start..start + len).map(num).collect::<Result<_>>()?))
        };
        let t = rec[0].trim().parse::<usize>().map_err(|e| Error::InvalidArgument(format!("trace csv: {e}")))?;
        let tail = 1 + 2 * n + m;
        rows.push(TraceRow {
            t,
            x: vec(1, n)?,
            u: vec(1 + n, m)?,
            w: vec(1 + n + m, n)?,
            sigma: num(tail)? != 0.0,
            stage_z2: num(tail + 1)?,
            stage_w2: num(tail + 2)?,
            eta: num(tail + 3)?,
        });
    }
    let final_x = rows.last().map_or_else(|| Vector::zeros(n), |r| step(sys, &r.x, &r.u, &r.w));
    Ok(Trace { rows, final_x })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_cancels_exactly() {
        let sys = SystemModel::scalar(1.0, 1.0, 1.0, 1.0).unwrap();
        let x = Vector::from_element(1, 1.0);
        let u = Vector::from_element(1, -0.9495);
        assert!((step(&sys, &x, &u, &Vector::from_element(1, 0.4366))[0] - 0.4871).abs() < 1e-12);
        let w = -sys.drift(&x, &u);
        assert_eq!(step(&sys, &x, &u, &w)[0], 0.0);
    }

    #[test]
    fn stage_cost_scalar() {
        let sys = SystemModel::scalar(1.0, 1.0, 1.0, 1.0).unwrap();
        let c = stage_cost(&sys, &Vector::from_element(1, 2.0), &Vector::from_element(1, 1.0));
        assert_eq!(c, 5.0);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
