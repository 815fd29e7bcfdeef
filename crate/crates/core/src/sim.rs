//! Simulation with random input delays and Monte-Carlo supply checks.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::{DelayDistribution, PlantModel, SupplyRate};

pub type Signal = Vec<DVector<f64>>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("input has {got} samples, need {need}")]
    InputLength { got: usize, need: usize },
    #[error("input dimension {got}, plant expects {need}")]
    InputDimension { got: usize, need: usize },
    #[error("delay {w} at step {k} outside [{lo}, {hi}]")]
    DelayRange { k: usize, w: usize, lo: usize, hi: usize },
    #[error("delay sequence has {got} entries, need {need}")]
    DelayLength { got: usize, need: usize },
    #[error("initial state has dimension {0}")]
    InitialState(usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn scalar_signal(values: &[f64]) -> Signal {
    values.iter().map(|v| DVector::from_element(1, *v)).collect()
}

/// Delay generator for one run.
#[derive(Debug, Clone, Copy)]
pub enum DelaySource<'a> {
    Random {
        dist: &'a DelayDistribution,
        seed: u64,
        stream: u64,
    },
    /// Given sequence; with `bounds` every entry must lie inside them,
    /// otherwise any `w ≥ 0` is accepted.
    Explicit {
        delays: &'a [usize],
        bounds: Option<(usize, usize)>,
    },
}

/// `count` i.i.d. draws; runs share a master seed and differ in stream.
pub fn draw_delays(dist: &DelayDistribution, seed: u64, stream: u64, count: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let index = WeightedIndex::new(dist.pmf()).expect("validated pmf");
    (0..count).map(|_| dist.w_min() + index.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub horizon: usize,
    /// Delayed channel input, `k = 0..=T`.
    pub u: Signal,
    /// Input applied without delay (zero outside closed-loop runs).
    pub direct: Signal,
    /// States `k = 0..=T+1`.
    pub x: Signal,
    pub y: Signal,
    pub w: Vec<usize>,
    pub seed: Option<u64>,
}

impl Trajectory {
    /// `u(k - w_k)` with zero pre-history.
    pub fn delayed_input(&self, k: usize) -> DVector<f64> {
        let w = self.w[k];
        if w > k {
            DVector::zeros(self.u[0].len())
        } else {
            self.u[k - w].clone()
        }
    }

    /// Largest deviation from the state and output equations.
    pub fn residual(&self, plant: &PlantModel) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..=self.horizon {
            let v = self.delayed_input(k) + &self.direct[k];
            let xn = &plant.a * &self.x[k] + &plant.b * &v;
            let y = &plant.c * &self.x[k] + &plant.d * &v;
            worst = worst.max((xn - &self.x[k + 1]).amax()).max((y - &self.y[k]).amax());
        }
        worst
    }

    pub fn input_energy(&self) -> f64 {
        self.u.iter().map(|v| v.norm_squared()).sum()
    }

    pub fn output_energy(&self) -> f64 {
        self.y.iter().map(|v| v.norm_squared()).sum()
    }

    pub fn output_scalar(&self) -> Vec<f64> {
        self.y.iter().map(|v| v[0]).collect()
    }

    /// CSV with columns `k, u, w, x_1..x_n, y, supply, running_sum`.
    pub fn write_csv<W: Write>(&self, out: W, qsr: Option<&SupplyRate>) -> Result<(), SimError> {
        let mut wtr = csv::Writer::from_writer(out);
        let n = self.x[0].len();
        let m = self.u[0].len();
        let p = self.y[0].len();
        let names = |base: &str, k: usize| -> Vec<String> {
            if k == 1 {
                vec![base.to_string()]
            } else {
                (1..=k).map(|i| format!("{base}_{i}")).collect()
            }
        };
        let mut header = vec!["k".to_string()];
        header.extend(names("u", m));
        header.push("w".into());
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend(names("y", p));
        header.push("supply".into());
        header.push("running_sum".into());
        wtr.write_record(&header)?;
        let ledger = qsr.map(|q| SupplyLedger::new(self, q));
        for k in 0..=self.horizon {
            let mut rec = vec![k.to_string()];
            rec.extend(self.u[k].iter().map(|v| v.to_string()));
            rec.push(self.w[k].to_string());
            rec.extend(self.x[k].iter().map(|v| v.to_string()));
            rec.extend(self.y[k].iter().map(|v| v.to_string()));
            match &ledger {
                Some(l) => {
                    rec.push(l.supply[k].to_string());
                    rec.push(l.running[k].to_string());
                }
                None => {
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_signal(plant: &PlantModel, input: &Signal, horizon: usize) -> Result<(), SimError> {
    if horizon < 1 {
        return Err(SimError::Horizon);
    }
    if input.len() < horizon + 1 {
        return Err(SimError::InputLength { got: input.len(), need: horizon + 1 });
    }
    if let Some(bad) = input.iter().find(|v| v.len() != plant.m()) {
        return Err(SimError::InputDimension { got: bad.len(), need: plant.m() });
    }
    Ok(())
}

fn delay_sequence(source: DelaySource<'_>, horizon: usize) -> Result<(Vec<usize>, Option<u64>), SimError> {
    match source {
        DelaySource::Random { dist, seed, stream } => Ok((draw_delays(dist, seed, stream, horizon + 1), Some(seed))),
        DelaySource::Explicit { delays, bounds } => {
            if delays.len() < horizon + 1 {
                return Err(SimError::DelayLength { got: delays.len(), need: horizon + 1 });
            }
            if let Some((lo, hi)) = bounds {
                if let Some((k, &w)) = delays.iter().enumerate().find(|(_, w)| **w < lo || **w > hi) {
                    return Err(SimError::DelayRange { k, w, lo, hi });
                }
            }
            Ok((delays[..=horizon].to_vec(), None))
        }
    }
}

/// Open-loop run of `x(k+1) = A x(k) + B u(k - w_k)`, `y = C x + D u(k - w_k)`.
pub fn simulate(
    plant: &PlantModel,
    delays: DelaySource<'_>,
    input: &Signal,
    x0: &DVector<f64>,
    horizon: usize,
) -> Result<Trajectory, SimError> {
    check_signal(plant, input, horizon)?;
    if x0.len() != plant.n() {
        return Err(SimError::InitialState(x0.len()));
    }
    let (w, seed) = delay_sequence(delays, horizon)?;
    let m = plant.m();
    let mut x = Vec::with_capacity(horizon + 2);
    let mut y = Vec::with_capacity(horizon + 1);
    x.push(x0.clone());
    for k in 0..=horizon {
        let v = if w[k] > k { DVector::zeros(m) } else { input[k - w[k]].clone() };
        y.push(&plant.c * &x[k] + &plant.d * &v);
        let next = &plant.a * &x[k] + &plant.b * &v;
        x.push(next);
    }
    Ok(Trajectory {
        horizon,
        u: input[..=horizon].to_vec(),
        direct: vec![DVector::zeros(m); horizon + 1],
        x,
        y,
        w,
        seed,
    })
}

fn supply_at(qsr: &SupplyRate, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            total += y[i] * qsr.q[(i, j)] * y[j];
        }
        for j in 0..u.len() {
            total += 2.0 * y[i] * qsr.s[(i, j)] * u[j];
        }
    }
    for i in 0..u.len() {
        for j in 0..u.len() {
            total += u[i] * qsr.r[(i, j)] * u[j];
        }
    }
    total
}

/// Per-step supply `yᵀQy + 2yᵀSu + uᵀRu` and its running sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplyLedger {
    pub supply: Vec<f64>,
    pub running: Vec<f64>,
    pub min_running: f64,
}

impl SupplyLedger {
    pub fn new(traj: &Trajectory, qsr: &SupplyRate) -> Self {
        let supply: Vec<f64> = (0..=traj.horizon).map(|k| supply_at(qsr, &traj.y[k], &traj.u[k])).collect();
        let mut acc = 0.0;
        let running: Vec<f64> = supply
            .iter()
            .map(|s| {
                acc += s;
                acc
            })
            .collect();
        let min_running = running.iter().cloned().fold(f64::INFINITY, f64::min);
        Self { supply, running, min_running }
    }
}

/// The memoryless counterexample: gain `k`, `u = (2, 1, 0, ...)`, delays
/// `(0, 1, 2, 0, ...)`. Returns `(‖u‖², ‖y‖²)`.
pub fn delay_gain_counterexample(k: f64) -> Result<(f64, f64), SimError> {
    let plant = PlantModel::static_gain(DMatrix::from_element(1, 1, k));
    let horizon = 6;
    let mut u = vec![0.0; horizon + 1];
    u[0] = 2.0;
    u[1] = 1.0;
    let mut delays = vec![0; horizon + 1];
    delays[1] = 1;
    delays[2] = 2;
    let traj = simulate(
        &plant,
        DelaySource::Explicit { delays: &delays, bounds: None },
        &scalar_signal(&u),
        &DVector::zeros(0),
        horizon,
    )?;
    Ok((traj.input_energy(), traj.output_energy()))
}

#[derive(Debug, Clone)]
pub struct NamedInput {
    pub name: String,
    pub signal: Signal,
}

/// Unit-power test inputs: white Gaussian noise, sinusoids including one at
/// the peak-gain frequency, and a square wave.
pub fn default_input_bank(plant: &PlantModel, horizon: usize, seed: u64) -> Vec<NamedInput> {
    let m = plant.m();
    let len = horizon + 1;
    let mut bank = Vec::new();
    bank.push(NamedInput { name: "zero".into(), signal: vec![DVector::zeros(m); len] });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let noise: Signal = (0..len).map(|_| DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng))).collect();
    bank.push(NamedInput { name: "gaussian".into(), signal: noise });

    let pi = std::f64::consts::PI;
    let lowest = 2.0 * pi / len as f64;
    let peak = peak_frequency(plant, 512).max(lowest);
    let mut freqs = vec![peak];
    for f in [pi / 64.0, pi / 16.0, pi / 4.0, pi / 2.0, 0.9 * pi] {
        if (f - peak).abs() > 1e-9 {
            freqs.push(f);
        }
    }
    for f in freqs {
        let sig = (0..len).map(|k| DVector::from_element(m, 2f64.sqrt() * (f * k as f64).sin())).collect();
        bank.push(NamedInput { name: format!("sine(w={f:.4})"), signal: sig });
    }
    let square = (0..len).map(|k| DVector::from_element(m, if (k / 16) % 2 == 0 { 1.0 } else { -1.0 })).collect();
    bank.push(NamedInput { name: "square(period=32)".into(), signal: square });
    bank
}

fn peak_frequency(plant: &PlantModel, points: usize) -> f64 {
    let mut best = (0.0, -1.0);
    for k in 0..points {
        let w = std::f64::consts::PI * k as f64 / (points - 1) as f64;
        let g = plant.frequency_response(w);
        let s = g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if s > best.1 {
            best = (w, s);
        }
    }
    best.0
}

#[derive(Debug, Clone)]
pub struct McOptions {
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
    /// `β̂ = -beta_per_step · T`.
    pub beta_per_step: f64,
    /// Normal quantile of the one-sided confidence band.
    pub z: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { horizon: 200, runs: 1000, seed: 1, beta_per_step: 1e-6, z: 2.576 }
    }
}

#[derive(Debug, Clone)]
pub struct InputSummary {
    pub name: String,
    /// Smallest delay-averaged running sum and where it occurs.
    pub min_mean: f64,
    pub at_step: usize,
    /// `mean + z·se` at the most significant violation point.
    pub upper_band: f64,
}

#[derive(Debug, Clone)]
pub struct McReport {
    pub beta_hat: f64,
    pub pass: bool,
    pub worst_input: String,
    pub worst_upper_band: f64,
    pub inputs: Vec<InputSummary>,
}

/// Checks that the delay-averaged running supply stays above `β̂` for every
/// input in the bank, allowing for Monte-Carlo error.
pub fn mc_check_dissipativity(
    plant: &PlantModel,
    dist: &DelayDistribution,
    qsr: &SupplyRate,
    bank: &[NamedInput],
    opts: &McOptions,
) -> Result<McReport, SimError> {
    if opts.runs < 100 {
        return Err(SimError::Invalid(format!("need at least 100 runs, got {}", opts.runs)));
    }
    let horizon = opts.horizon;
    let beta_hat = -opts.beta_per_step * horizon as f64;
    let mut inputs = Vec::new();
    let mut worst = (String::new(), f64::INFINITY);
    for input in bank {
        check_signal(plant, &input.signal, horizon)?;
    }
    let draws: Vec<Vec<usize>> =
        (0..opts.runs).map(|run| draw_delays(dist, opts.seed, run as u64, horizon + 1)).collect();
    let zero = DVector::zeros(plant.m());
    let mut x = DVector::zeros(plant.n());
    let mut xn = DVector::zeros(plant.n());
    let mut y = DVector::zeros(plant.p());
    for input in bank {
        let mut sum = vec![0.0; horizon + 1];
        let mut sumsq = vec![0.0; horizon + 1];
        let u = &input.signal;
        for w in &draws {
            x.fill(0.0);
            let mut acc = 0.0;
            for k in 0..=horizon {
                let v = if w[k] > k { &zero } else { &u[k - w[k]] };
                y.gemv(1.0, &plant.c, &x, 0.0);
                y.gemv(1.0, &plant.d, v, 1.0);
                acc += supply_at(qsr, &y, &u[k]);
                sum[k] += acc;
                sumsq[k] += acc * acc;
                xn.gemv(1.0, &plant.a, &x, 0.0);
                xn.gemv(1.0, &plant.b, v, 1.0);
                std::mem::swap(&mut x, &mut xn);
            }
        }
        let nr = opts.runs as f64;
        let mut summary =
            InputSummary { name: input.name.clone(), min_mean: f64::INFINITY, at_step: 0, upper_band: f64::INFINITY };
        for k in 0..=horizon {
            let mean = sum[k] / nr;
            let var = ((sumsq[k] - nr * mean * mean) / (nr - 1.0)).max(0.0);
            let upper = mean + opts.z * (var / nr).sqrt();
            if mean < summary.min_mean {
                summary.min_mean = mean;
                summary.at_step = k;
            }
            summary.upper_band = summary.upper_band.min(upper);
        }
        if summary.upper_band < worst.1 {
            worst = (input.name.clone(), summary.upper_band);
        }
        inputs.push(summary);
    }
    Ok(McReport { beta_hat, pass: worst.1 >= beta_hat, worst_input: worst.0, worst_upper_band: worst.1, inputs })
}

/// Three-sample pulse of the given amplitude, as in the benchmark disturbance.
pub fn square_pulse(horizon: usize, amplitude: f64, steps: usize) -> Vec<f64> {
    (0..=horizon).map(|k| if k < steps { amplitude } else { 0.0 }).collect()
}

#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub plant: Trajectory,
    pub controller_output: Vec<f64>,
}

/// Plant under `u = -K·(y + d)` sent through the random delay, with the
/// disturbance `d` also added directly at the plant input.
pub fn closed_loop_simulate(
    plant: &PlantModel,
    k_gain: f64,
    dist: &DelayDistribution,
    disturbance: &[f64],
    horizon: usize,
    seed: u64,
) -> Result<ClosedLoop, SimError> {
    if plant.m() != 1 || plant.p() != 1 {
        return Err(SimError::Invalid("closed loop needs a SISO plant".into()));
    }
    if horizon < 1 {
        return Err(SimError::Horizon);
    }
    if disturbance.len() < horizon + 1 {
        return Err(SimError::InputLength { got: disturbance.len(), need: horizon + 1 });
    }
    let w = draw_delays(dist, seed, 0, horizon + 1);
    let mut x = vec![DVector::zeros(plant.n())];
    let mut y = Vec::with_capacity(horizon + 1);
    let mut u: Vec<DVector<f64>> = Vec::with_capacity(horizon + 1);
    let mut yc = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let late = if w[k] > k { 0.0 } else { u[k - w[k]][0] };
        let v = DVector::from_element(1, late + disturbance[k]);
        let yk = &plant.c * &x[k] + &plant.d * &v;
        let c = k_gain * (yk[0] + disturbance[k]);
        yc.push(c);
        u.push(DVector::from_element(1, -c));
        y.push(yk);
        let next = &plant.a * &x[k] + &plant.b * &v;
        x.push(next);
    }
    Ok(ClosedLoop {
        plant: Trajectory { horizon, u, direct: scalar_signal(&disturbance[..=horizon]), x, y, w, seed: Some(seed) },
        controller_output: yc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::benchmark_plant;

    #[test]
    fn zero_input_zero_trajectory() {
        let plant = benchmark_plant();
        let dist = DelayDistribution::uniform(1, 5).unwrap();
        let t = simulate(
            &plant,
            DelaySource::Random { dist: &dist, seed: 3, stream: 0 },
            &vec![DVector::zeros(1); 51],
            &DVector::zeros(2),
            50,
        )
        .unwrap();
        assert!(t.y.iter().all(|v| v[0] == 0.0));
        assert!(t.x.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn counterexample_energies() {
        assert_eq!(delay_gain_counterexample(1.0).unwrap(), (5.0, 12.0));
    }

    #[test]
    fn explicit_delays_checked_against_bounds() {
        let plant = benchmark_plant();
        let r = simulate(
            &plant,
            DelaySource::Explicit { delays: &[1, 2, 7, 1], bounds: Some((1, 5)) },
            &scalar_signal(&[1.0; 4]),
            &DVector::zeros(2),
            3,
        );
        assert!(matches!(r, Err(SimError::DelayRange { k: 2, w: 7, .. })));
    }

    #[test]
    fn open_loop_pulse_response() {
        let plant = benchmark_plant();
        let dist = DelayDistribution::new(1, 5, vec![0.75, 0.1, 0.05, 0.05, 0.05]).unwrap();
        let d = square_pulse(20, 10.0, 3);
        let cl = closed_loop_simulate(&plant, 0.0, &dist, &d, 20, 0).unwrap();
        let y = cl.plant.output_scalar();
        let expected = [0.0, 0.96, 1.93, 2.88, 2.85, 2.77, 2.66, 2.54, 2.41, 2.29, 2.17];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 0.006, "{a} vs {b}");
        }
        assert!(cl.plant.residual(&plant) < 1e-12);
    }

    #[test]
    fn csv_header() {
        let plant = benchmark_plant();
        let t = simulate(
            &plant,
            DelaySource::Explicit { delays: &[1, 1, 1], bounds: None },
            &scalar_signal(&[1.0, 0.0, 0.0]),
            &DVector::zeros(2),
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, Some(&SupplyRate::siso(-1.0, 0.0, 1.0))).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "k,u,w,x_1,x_2,y,supply,running_sum");
        assert_eq!(text.lines().count(), 4);
    }
}
