//! Recorded motor logs and offline joint estimation.
//!
//! Motor log CSV: `t,theta0..,theta_dot0..` (the rate columns are optional).
//! Estimate CSV: `t,qhat0..,qhatdot0..`.

use std::io::{Read, Write};

use crate::estimator::{ekf_init, ekf_step, NoiseConfig};
use crate::handmodel::HandModel;
use crate::runtime::{MotorState, RuntimeError};
use crate::tendon::{calibrate, motor_angles_to_tendon_lengths, Calibration, LengthRateFilter, TendonLengths};
use crate::trajectory::CsvLogError;

/// Smoothing of finite-difference tendon rates when a log has no motor
/// velocities.
pub const RATE_FILTER_ALPHA: f64 = 0.5;

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

fn count_indexed(headers: &csv::StringRecord, prefix: &str) -> usize {
    (0..).take_while(|i| headers.iter().any(|h| h == format!("{prefix}{i}"))).count()
}

/// Reads every record of a numeric CSV as `(headers, rows)`.
fn read_numeric<R: Read>(input: R) -> Result<(csv::StringRecord, Vec<Vec<f64>>), CsvLogError> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.trim().parse::<f64>().map_err(|_| CsvLogError::BadValue {
                    row: i,
                    column: headers.get(c).unwrap_or("?").to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((headers, rows))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, CsvLogError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CsvLogError::MissingColumn(name.to_string()))
}

fn columns(headers: &csv::StringRecord, prefix: &str, n: usize) -> Result<Vec<usize>, CsvLogError> {
    indexed(prefix, n).map(|name| column(headers, &name)).collect()
}

pub fn motor_log_header(n_motors: usize, with_rates: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(indexed("theta", n_motors));
    if with_rates {
        h.extend(indexed("theta_dot", n_motors));
    }
    h
}

/// Writes a motor log; rate columns are included when every row has them.
pub fn write_motor_log<W: Write>(out: W, rows: &[MotorState]) -> Result<(), CsvLogError> {
    let n = rows.first().map_or(0, |r| r.theta.len());
    let with_rates = !rows.is_empty() && rows.iter().all(|r| r.theta_dot.len() == n);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(motor_log_header(n, with_rates))?;
    for r in rows {
        let mut rec = vec![r.timestamp.to_string()];
        rec.extend(r.theta.iter().map(f64::to_string));
        if with_rates {
            rec.extend(r.theta_dot.iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a motor log. Rows of a log without rate columns get an empty
/// `theta_dot`.
pub fn read_motor_log<R: Read>(input: R) -> Result<Vec<MotorState>, CsvLogError> {
    let (headers, rows) = read_numeric(input)?;
    let t = column(&headers, "t")?;
    let n = count_indexed(&headers, "theta");
    if n == 0 {
        return Err(CsvLogError::MissingColumn("theta0".into()));
    }
    let th = columns(&headers, "theta", n)?;
    let rates = if count_indexed(&headers, "theta_dot") > 0 {
        Some(columns(&headers, "theta_dot", n)?)
    } else {
        None
    };
    Ok(rows
        .iter()
        .map(|r| MotorState {
            timestamp: r[t],
            theta: th.iter().map(|&c| r[c]).collect(),
            theta_dot: rates.as_ref().map_or_else(Vec::new, |cols| cols.iter().map(|&c| r[c]).collect()),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
}

pub fn estimate_header(n_joints: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(indexed("qhat", n_joints));
    h.extend(indexed("qhatdot", n_joints));
    h
}

pub fn write_estimate_csv<W: Write>(out: W, rows: &[EstimateRow]) -> Result<(), CsvLogError> {
    let n = rows.first().map_or(0, |r| r.q.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(estimate_header(n))?;
    for r in rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.q.iter().chain(&r.qdot).map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_estimate_csv<R: Read>(input: R) -> Result<Vec<EstimateRow>, CsvLogError> {
    let (headers, rows) = read_numeric(input)?;
    let t = column(&headers, "t")?;
    let n = count_indexed(&headers, "qhat");
    let qc = columns(&headers, "qhat", n)?;
    let dc = columns(&headers, "qhatdot", n)?;
    Ok(rows
        .iter()
        .map(|r| EstimateRow {
            t: r[t],
            q: qc.iter().map(|&c| r[c]).collect(),
            qdot: dc.iter().map(|&c| r[c]).collect(),
        })
        .collect())
}

/// Filters a recorded log into joint estimates. The first sample calibrates
/// the motors with the hand assumed at `q_cal`; `dt` is used until two
/// timestamps are known.
pub fn estimate_motor_log(
    model: &HandModel,
    log: &[MotorState],
    q_cal: &[f64],
    noise: &NoiseConfig,
    p0: f64,
    dt: f64,
) -> Result<(Calibration, Vec<EstimateRow>), RuntimeError> {
    let first = log
        .first()
        .ok_or_else(|| RuntimeError::Config("motor log has no samples".into()))?;
    let cal = calibrate(model, &first.theta, q_cal)?;
    let mut ekf = ekf_init(model, q_cal, p0, noise, dt)?;
    let mut rates = LengthRateFilter::new(model.n_motors(), RATE_FILTER_ALPHA);
    let mut prev_t = first.timestamp;
    let mut out = Vec::with_capacity(log.len());
    for (i, ms) in log.iter().enumerate() {
        let step = ms.timestamp - prev_t;
        if i > 0 && step > 0.0 {
            ekf.dt = step;
        }
        prev_t = ms.timestamp;
        let lengths = if ms.theta_dot.len() == model.n_motors() {
            motor_angles_to_tendon_lengths(model, &cal, &ms.theta, Some(&ms.theta_dot))?
        } else {
            let l = motor_angles_to_tendon_lengths(model, &cal, &ms.theta, None)?.l;
            let ldot = rates.update(&l, ekf.dt).to_vec();
            TendonLengths { l, ldot: Some(ldot) }
        };
        ekf = ekf_step(&ekf, &lengths, model)?;
        out.push(EstimateRow {
            t: ms.timestamp,
            q: ekf.q().to_vec(),
            qdot: ekf.qdot().to_vec(),
        });
    }
    Ok((cal, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handmodel::builtin_proto0;
    use crate::runtime::{LoopbackDriver, MotorDriver};

    fn recorded(model: &HandModel, q: &[f64], n: usize) -> Vec<MotorState> {
        let mut d = LoopbackDriver::at_pose(model, &[0.0; 11], 0.2, 0.05).unwrap();
        let first = d.read_motor_state().unwrap();
        let cal = calibrate(model, &first.theta, &[0.0; 11]).unwrap();
        d.write_motor_targets(&crate::tendon::joints_to_motor_angles(model, &cal, q).unwrap())
            .unwrap();
        let mut log = vec![first];
        log.extend((1..n).map(|_| d.read_motor_state().unwrap()));
        log
    }

    #[test]
    fn motor_log_round_trip() {
        let m = builtin_proto0();
        let log = recorded(&m, &[0.3; 11], 5);
        let mut buf = Vec::new();
        write_motor_log(&mut buf, &log).unwrap();
        assert_eq!(read_motor_log(buf.as_slice()).unwrap(), log);
    }

    #[test]
    fn log_without_rates() {
        let text = "t,theta0,theta1\n0,1.5,2\n0.05,1.25,2\n";
        let log = read_motor_log(text.as_bytes()).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log[1].theta_dot.is_empty());
        assert_eq!(log[1].theta, vec![1.25, 2.0]);
    }

    #[test]
    fn estimates_settle_on_commanded_pose() {
        let m = builtin_proto0();
        let q = [0.3; 11];
        let log = recorded(&m, &q, 120);
        let (_, est) = estimate_motor_log(&m, &log, &[0.0; 11], &NoiseConfig::default(), 1e-2, 0.05).unwrap();
        let last = est.last().unwrap();
        for (j, (est, want)) in last.q.iter().zip(&q).enumerate() {
            assert!((est - want).abs() < 1e-3, "joint {j}: {est}");
        }
        let mut no_rates = log.clone();
        no_rates.iter_mut().for_each(|r| r.theta_dot.clear());
        let (_, est2) = estimate_motor_log(&m, &no_rates, &[0.0; 11], &NoiseConfig::default(), 1e-2, 0.05).unwrap();
        assert!((est2.last().unwrap().q[0] - 0.3).abs() < 1e-3);

        let mut buf = Vec::new();
        write_estimate_csv(&mut buf, &est).unwrap();
        assert_eq!(read_estimate_csv(buf.as_slice()).unwrap(), est);
    }

    #[test]
    fn empty_log_rejected() {
        let m = builtin_proto0();
        assert!(estimate_motor_log(&m, &[], &[0.0; 11], &NoiseConfig::default(), 1e-2, 0.05).is_err());
    }
}
