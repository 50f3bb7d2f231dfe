//! Trajectory log rows and their CSV form:
//! `step,env,q0..q10,qbar0..qbar10,ball_qw..qz,omega_x,omega_y,omega_z,rot_term,total_reward,done`.

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsvLogError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: bad value in column `{column}`")]
    BadValue { row: usize, column: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u64,
    pub env: usize,
    pub q: Vec<f64>,
    pub qbar: Vec<f64>,
    /// (w, x, y, z)
    pub ball_quat: [f64; 4],
    pub omega: [f64; 3],
    pub rot_term: f64,
    pub total_reward: f64,
    pub done: bool,
}

impl TrajectoryRow {
    pub fn blank(n_joints: usize) -> Self {
        Self {
            step: 0,
            env: 0,
            q: vec![0.0; n_joints],
            qbar: vec![0.0; n_joints],
            ball_quat: [1.0, 0.0, 0.0, 0.0],
            omega: [0.0; 3],
            rot_term: 0.0,
            total_reward: 0.0,
            done: false,
        }
    }
}

pub fn trajectory_header(n_joints: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "env".to_string()];
    h.extend((0..n_joints).map(|i| format!("q{i}")));
    h.extend((0..n_joints).map(|i| format!("qbar{i}")));
    for c in ["ball_qw", "ball_qx", "ball_qy", "ball_qz", "omega_x", "omega_y", "omega_z", "rot_term", "total_reward", "done"] {
        h.push(c.to_string());
    }
    h
}

pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow], n_joints: usize) -> Result<(), CsvLogError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(n_joints))?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.env.to_string()];
        rec.extend(r.q.iter().map(f64::to_string));
        rec.extend(r.qbar.iter().map(f64::to_string));
        rec.extend(r.ball_quat.iter().map(f64::to_string));
        rec.extend(r.omega.iter().map(f64::to_string));
        rec.push(r.rot_term.to_string());
        rec.push(r.total_reward.to_string());
        rec.push(u8::from(r.done).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a trajectory CSV; the joint count is inferred from the `q*` columns.
pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRow>, CsvLogError> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CsvLogError::MissingColumn(name.to_string()))
    };
    let n_joints = (0..).take_while(|i| headers.iter().any(|h| h == format!("q{i}"))).count();
    let q_cols: Vec<usize> = (0..n_joints).map(|i| col(&format!("q{i}"))).collect::<Result<_, _>>()?;
    let qbar_cols: Vec<usize> = (0..n_joints).map(|i| col(&format!("qbar{i}"))).collect::<Result<_, _>>()?;
    let quat_cols = [col("ball_qw")?, col("ball_qx")?, col("ball_qy")?, col("ball_qz")?];
    let omega_cols = [col("omega_x")?, col("omega_y")?, col("omega_z")?];
    let (step_c, env_c, rot_c, tot_c, done_c) =
        (col("step")?, col("env")?, col("rot_term")?, col("total_reward")?, col("done")?);

    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64, CsvLogError> {
            rec.get(c)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| CsvLogError::BadValue {
                    row: i,
                    column: headers[c].to_string(),
                })
        };
        rows.push(TrajectoryRow {
            step: num(step_c)? as u64,
            env: num(env_c)? as usize,
            q: q_cols.iter().map(|&c| num(c)).collect::<Result<_, _>>()?,
            qbar: qbar_cols.iter().map(|&c| num(c)).collect::<Result<_, _>>()?,
            ball_quat: [num(quat_cols[0])?, num(quat_cols[1])?, num(quat_cols[2])?, num(quat_cols[3])?],
            omega: [num(omega_cols[0])?, num(omega_cols[1])?, num(omega_cols[2])?],
            rot_term: num(rot_c)?,
            total_reward: num(tot_c)?,
            done: num(done_c)? != 0.0,
        });
    }
    Ok(rows)
}
