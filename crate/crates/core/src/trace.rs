//! Closed-loop simulation traces and their CSV form.
//!
//! The CSV header is `t,<states>,<controls>,<params>,normF,iters,setup,rollouts`;
//! for the minimum-time example that is `t,x,y,u,u_d,p,normF,iters,setup,rollouts`.
//! Floats are written with 17 significant digits so a trace reads back
//! bit-exactly.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed CSV at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// One sample of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceRow {
    pub t: f64,
    pub x: Vec<f64>,
    /// Control applied at `t` (first block of the updated unknown).
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    /// `‖F[U_j, x_j, t_j]‖₂` after the update.
    pub norm_f: f64,
    pub iterations: usize,
    pub operator_applications: usize,
    pub converged: bool,
    /// A preconditioner was set up at this sample.
    pub setup: bool,
    /// Rollouts spent on the preconditioner setup.
    pub setup_rollouts: u64,
    /// All full rollouts spent at this sample.
    pub rollouts: u64,
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulationTrace {
    pub state_names: Vec<String>,
    pub control_names: Vec<String>,
    pub param_names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

fn push_float(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

impl SimulationTrace {
    pub fn new(state_names: Vec<String>, control_names: Vec<String>, param_names: Vec<String>) -> Self {
        Self {
            state_names,
            control_names,
            param_names,
            rows: Vec::new(),
        }
    }

    /// Rows after the initial point, i.e. the continuation steps.
    pub fn steps(&self) -> &[TraceRow] {
        self.rows.get(1..).unwrap_or(&[])
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend(self.state_names.iter().cloned());
        cols.extend(self.control_names.iter().cloned());
        cols.extend(self.param_names.iter().cloned());
        cols.extend(["normF", "iters", "setup", "rollouts"].map(String::from));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for row in &self.rows {
            push_float(&mut out, row.t);
            for v in row.x.iter().chain(&row.u).chain(&row.p) {
                out.push(',');
                push_float(&mut out, *v);
            }
            out.push(',');
            push_float(&mut out, row.norm_f);
            let _ = writeln!(out, ",{},{},{}", row.iterations, u8::from(row.setup), row.rollouts);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Reads back the CSV columns. Fields that are not part of the CSV
    /// (residual histories, setup rollouts, convergence flags) stay default.
    pub fn from_csv(text: &str, state_dim: usize, control_dim: usize, param_dim: usize) -> Result<Self, TraceError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TraceError::Parse {
            line: 1,
            reason: "missing header".into(),
        })?;
        let names: Vec<String> = header.split(',').map(String::from).collect();
        let float_cols = 1 + state_dim + control_dim + param_dim;
        let expected = float_cols + 4;
        if names.len() != expected {
            return Err(TraceError::Parse {
                line: 1,
                reason: format!("expected {expected} columns, found {}", names.len()),
            });
        }
        let mut trace = Self::new(
            names[1..1 + state_dim].to_vec(),
            names[1 + state_dim..1 + state_dim + control_dim].to_vec(),
            names[1 + state_dim + control_dim..float_cols].to_vec(),
        );
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| TraceError::Parse { line: idx + 1, reason };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected {
                return Err(err(format!("expected {expected} fields, found {}", fields.len())));
            }
            let floats = fields[..=float_cols]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let int = |f: &str| f.parse::<u64>().map_err(|e| err(format!("{f:?}: {e}")));
            let iterations = int(fields[float_cols + 1])? as usize;
            let setup = int(fields[float_cols + 2])? != 0;
            let rollouts = int(fields[float_cols + 3])?;
            let (t, rest) = floats.split_first().expect("non-empty");
            trace.rows.push(TraceRow {
                t: *t,
                x: rest[..state_dim].to_vec(),
                u: rest[state_dim..state_dim + control_dim].to_vec(),
                p: rest[state_dim + control_dim..float_cols - 1].to_vec(),
                norm_f: rest[float_cols - 1],
                iterations,
                setup,
                rollouts,
                ..TraceRow::default()
            });
        }
        Ok(trace)
    }

    /// A gnuplot script plotting the trajectory, controls, `‖F‖` and
    /// iteration counts from `csv_path`.
    pub fn gnuplot_script(&self, csv_path: &str) -> String {
        let col = |name: &str| {
            self.header()
                .split(',')
                .position(|c| c == name)
                .map(|i| i + 1)
                .unwrap_or(1)
        };
        let nx = self.state_names.len();
        let mut s = String::new();
        let _ = writeln!(s, "set datafile separator ','");
        let _ = writeln!(s, "set key autotitle columnhead");
        let _ = writeln!(s, "set multiplot layout 2,2");
        if nx >= 2 {
            let _ = writeln!(
                s,
                "set title 'trajectory'; plot '{csv_path}' using {}:{} with lines",
                col(&self.state_names[0]),
                col(&self.state_names[1])
            );
        } else {
            let _ = writeln!(s, "set title 'state'; plot '{csv_path}' using 1:2 with lines");
        }
        let controls: Vec<String> = self
            .control_names
            .iter()
            .map(|c| format!("'{csv_path}' using 1:{} with lines", col(c)))
            .collect();
        let _ = writeln!(s, "set title 'control'; plot {}", controls.join(", "));
        let _ = writeln!(
            s,
            "set title 'normF'; set logscale y; plot '{csv_path}' using 1:{} with lines; unset logscale y",
            col("normF")
        );
        let _ = writeln!(s, "set title 'iterations'; plot '{csv_path}' using 1:{} with steps", col("iters"));
        let _ = writeln!(s, "unset multiplot");
        s
    }
}
