//! Objective functions backing a campaign.

use std::io::Write;
use std::process::{Command, Stdio};

use bode_core::bench::benchmark;
use bode_core::{BodeError, Result};

use crate::config::OracleSpec;

/// External program: one design per line on stdin as comma-separated
/// decimals, one decimal per line expected on stdout.
#[derive(Debug, Clone)]
pub struct CommandOracle {
    argv: Vec<String>,
}

impl CommandOracle {
    pub fn new(argv: Vec<String>) -> Self {
        CommandOracle { argv }
    }

    pub fn eval_batch(&self, designs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let fail = |m: String| BodeError::Oracle(format!("{}: {m}", self.argv[0]));
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(format!("cannot start: {e}")))?;
        let mut input = String::new();
        for x in designs {
            let row: Vec<String> = x.iter().map(f64::to_string).collect();
            input.push_str(&row.join(","));
            input.push('\n');
        }
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            // a program that exits without reading is reported through its status
            let _ = stdin.write_all(input.as_bytes());
        }
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let values = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| fail(format!("unparsable output line '{l}'"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != designs.len() {
            return Err(fail(format!("expected {} values, got {}", designs.len(), values.len())));
        }
        Ok(values)
    }
}

/// Boxed single-design oracle for a resolved spec.
pub fn build(spec: &OracleSpec) -> Result<Box<dyn FnMut(&[f64]) -> Result<f64>>> {
    match spec {
        OracleSpec::Benchmark { name } => {
            let b = benchmark(name)?;
            Ok(Box::new(move |x| b.eval(x)))
        }
        OracleSpec::Command { argv } => {
            let c = CommandOracle::new(argv.clone());
            Ok(Box::new(move |x| Ok(c.eval_batch(&[x.to_vec()])?[0])))
        }
        OracleSpec::Manual => Err(BodeError::Argument(
            "no oracle configured; set oracle.benchmark or oracle.command, or use suggest/record".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shell_oracle_round_trip() {
        let c = CommandOracle::new(vec!["sh".into(), "-c".into(), "while IFS=, read a b; do echo \"$a\"; done".into()]);
        let v = c.eval_batch(&[vec![0.25, 1.0], vec![-3.5, 2.0]]).unwrap();
        assert_eq!(v, vec![0.25, -3.5]);
    }

    #[test]
    fn failing_command() {
        let c = CommandOracle::new(vec!["sh".into(), "-c".into(), "exit 7".into()]);
        assert!(matches!(c.eval_batch(&[vec![0.5]]), Err(BodeError::Oracle(_))));
        let c = CommandOracle::new(vec!["sh".into(), "-c".into(), "cat >/dev/null; echo nope".into()]);
        assert!(matches!(c.eval_batch(&[vec![0.5]]), Err(BodeError::Oracle(_))));
        let c = CommandOracle::new(vec!["/nonexistent/program".into()]);
        assert!(c.eval_batch(&[vec![0.5]]).is_err());
    }
}
