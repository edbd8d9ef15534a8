use std::io::{self, Write};

pub const STATS_HEADER: &str = "t,best_return,mean_return,worst_return,eval_seconds,update_seconds,theta_l2_norm";

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub t: u64,
    pub best_return: f64,
    pub mean_return: f64,
    pub worst_return: f64,
    pub eval_seconds: f64,
    pub update_seconds: f64,
    pub theta_l2_norm: f64,
    pub failures: usize,
}

impl IterationStats {
    pub fn from_returns(
        t: u64,
        raw_returns: &[f64],
        failures: usize,
        eval_seconds: f64,
        update_seconds: f64,
        theta: &[f64],
    ) -> Self {
        let best = raw_returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let worst = raw_returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = raw_returns.iter().sum::<f64>() / raw_returns.len() as f64;
        Self {
            t,
            best_return: best,
            mean_return: mean,
            worst_return: worst,
            eval_seconds,
            update_seconds,
            theta_l2_norm: theta.iter().map(|v| v * v).sum::<f64>().sqrt(),
            failures,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{}",
            self.t,
            self.best_return,
            self.mean_return,
            self.worst_return,
            self.eval_seconds,
            self.update_seconds,
            self.theta_l2_norm
        )
    }
}

/// Iteration-stats CSV, flushed after every row.
pub struct StatsWriter<W: Write> {
    out: W,
}

impl<W: Write> StatsWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{STATS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, stats: &IterationStats) -> io::Result<()> {
        writeln!(self.out, "{}", stats.csv_row())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_and_csv() {
        let s = IterationStats::from_returns(2, &[1.0, 3.0, 2.0], 0, 0.5, 0.25, &[3.0, 4.0]);
        assert_eq!((s.best_return, s.mean_return, s.worst_return), (3.0, 2.0, 1.0));
        assert_eq!(s.theta_l2_norm, 5.0);
        let mut w = StatsWriter::new(Vec::new()).unwrap();
        w.write(&s).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text, format!("{STATS_HEADER}\n2,3,2,1,0.500000,0.250000,5\n"));
    }
}
