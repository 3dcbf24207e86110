use serde::{Deserialize, Serialize};

use super::run::RegretTrace;
use crate::error::{Error, Result};

/// z-value of a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

/// Per-round mean and 95% half-width of one regret notion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl Band {
    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }

    pub fn final_half_width(&self) -> f64 {
        self.half_width.last().copied().unwrap_or(0.0)
    }
}

/// Across-repetition statistics of both cumulative regrets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub reps: usize,
    pub rounds: usize,
    pub average: Band,
    pub weak: Band,
}

fn band(series: &[&[f64]]) -> Band {
    let n = series.len();
    let rounds = series[0].len();
    let mut mean = Vec::with_capacity(rounds);
    let mut half_width = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let m = series.iter().map(|s| s[t]).sum::<f64>() / n as f64;
        let hw = if n > 1 {
            let var = series.iter().map(|s| (s[t] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z_95 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        mean.push(m);
        half_width.push(hw);
    }
    Band { mean, half_width }
}

/// Mean and `1.96 · sd / √n` per round, with the sample standard deviation.
pub fn aggregate(traces: &[RegretTrace]) -> Result<Summary> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Input("cannot summarise zero traces".into()))?;
    let rounds = first.len();
    if rounds == 0 {
        return Err(Error::Input("cannot summarise empty traces".into()));
    }
    for t in traces {
        if t.avg_regret_cum.len() != rounds || t.weak_regret_cum.len() != rounds {
            return Err(Error::Input(format!(
                "trace {} has length {}, expected {rounds}",
                t.rep,
                t.len()
            )));
        }
    }
    let avg: Vec<&[f64]> = traces.iter().map(|t| &t.avg_regret_cum[..]).collect();
    let weak: Vec<&[f64]> = traces.iter().map(|t| &t.weak_regret_cum[..]).collect();
    Ok(Summary {
        reps: traces.len(),
        rounds,
        average: band(&avg),
        weak: band(&weak),
    })
}
