use std::time::{Duration, Instant};

use crate::error::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timing {
    pub warmup: u32,
    pub reps: u32,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            warmup: 3,
            reps: 10,
        }
    }
}

impl Timing {
    pub fn new(warmup: u32, reps: u32) -> Result<Self, BenchError> {
        if reps == 0 {
            return Err(BenchError::Config("reps must be at least 1".into()));
        }
        Ok(Self { warmup, reps })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub samples: Vec<Duration>,
}

impl Stats {
    pub fn mean_ms(&self) -> f64 {
        self.samples.iter().map(|d| d.as_secs_f64()).sum::<f64>() * 1e3 / self.samples.len() as f64
    }

    pub fn median_ms(&self) -> f64 {
        let mut ms: Vec<f64> = self.samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        if n % 2 == 1 {
            ms[n / 2]
        } else {
            (ms[n / 2 - 1] + ms[n / 2]) / 2.0
        }
    }
}

/// Runs `f` `warmup` times untimed, then `reps` times timed.
pub fn measure<F: FnMut()>(t: Timing, mut f: F) -> Stats {
    for _ in 0..t.warmup {
        f();
    }
    let samples = (0..t.reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed()
        })
        .collect();
    Stats { samples }
}
