//! Per-stage runtime records, percentile aggregation and parallel efficiency.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Init,
    InitSync,
    Run,
    Observe,
    LikelihoodGather,
    Resample,
    Route,
    Replicate,
    TransferWait,
    Exit,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Init,
        Stage::InitSync,
        Stage::Run,
        Stage::Observe,
        Stage::LikelihoodGather,
        Stage::Resample,
        Stage::Route,
        Stage::Replicate,
        Stage::TransferWait,
        Stage::Exit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::InitSync => "init-sync",
            Stage::Run => "run",
            Stage::Observe => "observe",
            Stage::LikelihoodGather => "likelihood-gather",
            Stage::Resample => "resample",
            Stage::Route => "route",
            Stage::Replicate => "replicate",
            Stage::TransferWait => "transfer-wait",
            Stage::Exit => "exit",
        }
    }

    /// Model computation and resampling, as opposed to communication and
    /// synchronization overhead.
    pub fn is_main(self) -> bool {
        matches!(
            self,
            Stage::Init | Stage::Run | Stage::Observe | Stage::Resample | Stage::Replicate
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    /// `None` for stages executed on the master.
    pub worker: Option<usize>,
    pub sample: u64,
    pub observation: usize,
    /// Seconds.
    pub duration: f64,
}

/// Tiles one actor's timeline into consecutive stage intervals.
#[derive(Debug)]
pub struct StageClock {
    worker: Option<usize>,
    mark: Instant,
}

impl StageClock {
    pub fn new(worker: Option<usize>) -> Self {
        Self {
            worker,
            mark: Instant::now(),
        }
    }

    pub fn reset(&mut self) {
        self.mark = Instant::now();
    }

    /// Closes the interval since the last lap as `stage`.
    pub fn lap(&mut self, stage: Stage, sample: u64, observation: usize) -> StageTiming {
        let now = Instant::now();
        let duration = now.duration_since(self.mark).as_secs_f64();
        self.mark = now;
        StageTiming {
            stage,
            worker: self.worker,
            sample,
            observation,
            duration,
        }
    }
}

/// Mean and 10–90 percentile band of one stage within one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub sample: u64,
    pub stage: Stage,
    pub count: usize,
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Lower and upper nearest-rank band of `sorted`: the `ceil(q·N)`-th value
/// from the bottom and the same rank counted from the top.
pub fn percentile_band(sorted: &[f64], q: f64) -> (f64, f64) {
    let n = sorted.len();
    assert!(n > 0, "empty sample");
    let q = q.min(1.0 - q);
    // Tolerate representation error in q·N (0.1 * 30 = 3.0000000000000004).
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    (sorted[rank - 1], sorted[n - rank])
}

/// Groups by `(sample, stage)` across workers and observation indices.
pub fn aggregate_timings(raw: &[StageTiming]) -> Vec<StageSummary> {
    let mut groups: BTreeMap<(u64, Stage), Vec<f64>> = BTreeMap::new();
    for t in raw {
        groups.entry((t.sample, t.stage)).or_default().push(t.duration);
    }
    groups
        .into_iter()
        .map(|((sample, stage), mut durations)| {
            durations.sort_by(f64::total_cmp);
            let (p10, p90) = percentile_band(&durations, 0.1);
            StageSummary {
                sample,
                stage,
                count: durations.len(),
                mean: durations.iter().sum::<f64>() / durations.len() as f64,
                p10,
                p90,
            }
        })
        .collect()
}

/// Fraction of recorded time spent in main stages; `None` if nothing was recorded.
pub fn efficiency(timings: &[StageTiming]) -> Option<f64> {
    let total: f64 = timings.iter().map(|t| t.duration).sum();
    if total <= 0.0 {
        return None;
    }
    let main: f64 = timings
        .iter()
        .filter(|t| t.stage.is_main())
        .map(|t| t.duration)
        .sum();
    Some((main / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRecord {
    pub sample: u64,
    pub efficiency: f64,
}
