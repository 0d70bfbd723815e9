//! Monte Carlo simulation of single-server FCFS update-and-decide systems.
//!
//! Updates are generated one at a time with the Lindley recursion; decision
//! epochs are merged in as departures advance, so a trajectory is produced in
//! one pass without an event queue. Long replications stream through an
//! accumulator instead of materializing records.
//!
//! Indexing follows the usual convention: update 1 arrives at `t = 0` into an
//! empty system, and a decision at `tau` uses the latest update whose
//! departure is at or before `tau`. Decisions before the first departure have
//! no update to use and are counted separately.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{AudError, Result};
use crate::queue::{DecisionProcess, SystemConfig};

/// Fraction of each trajectory discarded as warm-up.
pub const WARMUP_FRACTION: f64 = 0.1;
/// Trajectory dumps larger than this are gzip-compressed.
pub const DUMP_GZIP_THRESHOLD: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub k: u64,
    /// Arrival epoch `t_k`.
    pub arrival: f64,
    /// `X_k = t_k - t_{k-1}`; zero for the first update.
    pub inter_arrival: f64,
    pub service: f64,
    pub wait: f64,
    /// `T_k = W_k + S_k`.
    pub system_time: f64,
    /// Departure epoch `t'_k`.
    pub departure: f64,
    /// `Y_k = t'_k - t'_{k-1}`, with `t'_0 = 0`.
    pub inter_departure: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecisionSample {
    pub j: u64,
    pub epoch: f64,
    /// Index of the latest update departed at or before `epoch`.
    pub used_update: u64,
    /// Age of that update at the decision epoch.
    pub aud: f64,
}

/// Receives the trajectory in causal order: every decision that uses update
/// `k` is delivered after update `k` and before update `k + 1`.
pub trait Observer {
    fn update(&mut self, record: &UpdateRecord);
    fn decision(&mut self, sample: &DecisionSample);
}

struct DecisionStream {
    process: DecisionProcess,
    period: f64,
    j: u64,
    clock: f64,
}

impl DecisionStream {
    fn new(config: &SystemConfig) -> Self {
        Self {
            process: *config.decision(),
            period: 1.0 / config.lambda(),
            j: 0,
            clock: 0.0,
        }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        self.j += 1;
        let i = (self.j - 1) as f64;
        match self.process {
            DecisionProcess::Poisson { rate } => {
                let u: f64 = rng.random();
                self.clock += -(-u).ln_1p() / rate;
                self.clock
            }
            DecisionProcess::PeriodicSync { m0 } => i * self.period / m0 as f64,
            DecisionProcess::PeriodicOffset { delta } => i * self.period + delta,
        }
    }
}

fn rngs(seed: u64, replication: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut queue = ChaCha8Rng::seed_from_u64(seed);
    queue.set_stream(2 * replication);
    let mut decisions = ChaCha8Rng::seed_from_u64(seed);
    decisions.set_stream(2 * replication + 1);
    (queue, decisions)
}

/// Counters returned by the engine itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EngineCounts {
    pub updates: u64,
    pub decisions: u64,
    /// Decisions that fell before the first departure.
    pub before_first_departure: u64,
}

/// Runs one trajectory of `horizon` updates, feeding `observer`.
pub fn simulate<O: Observer>(
    config: &SystemConfig,
    horizon: u64,
    seed: u64,
    replication: u64,
    observer: &mut O,
) -> Result<EngineCounts> {
    if horizon == 0 {
        return Err(AudError::InvalidParameter("horizon must be at least 1".to_string()));
    }
    let (mut rng, mut decision_rng) = rngs(seed, replication);
    let arrival = *config.arrival();
    let service = *config.service();
    let periodic = arrival.is_point_mass();
    let period = arrival.mean();
    let mut stream = DecisionStream::new(config);
    let mut t = 0.0;
    let mut next_arrival = |k: u64, rng: &mut ChaCha8Rng| {
        t = if k == 1 {
            0.0
        } else if periodic {
            (k - 1) as f64 * period
        } else {
            t + arrival.sample(rng)
        };
        t
    };
    let mut sources = Sources {
        rng: &mut rng,
        arrival: &mut next_arrival,
        service: &mut |rng: &mut ChaCha8Rng| service.sample(rng),
        decision: &mut || stream.next(&mut decision_rng),
    };
    Ok(drive(&mut sources, horizon, observer))
}

struct Sources<'a> {
    rng: &'a mut ChaCha8Rng,
    /// Arrival epoch of update `k`.
    arrival: &'a mut dyn FnMut(u64, &mut ChaCha8Rng) -> f64,
    service: &'a mut dyn FnMut(&mut ChaCha8Rng) -> f64,
    /// Next decision epoch, nondecreasing.
    decision: &'a mut dyn FnMut() -> f64,
}

fn drive<O: Observer>(src: &mut Sources<'_>, horizon: u64, observer: &mut O) -> EngineCounts {
    let mut counts = EngineCounts::default();
    let mut pending = (src.decision)();
    let mut j = 1;
    let (mut t_prev, mut sys_prev, mut dep_prev) = (0.0, 0.0, 0.0);
    for k in 1..=horizon {
        let t = (src.arrival)(k, src.rng);
        let x = t - t_prev;
        let s = (src.service)(src.rng);
        let w = f64::max(0.0, sys_prev - x);
        let sys = w + s;
        let dep = t + sys;
        // decisions strictly before this departure still see update k - 1
        while pending < dep {
            if k == 1 {
                counts.before_first_departure += 1;
            } else {
                observer.decision(&DecisionSample {
                    j,
                    epoch: pending,
                    used_update: k - 1,
                    aud: pending - t_prev,
                });
                counts.decisions += 1;
            }
            pending = (src.decision)();
            j += 1;
        }
        observer.update(&UpdateRecord {
            k,
            arrival: t,
            inter_arrival: x,
            service: s,
            wait: w,
            system_time: sys,
            departure: dep,
            inter_departure: dep - dep_prev,
        });
        counts.updates += 1;
        t_prev = t;
        sys_prev = sys;
        dep_prev = dep;
    }
    counts
}

#[derive(Default)]
struct Collect {
    records: Vec<UpdateRecord>,
    decisions: Vec<DecisionSample>,
}

impl Observer for Collect {
    fn update(&mut self, record: &UpdateRecord) {
        self.records.push(*record);
    }

    fn decision(&mut self, sample: &DecisionSample) {
        self.decisions.push(*sample);
    }
}

/// Full trajectory of one run: every update and every decision made after
/// the first departure, with the count of earlier decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<UpdateRecord>,
    pub decisions: Vec<DecisionSample>,
    pub before_first_departure: u64,
}

/// Materializes a trajectory; identical to replication 0 of
/// [`run_replications`] with the same seed.
pub fn run_trajectory(config: &SystemConfig, horizon: u64, seed: u64) -> Result<Trajectory> {
    let mut c = Collect::default();
    let counts = simulate(config, horizon, seed, 0, &mut c)?;
    Ok(Trajectory {
        records: c.records,
        decisions: c.decisions,
        before_first_departure: counts.before_first_departure,
    })
}

/// First update index kept after warm-up.
pub fn first_retained(horizon: u64) -> u64 {
    (WARMUP_FRACTION * horizon as f64).floor() as u64 + 1
}

/// Fraction of post-warm-up updates that no decision uses. The last update
/// is excluded because decisions after the horizon are not generated.
pub fn estimate_missing_prob(records: &[UpdateRecord], decisions: &[DecisionSample]) -> Result<f64> {
    let n = records.len() as u64;
    let k0 = first_retained(n);
    if n < 2 || k0 >= n {
        return Err(AudError::InsufficientData(format!(
            "no post-warm-up updates to count among {n}"
        )));
    }
    let mut used = vec![false; n as usize + 1];
    for d in decisions {
        used[d.used_update as usize] = true;
    }
    let missed = (k0..n).filter(|&k| !used[k as usize]).count();
    Ok(missed as f64 / (n - k0) as f64)
}

/// Fraction of post-warm-up inter-departure times shorter than `gap`.
pub fn fraction_short_interdeparture(records: &[UpdateRecord], gap: f64) -> Result<f64> {
    let k0 = first_retained(records.len() as u64);
    let kept: Vec<_> = records.iter().filter(|r| r.k >= k0).collect();
    if kept.is_empty() {
        return Err(AudError::InsufficientData("no post-warm-up updates".to_string()));
    }
    Ok(kept.iter().filter(|r| r.inter_departure < gap).count() as f64 / kept.len() as f64)
}

/// Streaming statistics of one replication, after warm-up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ReplicationStats {
    pub updates: u64,
    pub decisions: u64,
    pub sum_aud: f64,
    pub missed: u64,
    pub counted: u64,
    pub sum_system_time: f64,
    pub busy_arrivals: u64,
    pub sum_y: f64,
    pub sum_y2: f64,
    pub sum_ty: f64,
    pub short_y: u64,
    pub warmup_updates: u64,
    pub warmup_decisions: u64,
    pub before_first_departure: u64,
}

struct Accumulate {
    k0: u64,
    short_gap: f64,
    sys_prev: f64,
    uses_of_last: u64,
    stats: ReplicationStats,
}

impl Observer for Accumulate {
    fn update(&mut self, r: &UpdateRecord) {
        let s = &mut self.stats;
        if r.k > self.k0 {
            // update k - 1 will receive no more decisions
            s.counted += 1;
            if self.uses_of_last == 0 {
                s.missed += 1;
            }
        }
        self.uses_of_last = 0;
        if r.k >= self.k0 {
            s.updates += 1;
            s.sum_system_time += r.system_time;
            if r.k > 1 && r.inter_arrival < self.sys_prev {
                s.busy_arrivals += 1;
            }
            let y = r.inter_departure;
            s.sum_y += y;
            s.sum_y2 += y * y;
            s.sum_ty += self.sys_prev * y;
            if y < self.short_gap {
                s.short_y += 1;
            }
        } else {
            s.warmup_updates += 1;
        }
        self.sys_prev = r.system_time;
    }

    fn decision(&mut self, d: &DecisionSample) {
        if d.used_update >= self.k0 {
            self.stats.decisions += 1;
            self.stats.sum_aud += d.aud;
            self.uses_of_last += 1;
        } else {
            self.stats.warmup_decisions += 1;
        }
    }
}

/// Runs replication `replication` of `seed` without storing the trajectory.
pub fn replication_stats(
    config: &SystemConfig,
    horizon: u64,
    seed: u64,
    replication: u64,
) -> Result<ReplicationStats> {
    let mut acc = Accumulate {
        k0: first_retained(horizon),
        short_gap: 1.0 / config.decision_rate(),
        sys_prev: 0.0,
        uses_of_last: 0,
        stats: ReplicationStats::default(),
    };
    let counts = simulate(config, horizon, seed, replication, &mut acc)?;
    acc.stats.before_first_departure = counts.before_first_departure;
    let s = acc.stats;
    if s.decisions == 0 {
        return Err(AudError::InsufficientData(
            "no decisions after warm-up; increase the horizon".to_string(),
        ));
    }
    if s.counted == 0 {
        return Err(AudError::InsufficientData(
            "no post-warm-up updates to count misses over".to_string(),
        ));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub config: SystemConfig,
    pub horizon: u64,
    pub replications: u64,
    pub seed: u64,
    /// ChaCha8 stream ids used by replication `i` are `2i` (queue) and `2i+1` (decisions).
    pub streams: Vec<(u64, u64)>,
    pub mean_aud: f64,
    pub aud_std_error: f64,
    /// 95% Student-t interval around `mean_aud`.
    pub aud_ci95: (f64, f64),
    pub per_replication_aud: Vec<f64>,
    /// Pooled missed updates over counted updates.
    pub p_mis_hat: f64,
    pub p_mis_std_error: f64,
    pub n_updates: u64,
    pub n_decisions: u64,
    pub warmup_discarded: u64,
    pub warmup_decisions_discarded: u64,
    pub decisions_before_first_departure: u64,
    pub mean_system_time: f64,
    /// Fraction of arrivals finding the previous update still in the system.
    pub busy_arrival_fraction: f64,
    pub mean_y: f64,
    pub second_moment_y: f64,
    /// `E[T_{k-1} Y_k]`.
    pub cross_ty: f64,
    /// Fraction of inter-departure times shorter than `1/nu`.
    pub short_y_fraction: f64,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Independent replications of `horizon` updates each, run in parallel and
/// merged in replication order.
pub fn run_replications(
    config: &SystemConfig,
    horizon: u64,
    n_reps: u64,
    base_seed: u64,
) -> Result<SimulationReport> {
    if n_reps < 2 {
        return Err(AudError::InvalidParameter(format!(
            "at least 2 replications are needed for an error estimate, got {n_reps}"
        )));
    }
    let stats: Vec<ReplicationStats> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            replication_stats(config, horizon, base_seed, r).map_err(|e| AudError::Replication {
                seed: base_seed,
                stream: 2 * r,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let per_rep: Vec<f64> = stats.iter().map(|s| s.sum_aud / s.decisions as f64).collect();
    let (mean_aud, aud_std_error) = mean_and_se(&per_rep);
    let t = StudentsT::new(0.0, 1.0, (n_reps - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let pmis_per_rep: Vec<f64> = stats.iter().map(|s| s.missed as f64 / s.counted as f64).collect();
    let (_, p_mis_std_error) = mean_and_se(&pmis_per_rep);

    let total = |f: fn(&ReplicationStats) -> u64| stats.iter().map(f).sum::<u64>();
    let totalf = |f: fn(&ReplicationStats) -> f64| stats.iter().map(f).sum::<f64>();
    let n_updates = total(|s| s.updates);
    let nu = n_updates as f64;
    Ok(SimulationReport {
        config: *config,
        horizon,
        replications: n_reps,
        seed: base_seed,
        streams: (0..n_reps).map(|r| (2 * r, 2 * r + 1)).collect(),
        mean_aud,
        aud_std_error,
        aud_ci95: (mean_aud - t * aud_std_error, mean_aud + t * aud_std_error),
        per_replication_aud: per_rep,
        p_mis_hat: total(|s| s.missed) as f64 / total(|s| s.counted) as f64,
        p_mis_std_error,
        n_updates,
        n_decisions: total(|s| s.decisions),
        warmup_discarded: total(|s| s.warmup_updates),
        warmup_decisions_discarded: total(|s| s.warmup_decisions),
        decisions_before_first_departure: total(|s| s.before_first_departure),
        mean_system_time: totalf(|s| s.sum_system_time) / nu,
        busy_arrival_fraction: total(|s| s.busy_arrivals) as f64 / nu,
        mean_y: totalf(|s| s.sum_y) / nu,
        second_moment_y: totalf(|s| s.sum_y2) / nu,
        cross_ty: totalf(|s| s.sum_ty) / nu,
        short_y_fraction: total(|s| s.short_y) as f64 / nu,
    })
}

const DUMP_HEADER: [&str; 13] = [
    "kind",
    "k",
    "t_k",
    "X_k",
    "S_k",
    "W_k",
    "T_k",
    "t_dep_k",
    "Y_k",
    "j",
    "tau_j",
    "used_update",
    "aud",
];

fn write_dump_rows<W: Write>(out: W, trajectory: &Trajectory) -> io::Result<W> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| io::Error::other(e);
    w.write_record(DUMP_HEADER).map_err(io_err)?;
    for r in &trajectory.records {
        w.write_record([
            "update".to_string(),
            r.k.to_string(),
            r.arrival.to_string(),
            r.inter_arrival.to_string(),
            r.service.to_string(),
            r.wait.to_string(),
            r.system_time.to_string(),
            r.departure.to_string(),
            r.inter_departure.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .map_err(io_err)?;
    }
    for d in &trajectory.decisions {
        let mut row = vec![String::new(); 13];
        row[0] = "decision".to_string();
        row[9] = d.j.to_string();
        row[10] = d.epoch.to_string();
        row[11] = d.used_update.to_string();
        row[12] = d.aud.to_string();
        w.write_record(&row).map_err(io_err)?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

struct CountingSink(u64);

impl Write for CountingSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0 += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Writes the trajectory as one CSV (update rows, then decision rows, told
/// apart by the `kind` column). The file is gzip-compressed when the plain
/// CSV would exceed `gzip_threshold` bytes. Returns whether it was compressed.
pub fn write_trajectory_csv(path: &Path, trajectory: &Trajectory, gzip_threshold: u64) -> Result<bool> {
    let io_err = |source| AudError::Io {
        path: path.to_path_buf(),
        source,
    };
    let size = write_dump_rows(CountingSink(0), trajectory).map_err(io_err)?.0;
    let file = BufWriter::new(File::create(path).map_err(io_err)?);
    let compress = size > gzip_threshold;
    if compress {
        let gz = write_dump_rows(GzEncoder::new(file, Compression::default()), trajectory).map_err(io_err)?;
        gz.finish().map_err(io_err)?.flush().map_err(io_err)?;
    } else {
        write_dump_rows(file, trajectory).map_err(io_err)?.flush().map_err(io_err)?;
    }
    Ok(compress)
}
