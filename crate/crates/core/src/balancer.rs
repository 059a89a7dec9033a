//! Greedy routing of resampled particles across workers.
//!
//! Given the resample counts and the worker currently holding each particle,
//! [`compute_routing`] places every post-resampling copy on some worker so
//! that no worker holds more than `W_max = ceil(p / W)` particles:
//!
//! 1. *Local first.* Workers in ascending rank keep copies of their resident
//!    particles (ascending lineage id) while they have capacity.
//! 2. *Nearest under-loaded worker.* Remaining copies, by ascending lineage
//!    id, go to the closest worker by `|rank difference|` with spare
//!    capacity, ties toward the lower rank. A particle's copies may be split
//!    across several destinations.
//!
//! New lineage ids are then assigned `0..p` in `(lineage, destination, copy)`
//! order. Copies of one parent therefore always get a contiguous block of
//! ids that does not depend on the worker count.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::ResampleCounts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticleLocation {
    pub lineage: usize,
    pub worker: usize,
}

/// One post-resampling particle: copy of `lineage` (held by `source`) placed on `destination`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingEntry {
    pub lineage: usize,
    pub source: usize,
    pub destination: usize,
    pub new_lineage: usize,
}

impl RoutingEntry {
    pub fn is_move(&self) -> bool {
        self.source != self.destination
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routing {
    pub entries: Vec<RoutingEntry>,
    pub max_load: usize,
    pub workers: usize,
}

impl Routing {
    /// Entries that concern `rank`, as source or destination.
    pub fn slice_for(&self, rank: usize) -> Vec<RoutingEntry> {
        self.entries
            .iter()
            .filter(|e| e.source == rank || e.destination == rank)
            .copied()
            .collect()
    }

    pub fn destination_loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.workers];
        for e in &self.entries {
            loads[e.destination] += 1;
        }
        loads
    }

    /// Worker holding each new lineage id after the routing is applied.
    pub fn next_locations(&self) -> Vec<usize> {
        let mut out = vec![0; self.entries.len()];
        for e in &self.entries {
            out[e.new_lineage] = e.destination;
        }
        out
    }
}

/// Contiguous, balanced initial placement: the first `p mod W` workers get one extra.
pub fn initial_locations(particles: usize, workers: usize) -> Vec<usize> {
    let base = particles / workers;
    let extra = particles % workers;
    (0..workers)
        .flat_map(|w| std::iter::repeat_n(w, base + usize::from(w < extra)))
        .collect()
}

pub fn compute_routing(
    counts: &ResampleCounts,
    locations: &[ParticleLocation],
    workers: usize,
) -> Result<Routing> {
    let p = counts.len();
    if workers == 0 {
        return Err(Error::InvalidRouting("need at least one worker".into()));
    }
    if p == 0 {
        return Err(Error::InvalidRouting("empty ensemble".into()));
    }
    if counts.total() != p {
        return Err(Error::InvalidRouting(format!(
            "counts sum to {}, expected {p}",
            counts.total()
        )));
    }
    if locations.len() != p {
        return Err(Error::InvalidRouting(format!(
            "{} locations for {p} particles",
            locations.len()
        )));
    }
    let mut holder = vec![usize::MAX; p];
    for loc in locations {
        if loc.lineage >= p || loc.worker >= workers {
            return Err(Error::InvalidRouting(format!("location {loc:?} out of range")));
        }
        if holder[loc.lineage] != usize::MAX {
            return Err(Error::InvalidRouting(format!(
                "lineage {} placed twice",
                loc.lineage
            )));
        }
        holder[loc.lineage] = loc.worker;
    }

    let max_load = p.div_ceil(workers);
    let mut load = vec![0usize; workers];
    let mut remaining = counts.0.clone();
    // (lineage, destination, copies)
    let mut placements: Vec<(usize, usize, usize)> = Vec::new();

    let mut resident: Vec<Vec<usize>> = vec![Vec::new(); workers];
    for (lineage, &w) in holder.iter().enumerate() {
        resident[w].push(lineage);
    }
    for (w, lineages) in resident.iter().enumerate() {
        for &i in lineages {
            let keep = remaining[i].min(max_load - load[w]);
            if keep > 0 {
                placements.push((i, w, keep));
                load[w] += keep;
                remaining[i] -= keep;
            }
        }
    }

    for i in 0..p {
        let source = holder[i];
        while remaining[i] > 0 {
            let dest = nearest_with_capacity(source, &load, max_load)
                .expect("total capacity W * ceil(p / W) >= p");
            let take = remaining[i].min(max_load - load[dest]);
            placements.push((i, dest, take));
            load[dest] += take;
            remaining[i] -= take;
        }
    }

    placements.sort_unstable_by_key(|&(i, w, _)| (i, w));
    let mut entries = Vec::with_capacity(p);
    for (lineage, destination, copies) in placements {
        for _ in 0..copies {
            entries.push(RoutingEntry {
                lineage,
                source: holder[lineage],
                destination,
                new_lineage: entries.len(),
            });
        }
    }
    Ok(Routing {
        entries,
        max_load,
        workers,
    })
}

fn nearest_with_capacity(source: usize, load: &[usize], max_load: usize) -> Option<usize> {
    let w = load.len();
    (0..w).find_map(|d| {
        let lower = source.checked_sub(d).filter(|&r| load[r] < max_load);
        let upper = Some(source + d).filter(|&r| r < w && load[r] < max_load);
        lower.or(upper)
    })
}

/// Communication and replication volume of a routing, as fractions of `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficMetrics {
    /// Distinct `(lineage, destination)` transfers between different workers.
    pub move_fraction: f64,
    /// Copies made beyond the first instance held at each destination.
    pub copy_fraction: f64,
}

pub fn traffic_metrics(routing: &Routing) -> TrafficMetrics {
    let p = routing.entries.len() as f64;
    let pairs: BTreeSet<(usize, usize, bool)> = routing
        .entries
        .iter()
        .map(|e| (e.lineage, e.destination, e.is_move()))
        .collect();
    let moves = pairs.iter().filter(|(_, _, mv)| *mv).count() as f64;
    TrafficMetrics {
        move_fraction: moves / p,
        copy_fraction: (p - pairs.len() as f64) / p,
    }
}

/// Checks the routing contract; returns the first violated property.
///
/// Properties: one entry per new lineage and `counts[i]` entries per parent;
/// no destination above `max_load`; each worker keeps
/// `min(resident copies, max_load)` copies locally; only full workers send.
pub fn verify_routing(
    routing: &Routing,
    counts: &ResampleCounts,
    holders: &[usize],
) -> std::result::Result<(), String> {
    let p = counts.len();
    let w = routing.workers;
    if routing.entries.len() != p {
        return Err(format!("{} entries for {p} particles", routing.entries.len()));
    }
    if routing.max_load != p.div_ceil(w) {
        return Err(format!("max load {} != ceil({p}/{w})", routing.max_load));
    }
    let mut per_lineage = vec![0; p];
    let mut seen = vec![false; p];
    for e in &routing.entries {
        if e.new_lineage >= p || std::mem::replace(&mut seen[e.new_lineage], true) {
            return Err(format!("new lineage {} repeated or out of range", e.new_lineage));
        }
        if e.source != holders[e.lineage] {
            return Err(format!("lineage {} sourced from {} not {}", e.lineage, e.source, holders[e.lineage]));
        }
        per_lineage[e.lineage] += 1;
    }
    if per_lineage != counts.0 {
        return Err("entries per parent differ from resample counts".into());
    }
    let loads = routing.destination_loads();
    if let Some((rank, load)) = loads.iter().enumerate().find(|(_, l)| **l > routing.max_load) {
        return Err(format!("worker {rank} holds {load} > {}", routing.max_load));
    }
    let mut resident = vec![0; w];
    let mut kept = vec![0; w];
    for (i, &h) in holders.iter().enumerate() {
        resident[h] += counts.0[i];
    }
    for e in routing.entries.iter().filter(|e| !e.is_move()) {
        kept[e.source] += 1;
    }
    for r in 0..w {
        if kept[r] != resident[r].min(routing.max_load) {
            return Err(format!("worker {r} keeps {} of {} resident copies", kept[r], resident[r]));
        }
    }
    if let Some(e) = routing.entries.iter().find(|e| e.is_move() && kept[e.source] < routing.max_load) {
        return Err(format!("worker {} sends lineage {} while under capacity", e.source, e.lineage));
    }
    Ok(())
}

/// Outcome of [`routing_battery`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryReport {
    pub instances: usize,
    pub failures: Vec<String>,
}

/// Randomized routing instances with `p ≤ 64` and `W ≤ 16`.
///
/// Each instance draws random weights, resamples, places the parents on
/// arbitrary workers and verifies the routing; it also checks that the
/// identity resample on a balanced placement moves nothing.
pub fn routing_battery(instances: usize, seed: u64) -> BatteryReport {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for k in 0..instances {
        let p = rng.random_range(1..=64);
        let w = rng.random_range(1..=16);
        let weights: Vec<f64> = (0..p)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
            .collect();
        let weights = if weights.iter().all(|x| *x == 0.0) { vec![1.0; p] } else { weights };
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|x| x / total).collect();
        let counts = crate::filter::resample_multinomial(&probs, p, rng.random());
        let holders: Vec<usize> = (0..p).map(|_| rng.random_range(0..w)).collect();
        let placed: Vec<ParticleLocation> = holders
            .iter()
            .enumerate()
            .map(|(lineage, &worker)| ParticleLocation { lineage, worker })
            .collect();
        match compute_routing(&counts, &placed, w) {
            Ok(r) => {
                if let Err(e) = verify_routing(&r, &counts, &holders) {
                    failures.push(format!("instance {k} (p={p}, W={w}): {e}"));
                }
            }
            Err(e) => failures.push(format!("instance {k}: {e}")),
        }

        let mut balanced = initial_locations(p, w);
        balanced.shuffle(&mut rng);
        let placed: Vec<ParticleLocation> = balanced
            .iter()
            .enumerate()
            .map(|(lineage, &worker)| ParticleLocation { lineage, worker })
            .collect();
        match compute_routing(&ResampleCounts(vec![1; p]), &placed, w) {
            Ok(r) if traffic_metrics(&r).move_fraction == 0.0 => {}
            Ok(_) => failures.push(format!("instance {k}: identity resample moved particles")),
            Err(e) => failures.push(format!("instance {k}: {e}")),
        }
    }
    BatteryReport { instances, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn locs(workers_of: &[usize]) -> Vec<ParticleLocation> {
        workers_of
            .iter()
            .enumerate()
            .map(|(lineage, &worker)| ParticleLocation { lineage, worker })
            .collect()
    }

    #[test]
    fn battery_passes() {
        let report = routing_battery(300, 5);
        assert_eq!(report.instances, 300);
        assert!(report.failures.is_empty(), "{:?}", report.failures);
    }

    #[test]
    fn verifier_catches_violations() {
        let counts = ResampleCounts(vec![2, 0, 1, 1]);
        let holders = [0, 0, 1, 1];
        let mut r = compute_routing(&counts, &locs(&holders), 2).unwrap();
        verify_routing(&r, &counts, &holders).unwrap();
        r.entries[0].destination = 1;
        assert!(verify_routing(&r, &counts, &holders).is_err());
    }

    #[test]
    fn identity_resample_stays_put() {
        let r = compute_routing(&ResampleCounts(vec![1; 8]), &locs(&[0, 0, 1, 1, 2, 2, 3, 3]), 4).unwrap();
        assert_eq!(r.entries.len(), 8);
        assert!(r.entries.iter().all(|e| !e.is_move()));
        assert_eq!(r.max_load, 2);
        let t = traffic_metrics(&r);
        assert_eq!((t.move_fraction, t.copy_fraction), (0.0, 0.0));
    }

    #[test]
    fn single_survivor_hand_trace() {
        let counts = ResampleCounts(vec![8, 0, 0, 0, 0, 0, 0, 0]);
        let r = compute_routing(&counts, &locs(&[0, 0, 1, 1, 2, 2, 3, 3]), 4).unwrap();
        assert_eq!(r.max_load, 2);
        let dests: Vec<usize> = r.entries.iter().map(|e| e.destination).collect();
        assert_eq!(dests, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert!(r.entries.iter().all(|e| e.lineage == 0 && e.source == 0));
        let ids: Vec<usize> = r.entries.iter().map(|e| e.new_lineage).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        let t = traffic_metrics(&r);
        assert_eq!(t.move_fraction, 3.0 / 8.0);
        assert_eq!(t.copy_fraction, 0.5);
    }

    #[test]
    fn single_worker_keeps_everything() {
        let counts = ResampleCounts(vec![0, 3, 0, 2, 1, 0]);
        let r = compute_routing(&counts, &locs(&[0; 6]), 1).unwrap();
        assert_eq!(r.max_load, 6);
        assert!(r.entries.iter().all(|e| e.source == 0 && e.destination == 0));
        let one = compute_routing(&ResampleCounts(vec![6, 0, 0, 0, 0, 0]), &locs(&[0; 6]), 1).unwrap();
        let t = traffic_metrics(&one);
        assert_eq!(t.move_fraction, 0.0);
        assert!((t.copy_fraction - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lower_rank() {
        // Worker 1 overflows by two; workers 0 and 2 are equidistant and
        // each has one free slot.
        let counts = ResampleCounts(vec![2, 0, 0, 5, 0, 0, 2, 0, 0]);
        let r = compute_routing(&counts, &locs(&[0, 0, 0, 1, 1, 1, 2, 2, 2]), 3).unwrap();
        let dests: Vec<usize> = r.entries.iter().map(|e| e.destination).collect();
        assert_eq!(dests, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        let lineages: Vec<usize> = r.entries.iter().map(|e| e.lineage).collect();
        assert_eq!(lineages, vec![0, 0, 3, 3, 3, 3, 3, 6, 6]);
        assert_eq!(traffic_metrics(&r).move_fraction, 2.0 / 9.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let l = locs(&[0, 0]);
        assert!(compute_routing(&ResampleCounts(vec![1, 0]), &l, 1).is_err());
        assert!(compute_routing(&ResampleCounts(vec![1, 1]), &l, 0).is_err());
        assert!(compute_routing(&ResampleCounts(vec![1, 1]), &locs(&[0, 3]), 2).is_err());
        let dup = vec![
            ParticleLocation { lineage: 0, worker: 0 },
            ParticleLocation { lineage: 0, worker: 0 },
        ];
        assert!(compute_routing(&ResampleCounts(vec![1, 1]), &dup, 1).is_err());
    }

    #[test]
    fn initial_placement_is_balanced() {
        assert_eq!(initial_locations(8, 4), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(initial_locations(5, 3), vec![0, 0, 1, 1, 2]);
        assert_eq!(initial_locations(2, 4), vec![0, 1]);
    }

    fn instance() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize)> {
        (1usize..=64, 1usize..=16).prop_flat_map(|(p, w)| {
            (
                proptest::collection::vec(0..p, p).prop_map(move |draws| {
                    let mut c = vec![0; p];
                    for d in draws {
                        c[d] += 1;
                    }
                    c
                }),
                proptest::collection::vec(0..w, p),
                Just(w),
            )
        })
    }

    proptest! {
        #[test]
        fn routing_invariants((counts, holders, w) in instance()) {
            let p = counts.len();
            let r = compute_routing(&ResampleCounts(counts.clone()), &locs(&holders), w).unwrap();
            prop_assert_eq!(r.entries.len(), p);
            prop_assert_eq!(r.max_load, p.div_ceil(w));
            let loads = r.destination_loads();
            prop_assert!(loads.iter().all(|l| *l <= r.max_load));
            let mut per_lineage = vec![0; p];
            let mut seen = vec![false; p];
            for e in &r.entries {
                per_lineage[e.lineage] += 1;
                prop_assert!(!seen[e.new_lineage]);
                seen[e.new_lineage] = true;
                prop_assert_eq!(e.source, holders[e.lineage]);
            }
            prop_assert_eq!(per_lineage, counts.clone());
            for e in r.entries.iter().filter(|e| e.is_move()) {
                prop_assert_eq!(loads[e.source], r.max_load, "moved off a worker with spare capacity");
            }
            prop_assert_eq!(&r, &compute_routing(&ResampleCounts(counts), &locs(&holders), w).unwrap());
        }

        #[test]
        fn identity_never_moves(
            (holders, w) in (1usize..64, 1usize..16).prop_flat_map(|(p, w)| {
                (Just(initial_locations(p, w)).prop_shuffle(), Just(w))
            })
        ) {
            let p = holders.len();
            let r = compute_routing(&ResampleCounts(vec![1; p]), &locs(&holders), w).unwrap();
            prop_assert_eq!(traffic_metrics(&r).move_fraction, 0.0);
        }
    }
}
