//! Synthetic benchmark suites: a latent-factor series with seeded, disjoint
//! fault injections of every kind.

use std::ops::Range;

use anyhow::{bail, ensure};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rca_core::data::{check_disjoint, fit_normalization, AnomalyEvent, SeriesMatrix, DEFAULT_STD_FLOOR};
use rca_core::synth::{generate, inject, AnomalyKind, InjectionRequest, InjectionSpec, LatentFactorSystem};
use serde::{Deserialize, Serialize};

const ALL_KINDS: [AnomalyKind; 6] = [
    AnomalyKind::Spike,
    AnomalyKind::Shift,
    AnomalyKind::Noise,
    AnomalyKind::Drift,
    AnomalyKind::Dropout,
    AnomalyKind::Saturation,
];

/// A batch of faults placed at random, non-overlapping positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventPlan {
    pub kinds: Vec<AnomalyKind>,
    pub per_kind: usize,
    pub duration: usize,
    /// In training-σ units.
    pub magnitude: f64,
    /// Minimum clean gap between consecutive events.
    pub min_gap: usize,
}

impl Default for EventPlan {
    fn default() -> Self {
        Self {
            kinds: ALL_KINDS.to_vec(),
            per_kind: 10,
            duration: 10,
            magnitude: 3.0,
            min_gap: 60,
        }
    }
}

impl EventPlan {
    pub fn n_events(&self) -> usize {
        self.kinds.len() * self.per_kind
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthScenario {
    pub sensors: usize,
    pub factors: usize,
    pub length: usize,
    pub smoothness: f64,
    pub noise: f64,
    /// Constant added to every sensor, so that dropout to zero departs
    /// from the operating point.
    pub offset: f64,
    /// Events are placed after this clean prefix.
    pub train_length: usize,
    pub events: EventPlan,
    pub seed: u64,
}

impl Default for SynthScenario {
    fn default() -> Self {
        Self {
            sensors: 10,
            factors: 2,
            length: 20_000,
            smoothness: 0.997,
            noise: 0.05,
            offset: 5.0,
            train_length: 14_000,
            events: EventPlan::default(),
            seed: 0,
        }
    }
}

/// A generated suite in raw (unnormalized) units.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSuite {
    pub clean: SeriesMatrix,
    pub series: SeriesMatrix,
    pub events: Vec<AnomalyEvent>,
    /// Fault kind of each event.
    pub kinds: Vec<AnomalyKind>,
}

/// Onsets of `n` events of length `duration` in `region`, one per equal
/// slot, each at least `min_gap / 2` from its slot edges.
pub fn place_events(
    region: Range<usize>,
    n: usize,
    duration: usize,
    min_gap: usize,
    rng: &mut impl Rng,
) -> anyhow::Result<Vec<usize>> {
    ensure!(duration >= 1, "event duration must be >= 1");
    if n == 0 {
        return Ok(Vec::new());
    }
    let slot = region.len() / n;
    let margin = min_gap.div_ceil(2);
    if slot < duration + 2 * margin {
        bail!(
            "cannot place {n} events of length {duration} with gap {min_gap} in {} timesteps",
            region.len()
        );
    }
    let slack = slot - duration - 2 * margin;
    Ok((0..n)
        .map(|i| region.start + i * slot + margin + rng.random_range(0..=slack))
        .collect())
}

/// Inject `plan` into `series` after `protect.end`. Magnitudes use the σ of
/// `protect`, which stays clean.
pub fn inject_batch(
    series: &SeriesMatrix,
    protect: Range<usize>,
    plan: &EventPlan,
    seed: u64,
) -> anyhow::Result<(SeriesMatrix, Vec<AnomalyEvent>, Vec<AnomalyKind>)> {
    ensure!(!plan.kinds.is_empty(), "event plan lists no kinds");
    let reference = fit_normalization(series, protect.clone(), DEFAULT_STD_FLOOR)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7e7_5eed);
    let mut kinds: Vec<AnomalyKind> = plan
        .kinds
        .iter()
        .flat_map(|&k| std::iter::repeat_n(k, plan.per_kind))
        .collect();
    kinds.shuffle(&mut rng);
    let onsets = place_events(
        protect.end..series.len(),
        kinds.len(),
        plan.duration,
        plan.min_gap,
        &mut rng,
    )?;
    let mut current = series.clone();
    let mut events = Vec::with_capacity(kinds.len());
    for (&kind, &onset) in kinds.iter().zip(&onsets) {
        let sensor = rng.random_range(0..series.n_sensors());
        let spec = InjectionSpec::new(
            kind,
            sensor,
            onset,
            onset + plan.duration,
            plan.magnitude,
            rng.random(),
        );
        let (next, event) = inject(&current, &spec, &reference)?;
        current = next;
        events.push(event);
    }
    check_disjoint(&protect, &events)?;
    Ok((current, events, kinds))
}

/// Apply explicit injections in order. Magnitudes use the σ of `reference`.
pub fn inject_requests(
    series: &SeriesMatrix,
    reference: Range<usize>,
    requests: &[InjectionRequest],
) -> anyhow::Result<(SeriesMatrix, Vec<AnomalyEvent>)> {
    let stats = fit_normalization(series, reference, DEFAULT_STD_FLOOR)?;
    let mut current = series.clone();
    let mut events: Vec<AnomalyEvent> = Vec::with_capacity(requests.len());
    for req in requests {
        let spec = req.resolve(series)?;
        let (next, event) = inject(&current, &spec, &stats)?;
        if let Some(prev) = events.iter().find(|e| e.intersects(&event.interval())) {
            bail!(
                "injection {:?} overlaps earlier injection {:?}",
                event.interval(),
                prev.interval()
            );
        }
        current = next;
        events.push(event);
    }
    Ok((current, events))
}

impl SynthScenario {
    pub fn system(&self) -> anyhow::Result<LatentFactorSystem> {
        Ok(LatentFactorSystem::grouped(
            self.sensors,
            self.factors,
            self.smoothness,
            self.noise,
            self.seed,
        )?)
    }

    pub fn build(&self) -> anyhow::Result<SynthSuite> {
        ensure!(self.train_length < self.length, "train_length must be below length");
        let raw = generate(&self.system()?, self.length)?;
        let clean = raw.with_values(raw.values().mapv(|v| v + self.offset))?;
        let (series, events, kinds) =
            inject_batch(&clean, 0..self.train_length, &self.events, self.seed)?;
        Ok(SynthSuite {
            clean,
            series,
            events,
            kinds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthScenario {
        SynthScenario {
            length: 3000,
            train_length: 1000,
            events: EventPlan {
                per_kind: 2,
                ..EventPlan::default()
            },
            ..SynthScenario::default()
        }
    }

    #[test]
    fn suite_is_seeded_and_disjoint() {
        let s = small();
        let a = s.build().unwrap();
        assert_eq!(a, s.build().unwrap());
        assert_eq!(a.events.len(), 12);
        for (i, e) in a.events.iter().enumerate() {
            assert!(e.onset >= 1000);
            for f in &a.events[i + 1..] {
                assert!(!e.intersects(&f.interval()));
                assert!(f.onset >= e.onset + e.duration + s.events.min_gap);
            }
        }
        for kind in ALL_KINDS {
            assert_eq!(a.kinds.iter().filter(|&&k| k == kind).count(), 2);
        }
    }

    #[test]
    fn faults_stay_inside_their_cells() {
        let a = small().build().unwrap();
        let (clean, dirty) = (a.clean.values(), a.series.values());
        for ((t, j), &v) in dirty.indexed_iter() {
            let inside = a
                .events
                .iter()
                .any(|e| e.interval().contains(&t) && e.ground_truth.contains(&j));
            if !inside {
                assert_eq!(v.to_bits(), clean[[t, j]].to_bits(), "cell ({t}, {j})");
            }
        }
    }

    #[test]
    fn placement_rejects_overfull_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(place_events(0..100, 5, 10, 20, &mut rng).is_err());
        let onsets = place_events(0..1000, 5, 10, 20, &mut rng).unwrap();
        assert_eq!(onsets.len(), 5);
        assert!(onsets.windows(2).all(|p| p[1] >= p[0] + 30));
    }
}
