//! Segmentation of episodes into safety-assessment data and the unsafety
//! score.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, ClosedLoopSystem, Episode};
use crate::error::{Error, Result};
use crate::json;

/// Current state followed by the next `H` reference points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyAssessmentInput {
    pub state: Vec<f64>,
    pub desired: Vec<Vec<f64>>,
}

impl SafetyAssessmentInput {
    /// Input at step `k` of `episode`, padding the reference by holding its
    /// last point.
    pub fn at(state: &[f64], desired: &crate::dynamics::DesiredTrajectory, k: usize, horizon: usize) -> Self {
        SafetyAssessmentInput {
            state: state.to_vec(),
            desired: (k..k + horizon).map(|j| desired.at(j).to_vec()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.state.len() + self.desired.iter().map(Vec::len).sum::<usize>()
    }

    /// `[s; z*_0; ...; z*_{H-1}]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.state);
        for p in &self.desired {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.state.iter().chain(self.desired.iter().flatten()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub input: SafetyAssessmentInput,
    pub realized: Vec<Vec<f64>>,
    pub episode: usize,
    pub start: usize,
    /// The realized outputs ran past the episode's termination and were padded.
    pub terminal: bool,
}

impl Segment {
    /// Tracking error `z* - z` at each of the `H` steps.
    pub fn errors(&self) -> Vec<Vec<f64>> {
        self.input
            .desired
            .iter()
            .zip(&self.realized)
            .map(|(d, r)| d.iter().zip(r).map(|(a, b)| a - b).collect())
            .collect()
    }

    pub fn horizon(&self) -> usize {
        self.realized.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDatum {
    pub segment: Segment,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackDatum {
    pub segment: Segment,
    /// Score on the real system.
    pub lambda: f64,
    /// Score on the nominal replay.
    pub lambda_hat: f64,
}

impl FeedbackDatum {
    pub fn discrepancy(&self) -> f64 {
        (self.lambda - self.lambda_hat).abs()
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("discount {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// `0` for a safe episode, otherwise `gamma^R` with `R` the number of steps
/// from `start` to the termination.
pub fn unsafety_score(episode: &Episode, start: usize, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if start > episode.termination {
        return Err(Error::invalid(format!(
            "segment start {start} lies beyond termination {}",
            episode.termination
        )));
    }
    if episode.safe {
        return Ok(0.0);
    }
    Ok(discount(gamma, episode.termination - start))
}

/// `gamma^r` by repeated multiplication. `powi` may round differently
/// depending on whether the compiler folds it.
pub fn discount(gamma: f64, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, _| acc * gamma)
}

/// Windows of `horizon` steps starting at `0, stride, 2*stride, ..` up to the
/// episode's last start. Reference and realized outputs are padded by holding
/// their last value.
pub fn segment_episode(episode: &Episode, horizon: usize, stride: usize) -> Result<Vec<Segment>> {
    if horizon == 0 {
        return Err(Error::invalid("assessment horizon must be at least 1"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let last_output = episode.outputs.len() - 1;
    let segments = (0..=episode.last_start())
        .step_by(stride)
        .map(|k| {
            let realized = (k..k + horizon)
                .map(|j| episode.outputs[j.min(last_output)].clone())
                .collect();
            Segment {
                input: SafetyAssessmentInput::at(&episode.states[k], &episode.desired, k, horizon),
                realized,
                episode: episode.id,
                start: k,
                terminal: !episode.safe && k + horizon - 1 > episode.termination,
            }
        })
        .collect();
    Ok(segments)
}

/// Training data of every episode, ordered by episode then start index.
pub fn build_training_set(
    episodes: &[Episode],
    horizon: usize,
    gamma: f64,
    stride: usize,
) -> Result<Vec<TrainingDatum>> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_gamma(gamma)?;
    let per_episode: Vec<Vec<TrainingDatum>> = episodes
        .par_iter()
        .map(|ep| {
            segment_episode(ep, horizon, stride)?
                .into_iter()
                .map(|segment| {
                    let lambda = unsafety_score(ep, segment.start, gamma)?;
                    Ok(TrainingDatum { segment, lambda })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Score at `start` of a replay that may have failed before `start`; a replay
/// that already failed scores 1.
fn replay_score(replay: &Episode, start: usize, gamma: f64) -> Result<f64> {
    if !replay.safe && start > replay.termination {
        return Ok(1.0);
    }
    unsafety_score(replay, start.min(replay.termination), gamma)
}

/// Replays the nominal system, without disturbances, from the real episode's
/// initial state along its reference.
pub fn nominal_replay(real: &Episode, nominal: &ClosedLoopSystem) -> Result<Episode> {
    if real.initial_state.len() != nominal.state_dim()
        || real.desired.0.first().map(Vec::len) != Some(nominal.output_dim())
    {
        return Err(Error::Incompatible(format!(
            "episode dimensions do not match system {}",
            nominal.name()
        )));
    }
    let zero = nominal.zero_disturbance();
    let mut replay = simulate(nominal, nominal.safe_set(), &real.initial_state, &real.desired, |_| zero.clone())?;
    replay.id = real.id;
    Ok(replay)
}

/// Feedback data of one real episode: segments of the real rollout with the
/// real score and the score of the nominal replay at the same start.
pub fn build_feedback_set(
    real: &Episode,
    nominal: &ClosedLoopSystem,
    horizon: usize,
    gamma: f64,
    stride: usize,
) -> Result<Vec<FeedbackDatum>> {
    check_gamma(gamma)?;
    let replay = nominal_replay(real, nominal)?;
    segment_episode(real, horizon, stride)?
        .into_iter()
        .map(|segment| {
            let lambda = unsafety_score(real, segment.start, gamma)?;
            let lambda_hat = replay_score(&replay, segment.start, gamma)?;
            Ok(FeedbackDatum {
                segment,
                lambda,
                lambda_hat,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub gamma: f64,
    pub stride: usize,
    pub n_t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub state: Vec<f64>,
    pub desired: Vec<Vec<f64>>,
    pub realized: Vec<Vec<f64>>,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hat: Option<f64>,
    pub episode: usize,
    pub start: usize,
    #[serde(default)]
    pub terminal: bool,
}

impl DatasetRecord {
    fn segment(&self) -> Segment {
        Segment {
            input: SafetyAssessmentInput {
                state: self.state.clone(),
                desired: self.desired.clone(),
            },
            realized: self.realized.clone(),
            episode: self.episode,
            start: self.start,
            terminal: self.terminal,
        }
    }

    fn from_segment(segment: &Segment, lambda: f64, lambda_hat: Option<f64>) -> Self {
        DatasetRecord {
            state: segment.input.state.clone(),
            desired: segment.input.desired.clone(),
            realized: segment.realized.clone(),
            lambda,
            lambda_hat,
            episode: segment.episode,
            start: segment.start,
            terminal: segment.terminal,
        }
    }
}

/// On-disk dataset: `{ "meta": {..}, "data": [..] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub meta: DatasetMeta,
    pub data: Vec<DatasetRecord>,
}

impl DatasetFile {
    pub fn from_training(system: &str, horizon: usize, gamma: f64, stride: usize, data: &[TrainingDatum]) -> Self {
        DatasetFile {
            meta: DatasetMeta {
                system: system.to_string(),
                horizon,
                gamma,
                stride,
                n_t: data.len(),
            },
            data: data
                .iter()
                .map(|d| DatasetRecord::from_segment(&d.segment, d.lambda, None))
                .collect(),
        }
    }

    pub fn from_feedback(system: &str, horizon: usize, gamma: f64, stride: usize, data: &[FeedbackDatum]) -> Self {
        DatasetFile {
            meta: DatasetMeta {
                system: system.to_string(),
                horizon,
                gamma,
                stride,
                n_t: data.len(),
            },
            data: data
                .iter()
                .map(|d| DatasetRecord::from_segment(&d.segment, d.lambda, Some(d.lambda_hat)))
                .collect(),
        }
    }

    pub fn training(&self) -> Vec<TrainingDatum> {
        self.data
            .iter()
            .map(|r| TrainingDatum {
                segment: r.segment(),
                lambda: r.lambda,
            })
            .collect()
    }

    pub fn feedback(&self) -> Result<Vec<FeedbackDatum>> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let lambda_hat = r
                    .lambda_hat
                    .ok_or_else(|| Error::invalid(format!("record {i}: missing field `lambda_hat`")))?;
                Ok(FeedbackDatum {
                    segment: r.segment(),
                    lambda: r.lambda,
                    lambda_hat,
                })
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let h = self.meta.horizon;
        let n_s = self.data[0].state.len();
        for (i, r) in self.data.iter().enumerate() {
            let in_range = |v: f64| (0.0..=1.0).contains(&v);
            if !in_range(r.lambda) || r.lambda_hat.is_some_and(|v| !in_range(v)) {
                return Err(Error::invalid(format!("record {i}: score outside [0, 1]")));
            }
            if r.state.len() != n_s || r.desired.len() != h || r.realized.len() != h {
                return Err(Error::invalid(format!("record {i}: inconsistent dimensions")));
            }
        }
        Ok(())
    }
}

pub fn save_dataset(data: &DatasetFile, path: &Path) -> Result<()> {
    json::write_exact(path, data)
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let file: DatasetFile = json::read(path)?;
    file.validate()?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::plan_trajectory;

    /// Synthetic 1-D episode: output equals state, reference is a ramp.
    fn episode(horizon: usize, termination: usize, safe: bool) -> Episode {
        let desired = plan_trajectory(&[0.0], &[1.0], horizon).unwrap();
        let states: Vec<Vec<f64>> = (0..=termination).map(|k| vec![k as f64 * 0.01]).collect();
        Episode {
            id: 7,
            seed: 0,
            initial_state: states[0].clone(),
            desired,
            outputs: states.clone(),
            states,
            termination,
            safe,
            disturbances: vec![],
            diverged: false,
        }
    }

    #[test]
    fn score_values() {
        let safe = episode(30, 30, true);
        assert_eq!(unsafety_score(&safe, 12, 0.99).unwrap(), 0.0);
        let unsafe_ep = episode(30, 12, false);
        assert_eq!(unsafety_score(&unsafe_ep, 12, 0.99).unwrap(), 1.0);
        assert!((unsafety_score(&unsafe_ep, 2, 0.99).unwrap() - 0.904_382_075_008_804_5).abs() < 1e-15);
        assert!(unsafety_score(&unsafe_ep, 13, 0.99).is_err());
        assert!(unsafety_score(&unsafe_ep, 0, 1.5).is_err());
    }

    #[test]
    fn exact_tiling() {
        let ep = episode(30, 30, true);
        let segs = segment_episode(&ep, 10, 10).unwrap();
        assert_eq!(segs.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 10, 20]);
        assert!(segs.iter().all(|s| !s.terminal && s.horizon() == 10));
    }

    #[test]
    fn short_unsafe_episode_segments() {
        let ep = episode(30, 7, false);
        let segs = segment_episode(&ep, 10, 1).unwrap();
        assert_eq!(segs.len(), 8);
        assert!(segs.iter().all(|s| s.terminal));
        let rs: Vec<usize> = segs.iter().map(|s| ep.termination - s.start).collect();
        assert_eq!(rs, vec![7, 6, 5, 4, 3, 2, 1, 0]);
        // realized outputs hold the terminal output
        assert_eq!(segs[7].realized, vec![vec![0.07]; 10]);
    }

    #[test]
    fn sliding_windows_pad_reference() {
        let ep = episode(30, 30, true);
        let segs = segment_episode(&ep, 10, 1).unwrap();
        assert_eq!(segs.len(), 30);
        let last = ep.desired.0[29].clone();
        for s in &segs {
            let padded = s.start + 10 > 30;
            assert_eq!(s.input.desired[9] == last, padded || s.start == 20);
        }
        assert!(segment_episode(&ep, 0, 1).is_err());
        assert!(segment_episode(&ep, 1, 0).is_err());
    }

    #[test]
    fn segment_count_matches_enumeration() {
        for t_prime in 0..40 {
            let ep = episode(40, t_prime, false);
            for stride in 1..6 {
                let brute = (0..=t_prime).filter(|k| k % stride == 0).count();
                assert_eq!(segment_episode(&ep, 10, stride).unwrap().len(), brute);
            }
            assert_eq!(segment_episode(&ep, 10, 1).unwrap().len(), t_prime + 1);
        }
    }

    #[test]
    fn training_scores_per_segment() {
        let safe = build_training_set(&[episode(30, 30, true)], 10, 0.99, 10).unwrap();
        assert_eq!(safe.len(), 3);
        assert!(safe.iter().all(|d| d.lambda == 0.0));

        let data = build_training_set(&[episode(30, 20, false)], 10, 0.99, 10).unwrap();
        let scores: Vec<f64> = data.iter().map(|d| d.lambda).collect();
        assert_eq!(scores, vec![discount(0.99, 20), discount(0.99, 10), 1.0]);
        assert!((scores[0] - 0.99f64.powi(20)).abs() < 1e-15);
        assert!(matches!(build_training_set(&[], 10, 0.99, 1), Err(Error::EmptyDataset)));
    }

    #[test]
    fn errors_are_reference_minus_realized() {
        let ep = episode(30, 30, true);
        let seg = &segment_episode(&ep, 3, 1).unwrap()[4];
        let e = seg.errors();
        for j in 0..3 {
            assert_eq!(e[j][0], seg.input.desired[j][0] - seg.realized[j][0]);
        }
    }
}
