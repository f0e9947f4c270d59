//! Keyframe selection and source-view ordering driven by the pose distance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{pose_distance, Intrinsics, Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub timestamp: usize,
}

/// Frames in capture order with strictly increasing ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.windows(2).any(|w| w[1].id <= w[0].id) {
            return Err(Error::domain("trajectory frame ids must be strictly increasing"));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, id: usize) -> Option<&Frame> {
        self.frames
            .binary_search_by_key(&id, |f| f.id)
            .ok()
            .map(|i| &self.frames[i])
    }

    fn pose(&self, id: usize) -> Result<&Pose> {
        self.frame(id)
            .map(|f| &f.pose)
            .ok_or_else(|| Error::domain(format!("frame {id} not in trajectory")))
    }
}

/// Default thresholds; placeholders rather than tuned values.
pub const DEFAULT_T_MIN: f64 = 0.125;
pub const DEFAULT_T_MAX: f64 = 0.325;

const THRESHOLD_SLACK: f64 = 1e-9;

/// Online keyframe selection.
///
/// Frame 0 is always a keyframe. A later frame becomes one when its pose
/// distance to the last keyframe reaches `t_min`; a frame beyond `t_max` is
/// always taken.
pub fn select_keyframes(traj: &Trajectory, t_min: f64, t_max: f64) -> Result<Vec<usize>> {
    if !(0.0 < t_min && t_min < t_max) {
        return Err(Error::domain(format!(
            "keyframe thresholds must satisfy 0 < t_min < t_max, got {t_min}, {t_max}"
        )));
    }
    let first = traj
        .frames
        .first()
        .ok_or_else(|| Error::domain("cannot select keyframes from an empty trajectory"))?;
    let mut keyframes = vec![first.id];
    let mut last = &first.pose;
    for f in &traj.frames[1..] {
        let d = pose_distance(last, &f.pose);
        // relative slack so exact ties survive rounding of the pose arithmetic
        if d >= t_min * (1.0 - THRESHOLD_SLACK) || d > t_max {
            keyframes.push(f.id);
            last = &f.pose;
        }
    }
    Ok(keyframes)
}

/// The `n` candidates closest to `ref_id` in pose distance, nearest first,
/// ties broken by the smaller frame id.
pub fn order_sources(traj: &Trajectory, ref_id: usize, candidates: &[usize], n: usize) -> Result<Vec<usize>> {
    if candidates.is_empty() || n == 0 {
        return Err(Error::domain("order_sources needs at least one candidate and n >= 1"));
    }
    if candidates.contains(&ref_id) {
        return Err(Error::domain(format!("reference frame {ref_id} is among its own candidates")));
    }
    let ref_pose = traj.pose(ref_id)?;
    let mut scored = candidates
        .iter()
        .map(|&c| Ok((pose_distance(ref_pose, traj.pose(c)?), c)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, c)| c).collect())
}

/// Seeded uniform permutation, used to ablate the source ordering.
pub fn shuffle_sources(list: &[usize], seed: u64) -> Vec<usize> {
    let mut out = list.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Keyframes and, for each, its ordered source keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSet {
    pub keyframes: Vec<usize>,
    /// `(reference, ordered sources)`; references with no candidate are omitted.
    pub sources: Vec<(usize, Vec<usize>)>,
}

impl KeyframeSet {
    /// Build source lists from the selected keyframes. In online mode only
    /// earlier keyframes are candidates.
    pub fn build(traj: &Trajectory, keyframes: Vec<usize>, n: usize, online: bool) -> Result<Self> {
        let mut sources = Vec::new();
        for (i, &kf) in keyframes.iter().enumerate() {
            let candidates: Vec<usize> = if online {
                keyframes[..i].to_vec()
            } else {
                keyframes.iter().copied().filter(|&c| c != kf).collect()
            };
            if candidates.is_empty() {
                continue;
            }
            sources.push((kf, order_sources(traj, kf, &candidates, n)?));
        }
        Ok(Self { keyframes, sources })
    }

    /// One line per reference: `ref_id: src_id src_id ...`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (r, srcs) in &self.sources {
            s.push_str(&r.to_string());
            s.push(':');
            for id in srcs {
                s.push(' ');
                s.push_str(&id.to_string());
            }
            s.push('\n');
        }
        s
    }
}
