//! Picks the frame whose body pose is closest to a reference posture,
//! preferring frames where more limbs are visible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Joint position in pixels with detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl From<[f64; 3]> for Joint {
    fn from([x, y, confidence]: [f64; 3]) -> Self {
        Self { x, y, confidence }
    }
}

impl From<Joint> for [f64; 3] {
    fn from(j: Joint) -> Self {
        [j.x, j.y, j.confidence]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub frame_index: usize,
    pub joints: BTreeMap<String, Joint>,
}

impl KeypointFrame {
    pub fn validate(&self) -> Result<()> {
        for (name, j) in &self.joints {
            if !(j.x.is_finite() && j.y.is_finite()) {
                return Err(invalid!("frame {}: joint {name} has non-finite coordinates", self.frame_index));
            }
            if !(0.0..=1.0).contains(&j.confidence) {
                return Err(invalid!(
                    "frame {}: joint {name} confidence {} outside [0, 1]",
                    self.frame_index,
                    j.confidence
                ));
            }
        }
        Ok(())
    }
}

/// Angle at joint `b` between the limbs towards `a` and `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTripleSpec {
    pub name: String,
    pub triple: [String; 3],
    pub target_angle: f64,
}

impl JointTripleSpec {
    pub fn new(name: &str, a: &str, b: &str, c: &str, target_angle: f64) -> Self {
        Self {
            name: name.into(),
            triple: [a.into(), b.into(), c.into()],
            target_angle,
        }
    }
}

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.3;

/// Arms stretched out and legs straight: shoulders, elbows and hips at 180°.
pub fn default_specs() -> Vec<JointTripleSpec> {
    let mut specs = Vec::new();
    for side in ["left", "right"] {
        let j = |part: &str| format!("{side}_{part}");
        specs.push(JointTripleSpec::new(&j("shoulder"), "neck", &j("shoulder"), &j("elbow"), 180.0));
        specs.push(JointTripleSpec::new(&j("elbow"), &j("shoulder"), &j("elbow"), &j("wrist"), 180.0));
        specs.push(JointTripleSpec::new(&j("hip"), &j("shoulder"), &j("hip"), &j("knee"), 180.0));
    }
    specs
}

/// Angle ABC in degrees, in `[0, 180]`.
pub fn calculate_angle(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Result<f64> {
    let (ux, uy) = (a.0 - b.0, a.1 - b.1);
    let (vx, vy) = (c.0 - b.0, c.1 - b.1);
    let (nu, nv) = (ux.hypot(uy), vx.hypot(vy));
    if nu == 0.0 || nv == 0.0 {
        return Err(invalid!("zero-length limb at ({}, {})", b.0, b.1));
    }
    let cos = ((ux * vx + uy * vy) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseScore {
    pub frame_index: usize,
    /// Sum of absolute deviations from the target angles, in degrees.
    pub score: f64,
    pub visible_parts: usize,
}

/// Scores one frame. Triples with a joint below `conf_threshold`, a missing
/// joint, or coincident points are skipped.
pub fn perfect_pose_score(frame: &KeypointFrame, specs: &[JointTripleSpec], conf_threshold: f64) -> Result<PoseScore> {
    if specs.is_empty() {
        return Err(invalid!("no joint triples to score"));
    }
    let mut score = 0.0;
    let mut visible_parts = 0;
    for spec in specs {
        let joints: Option<Vec<&Joint>> = spec
            .triple
            .iter()
            .map(|n| frame.joints.get(n).filter(|j| j.confidence >= conf_threshold))
            .collect();
        let Some(j) = joints else { continue };
        let Ok(angle) = calculate_angle((j[0].x, j[0].y), (j[1].x, j[1].y), (j[2].x, j[2].y)) else {
            continue;
        };
        score += (angle - spec.target_angle).abs();
        visible_parts += 1;
    }
    Ok(PoseScore {
        frame_index: frame.frame_index,
        score,
        visible_parts,
    })
}

/// Scores every frame and orders them best first: most visible parts, then
/// lowest score, then earliest frame.
pub fn rank_frames(frames: &[KeypointFrame], specs: &[JointTripleSpec], conf_threshold: f64) -> Result<Vec<PoseScore>> {
    let mut scores = frames
        .iter()
        .map(|f| perfect_pose_score(f, specs, conf_threshold))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| {
        b.visible_parts
            .cmp(&a.visible_parts)
            .then(a.score.total_cmp(&b.score))
            .then(a.frame_index.cmp(&b.frame_index))
    });
    Ok(scores)
}

pub fn select_best_frame(frames: &[KeypointFrame], specs: &[JointTripleSpec], conf_threshold: f64) -> Result<usize> {
    if frames.is_empty() {
        return Err(invalid!("no frames to choose from"));
    }
    Ok(rank_frames(frames, specs, conf_threshold)?[0].frame_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame<S: AsRef<str>>(index: usize, joints: &[(S, f64, f64, f64)]) -> KeypointFrame {
        KeypointFrame {
            frame_index: index,
            joints: joints
                .iter()
                .map(|(n, x, y, c)| {
                    let joint = Joint { x: *x, y: *y, confidence: *c };
                    (n.as_ref().to_string(), joint)
                })
                .collect(),
        }
    }

    #[test]
    fn reference_angles() {
        let o = (0.0, 0.0);
        assert_eq!(calculate_angle((1.0, 0.0), o, (-1.0, 0.0)).unwrap(), 180.0);
        assert!((calculate_angle((1.0, 0.0), o, (0.0, 1.0)).unwrap() - 90.0).abs() < 1e-12);
        assert!((calculate_angle((1.0, 0.0), o, (1.0, 1.0)).unwrap() - 45.0).abs() < 1e-12);
        assert!(calculate_angle(o, o, (1.0, 1.0)).is_err());
    }

    fn one_spec() -> Vec<JointTripleSpec> {
        vec![JointTripleSpec::new("left_elbow", "a", "b", "c", 180.0)]
    }

    #[test]
    fn single_right_angle_scores_ninety() {
        let f = frame(0, &[("a", 1.0, 0.0, 0.9), ("b", 0.0, 0.0, 0.9), ("c", 0.0, 2.0, 0.9)]);
        let s = perfect_pose_score(&f, &one_spec(), 0.3).unwrap();
        assert!((s.score - 90.0).abs() < 1e-9);
        assert_eq!(s.visible_parts, 1);
    }

    #[test]
    fn hidden_and_degenerate_triples_are_skipped() {
        let low = frame(0, &[("a", 1.0, 0.0, 0.1), ("b", 0.0, 0.0, 0.9), ("c", 0.0, 2.0, 0.9)]);
        let s = perfect_pose_score(&low, &one_spec(), 0.3).unwrap();
        assert_eq!((s.score, s.visible_parts), (0.0, 0));
        let missing = frame(0, &[("a", 1.0, 0.0, 0.9)]);
        assert_eq!(perfect_pose_score(&missing, &one_spec(), 0.3).unwrap().visible_parts, 0);
        let same = frame(0, &[("a", 0.0, 0.0, 0.9), ("b", 0.0, 0.0, 0.9), ("c", 0.0, 2.0, 0.9)]);
        assert_eq!(perfect_pose_score(&same, &one_spec(), 0.3).unwrap().visible_parts, 0);
        assert!(perfect_pose_score(&same, &[], 0.3).is_err());
    }

    #[test]
    fn straight_pose_is_perfect() {
        // Arms out horizontally, legs straight down below the shoulders.
        let mut joints = vec![("neck".to_string(), 0.0, 0.0, 1.0)];
        for (side, s) in [("left", -1.0), ("right", 1.0)] {
            for (part, x, y) in [("shoulder", s, 0.0), ("elbow", 2.0 * s, 0.0), ("wrist", 3.0 * s, 0.0), ("hip", s, 3.0), ("knee", s, 6.0)] {
                joints.push((format!("{side}_{part}"), x, y, 1.0));
            }
        }
        let f = frame(0, &joints);
        let s = perfect_pose_score(&f, &default_specs(), DEFAULT_CONF_THRESHOLD).unwrap();
        assert_eq!(s.visible_parts, 6);
        assert!(s.score.abs() < 1e-9);
    }

    /// Frame with `visible` triples whose deviations sum to `deviation`.
    fn scored(index: usize, visible: usize, deviation: f64) -> KeypointFrame {
        let theta = (180.0 - deviation / visible.max(1) as f64).to_radians();
        let mut joints = Vec::new();
        for v in 0..visible {
            joints.push((format!("a{v}"), 1.0, 0.0, 1.0));
            joints.push((format!("b{v}"), 0.0, 0.0, 1.0));
            joints.push((format!("c{v}"), theta.cos(), theta.sin(), 1.0));
        }
        frame(index, &joints)
    }

    fn specs(n: usize) -> Vec<JointTripleSpec> {
        (0..n)
            .map(|v| JointTripleSpec::new(&format!("p{v}"), &format!("a{v}"), &format!("b{v}"), &format!("c{v}"), 180.0))
            .collect()
    }

    #[test]
    fn visibility_beats_score() {
        let frames = vec![scored(0, 6, 0.0), scored(1, 8, 50.0)];
        assert_eq!(select_best_frame(&frames, &specs(8), 0.3).unwrap(), 1);
    }

    #[test]
    fn lower_score_wins_on_equal_visibility() {
        let frames = vec![scored(3, 4, 30.0), scored(7, 4, 10.0)];
        assert_eq!(select_best_frame(&frames, &specs(4), 0.3).unwrap(), 7);
        let tie = vec![scored(9, 4, 10.0), scored(2, 4, 10.0)];
        assert_eq!(select_best_frame(&tie, &specs(4), 0.3).unwrap(), 2);
        assert_eq!(select_best_frame(&[scored(5, 1, 99.0)], &specs(1), 0.3).unwrap(), 5);
        assert!(select_best_frame(&[], &specs(1), 0.3).is_err());
    }

    #[test]
    fn joint_json_is_a_triple() {
        let j: Joint = serde_json::from_str("[1.5, 2, 0.25]").unwrap();
        assert_eq!(j, Joint { x: 1.5, y: 2.0, confidence: 0.25 });
        assert_eq!(serde_json::to_string(&j).unwrap(), "[1.5,2.0,0.25]");
        assert!(serde_json::from_str::<Joint>("[1, 2]").is_err());
    }

    proptest! {
        #[test]
        fn angle_symmetric(ax in -50.0f64..50.0, ay in -50.0f64..50.0, cx in -50.0f64..50.0, cy in -50.0f64..50.0) {
            let b = (0.3, -0.2);
            prop_assume!((ax - b.0).hypot(ay - b.1) > 1e-3 && (cx - b.0).hypot(cy - b.1) > 1e-3);
            let l = calculate_angle((ax, ay), b, (cx, cy)).unwrap();
            let r = calculate_angle((cx, cy), b, (ax, ay)).unwrap();
            prop_assert_eq!(l, r);
            prop_assert!((0.0..=180.0).contains(&l));
        }

        #[test]
        fn closer_angle_never_scores_worse(a in 0.0f64..180.0, t in 0.0f64..1.0) {
            let target = 180.0;
            let closer = a + (target - a) * t;
            let mk = |deg: f64| {
                let r = deg.to_radians();
                frame(0, &[("a", 1.0, 0.0, 1.0), ("b", 0.0, 0.0, 1.0), ("c", r.cos(), r.sin(), 1.0)])
            };
            let s0 = perfect_pose_score(&mk(a), &one_spec(), 0.3).unwrap().score;
            let s1 = perfect_pose_score(&mk(closer), &one_spec(), 0.3).unwrap().score;
            prop_assert!(s1 <= s0 + 1e-9);
        }
    }
}
