//! Kinematic pick-and-place waypoints.

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geom3::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointLabel {
    Approach,
    Grasp,
    Lift,
    Transit,
    PlaceApproach,
    Place,
    Retreat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperAction {
    None,
    Open,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub label: WaypointLabel,
    /// `robot_base_to_gripper`.
    pub pose: Pose,
    pub gripper: GripperAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickPlacePlan {
    pub waypoints: Vec<Waypoint>,
}

impl PickPlacePlan {
    pub fn waypoint(&self, label: WaypointLabel) -> Option<&Waypoint> {
        self.waypoints.iter().find(|w| w.label == label)
    }

    /// Straight-line distance covered by the transit move.
    pub fn transit_length(&self) -> f64 {
        match (self.waypoint(WaypointLabel::Lift), self.waypoint(WaypointLabel::Transit)) {
            (Some(a), Some(b)) => (b.pose.translation() - a.pose.translation()).norm(),
            _ => 0.0,
        }
    }
}

/// Waypoints for picking at `grasp` and releasing at `place` (both
/// `robot_base_to_gripper`).
///
/// Approach and retreat back off along the gripper's -z axis; lift and
/// transit move straight up in the base frame.
pub fn plan_pick_place(grasp: &Pose, place: &Pose, approach_offset: f64) -> Result<PickPlacePlan, PipelineError> {
    if !(approach_offset.is_finite() && approach_offset > 0.0) {
        return Err(PipelineError::InvalidSpec(format!("approach_offset must be positive, got {approach_offset}")));
    }
    if !grasp.is_finite() || !place.is_finite() {
        return Err(PipelineError::InvalidSpec("grasp and place poses must be finite".into()));
    }
    let back_off = Pose::from_translation(Vec3::new(0.0, 0.0, -approach_offset));
    let up = Pose::from_translation(Vec3::new(0.0, 0.0, approach_offset));
    let wp = |label, pose, gripper| Waypoint { label, pose, gripper };
    Ok(PickPlacePlan {
        waypoints: vec![
            wp(WaypointLabel::Approach, grasp.compose(&back_off), GripperAction::Open),
            wp(WaypointLabel::Grasp, *grasp, GripperAction::Close),
            wp(WaypointLabel::Lift, up.compose(grasp), GripperAction::None),
            wp(WaypointLabel::Transit, up.compose(place), GripperAction::None),
            wp(WaypointLabel::PlaceApproach, place.compose(&back_off), GripperAction::None),
            wp(WaypointLabel::Place, *place, GripperAction::Open),
            wp(WaypointLabel::Retreat, place.compose(&back_off), GripperAction::None),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3::rodrigues_exp;
    use crate::sampling::{random_pose, seeded_rng};
    use proptest::prelude::*;

    const ORDER: [WaypointLabel; 7] = [
        WaypointLabel::Approach,
        WaypointLabel::Grasp,
        WaypointLabel::Lift,
        WaypointLabel::Transit,
        WaypointLabel::PlaceApproach,
        WaypointLabel::Place,
        WaypointLabel::Retreat,
    ];

    #[test]
    fn identity_grasp_approach() {
        let plan = plan_pick_place(&Pose::identity(), &Pose::from_translation(Vec3::new(0.3, 0.0, 0.0)), 0.1).unwrap();
        let a = plan.waypoint(WaypointLabel::Approach).unwrap();
        assert_eq!(*a.pose.translation(), Vec3::new(0.0, 0.0, -0.1));
        // Hand-composed: rotated grasp backs off along its own -z.
        let g = Pose::new(rodrigues_exp(&Vec3::new(std::f64::consts::PI, 0.0, 0.0)), Vec3::new(0.5, 0.1, 0.05));
        let plan = plan_pick_place(&g, &g, 0.1).unwrap();
        let a = plan.waypoint(WaypointLabel::Approach).unwrap();
        assert!((a.pose.translation() - Vec3::new(0.5, 0.1, 0.15)).norm() <= 1e-12);
        assert_eq!(a.pose.rotation(), g.rotation());
    }

    #[test]
    fn degenerate_place_is_valid() {
        let g = random_pose(&mut seeded_rng(1), 0.5);
        let plan = plan_pick_place(&g, &g, 0.1).unwrap();
        assert_eq!(plan.transit_length(), 0.0);
        assert!(plan.waypoints.iter().all(|w| w.pose.is_finite()));
    }

    #[test]
    fn bad_offset() {
        for off in [0.0, -0.1, f64::NAN] {
            assert!(plan_pick_place(&Pose::identity(), &Pose::identity(), off).is_err());
        }
    }

    proptest! {
        #[test]
        fn structure_holds(seed in any::<u64>(), offset in 0.01f64..0.3) {
            let mut rng = seeded_rng(seed);
            let grasp = random_pose(&mut rng, 1.0);
            let place = random_pose(&mut rng, 1.0);
            let plan = plan_pick_place(&grasp, &place, offset).unwrap();
            let labels: Vec<_> = plan.waypoints.iter().map(|w| w.label).collect();
            prop_assert_eq!(labels, ORDER.to_vec());
            prop_assert_eq!(plan.waypoint(WaypointLabel::Grasp).unwrap().gripper, GripperAction::Close);
            prop_assert_eq!(plan.waypoint(WaypointLabel::Place).unwrap().gripper, GripperAction::Open);
            let a = plan.waypoint(WaypointLabel::Approach).unwrap();
            prop_assert!(a.pose.rotation().angle_to(grasp.rotation()) <= 1e-12);
            prop_assert!(((a.pose.translation() - grasp.translation()).norm() - offset).abs() <= 1e-12);
            prop_assert!(plan.waypoints.iter().all(|w| w.pose.is_finite()));
        }
    }
}
