//! Learning-based quadrotor flight through narrow tilted gaps.
//!
//! The crate covers the full pipeline: minimum-jerk primitives and a
//! differential-flatness tracker as experts, a point-mass simulator with
//! attitude lag, imitation of both experts by fully-connected networks, the
//! assembled end-to-end policy, the gap mission runner and black-box
//! fine-tuning of the policy on a flight reward.

pub mod control;
pub mod imitation;
pub mod mission;
pub mod nn;
pub mod policy;
pub mod rl;
pub mod seeding;
pub mod sim;
pub mod trajectory;
