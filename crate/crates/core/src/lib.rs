//! CARML: curricula for unsupervised meta-reinforcement learning.
//!
//! The engine alternates between fitting a trajectory-level mixture model to
//! the meta-learner's experience (task acquisition) and meta-training a
//! recurrent policy on reward functions derived from that mixture, then
//! evaluates transfer to hand-crafted goal tasks in a 2D room simulator.

pub mod env;
pub mod nn;
pub mod rng;
pub mod scaffold;
pub mod trajectory;

pub mod cli {
    pub fn run() -> i32 {
        eprintln!("carml: not wired up yet");
        2
    }
}
