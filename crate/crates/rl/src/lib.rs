//! Search for layer-wise pruning profiles: the pruning MDP over real and
//! surrogate networks, a circular environment queue, and a PPO learner
//! with generalized advantage estimation.

pub mod env;
pub mod nn;
pub mod obs;
pub mod ppo;
pub mod surrogate;

pub use env::{EnvQueue, Environment, EpisodeRecord, PruningEnv, PruningEnvConfig, StepOutcome, StepRecord};
pub use obs::Observation;
pub use ppo::{collect, ppo_train, rollout_profile, IterationStats, Policy, PpoConfig};
pub use surrogate::SurrogateEnv;
