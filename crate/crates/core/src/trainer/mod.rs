//! Multi-agent PPO over the resource roles, the single-agent baseline,
//! evaluation and checkpoints.

mod bundle;
mod checkpoint;
mod eval;
mod train;

pub use bundle::{Agent, Algo, Draw, PolicyBundle, Role, SlotForward, SlotInputs};
pub use checkpoint::{checkpoint_load, checkpoint_save, write_atomic, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use eval::{eval_seed, evaluate, evaluate_policy, sweep_alpha_fixed, EvalEpisode, EvalPolicy, EvalReport, SweepRow};
pub use train::{train, train_gmappo, train_rmappo, EpisodeLog, TrainLog, TrainOptions, TrainRunState, UpdateLog};
