//! Simulation and verification laboratory for continuous-time exchangeable
//! stochastic teams: finite-N and mean-field controlled diffusions,
//! exchangeable team costs under deterministic/randomized/relaxed policies,
//! change-of-measure reweighting, an exact discrete-time quadratic oracle,
//! and desk-scale policy search.

pub mod assumptions;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod girsanov;
pub mod grid;
pub mod harness;
pub mod law;
pub mod lqg;
pub mod martingale;
pub mod optimize;
pub mod policy;
pub mod profile;
pub mod rng;
pub mod simulate;
pub mod util;
pub mod wasserstein;

pub use cost::{CostEstimate, HatCost, StageCost};
pub use dynamics::{ActionBox, Mode, TeamDynamics};
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use law::ProfileLaw;
pub use policy::Policy;
pub use profile::{Permutation, PolicyProfile};
pub use simulate::{InitLaw, SimulationBatch, WienerBatch};
