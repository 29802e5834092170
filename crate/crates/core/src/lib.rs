//! Menu recommendation against agents whose preferences drift with their own
//! consumption history.
//!
//! The crate simulates such agents, learns their preference model from a few
//! local queries, and runs a bandit optimizer over the item distributions that
//! can be induced by showing menus, under an entropy (diversity) constraint.

pub mod core_types;
pub mod geometry_sets;
pub mod local_learning;
pub mod menu_solver;
pub mod navigation;
pub mod orchestrator;
pub mod poly;
pub mod preference_models;
pub mod rcfkm_opt;
pub mod scenarios;

pub use core_types::{
    entropy, enumerate_menus, tv_distance, update_memory, CoreError, Histogram, Menu, MenuCatalog,
    MenuDistribution, SimRng, SimplexVector,
};
pub use preference_models::{AnyModel, Family, PreferenceModel, ScoreVector};
