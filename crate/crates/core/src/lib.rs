//! Learning multi-head attention layers from random Boolean examples.
//!
//! The crate covers the forward model, the example oracle, the six learning
//! phases (moment estimate, certification, refinement, span extraction, value
//! regression, selection), and the lower-bound gadget constructions.

pub mod attention;
pub mod bands;
pub mod boolean_model;
pub mod error;
pub mod gadgets;
pub mod instance;
pub mod linalg;
pub mod moment;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod refiner;
pub mod regress;
pub mod sculptor;
pub mod serial;
pub mod span;

pub use attention::{forward, AttentionLayer, Head};
pub use boolean_model::BooleanSequence;
pub use error::{Error, Result};
pub use instance::{AssumptionAudit, InstanceFile};
pub use oracle::{Example, ExampleOracle, LayerOracle};
pub use rng::{Rng, SeedTree};
pub use sculptor::{AffineConstraint, CertifyParams, ConvexBody};
pub use instance::InstanceParams;
pub use pipeline::{run_learn, LearnOutcome, PhaseReport, RunConfig};
