//! Context-aware generic event boundary captioning.
//!
//! Pipeline: per-video frame and region features ([`features`]) feed a
//! deformable transformer encoder and two decoders ([`network`]) that turn
//! boundary proposals ([`proposals`]) into event embeddings; an LSTM head
//! with deformable attention ([`caption`]) writes one caption per boundary.
//! [`training`] fits the model, [`metrics`] scores it and [`synthetic`]
//! produces toy datasets with known answers.

pub mod autograd;
pub mod caption;
pub mod datamodel;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod model;
pub mod network;
pub mod nn;
pub mod proposals;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{GebcError, Result};
