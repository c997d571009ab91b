//! Annotation-free audio-visual segmentation.
//!
//! The crate covers two halves of one workflow:
//!
//! * **Data**: [`ontology`] and [`synthesis`] join independently labeled
//!   segmentation masks and audio clips into `(image, mask, audio)` triplets
//!   and persist them as a JSON-lines manifest.
//! * **Model**: [`encoders`], [`fusion`] and [`mask_head`] form an
//!   audio-aware query transformer whose decoder queries are seeded from the
//!   audio embedding. [`objective`] matches the single ground-truth mask to
//!   the best query and scores it with dice, focal and sounding terms.
//!
//! [`metrics`] implements region (IoU) and F-measure scoring. [`config`],
//! [`fixtures`], [`train`], [`checkpoint`] and [`experiments`] tie it
//! together: procedural stand-in corpora, training, and the zero-shot,
//! finetuning, open-set and audio-selectivity protocols.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod fixtures;
pub mod fusion;
pub mod interp;
pub mod mask_head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod ontology;
pub mod optim;
pub mod synthesis;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use exec::Execution;
