pub mod autograd;
pub mod conv;
pub mod data;
pub mod error;
pub mod field_ops;
pub mod generator;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod schedule;
pub mod trainer;
pub mod volume;

pub use error::{DdmError, Result};
pub use volume::{DisplacementField, GridShape, LatentCode, SegmentationMap, Volume};
