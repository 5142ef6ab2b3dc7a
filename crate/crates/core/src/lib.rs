#![no_std]
extern crate alloc;

pub mod dmd;
pub mod error;
pub mod generator;
pub mod mask;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scheme;
pub mod streaming;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scheme::{layout, partition, reconstruct, step_count, Ownership, Scale, Unit, UnitLayout, UnitScheme, UnitSequence};
pub use tensor::{gaussian_volume, resize_volume, Dims, LatentVolume};
pub use mask::{build_mask, reverse_mask, verify_causality, AttentionMask, CausalityReport, MaskDirection};
pub use generator::{init_params, GenConfig, Generator, GeneratorParams, NoiseDraw};
