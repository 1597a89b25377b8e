//! Radar reflectivity to column-maximum updraft retrieval.
//!
//! The crate covers the whole desk-scale workflow: the ZGRID container
//! ([`grid_io`]), grid harmonization ([`regrid`]), patch datasets and the
//! synthetic storm generator ([`dataprep`]), the sinh-arcsinh-normal
//! distribution ([`shash`]) and its training loss ([`loss`]), a
//! from-scratch convolutional encoder-decoder ([`model`]), verification
//! metrics ([`verify`]) and the batch command line ([`cli`]).

// Negated float comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataprep;
pub mod error;
pub mod grid_io;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod regrid;
pub mod shash;
pub mod verify;

pub use error::{Error, Result};
pub use grid_io::{composite_max, read_grid, write_grid, Grid3D, HeightDatum, TerrainGrid};
pub use shash::ShashParams;
