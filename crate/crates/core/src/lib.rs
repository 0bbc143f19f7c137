//! AttFC: a classification head for very large identity counts.
//!
//! Class centers are generated on the fly from class images by an attention
//! loader, stored in a fixed-capacity FIFO container, and scored with a
//! (margin) softmax loss whose conflicting duplicates are masked out. A
//! momentum-updated class encoder trails the SGD-trained feature encoder.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod data;
pub mod dcc;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod numerics;
pub mod similarity;
pub mod trainer;

pub use error::{Error, Result};
