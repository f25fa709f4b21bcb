#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

pub mod attribute;
pub mod autodiff;
pub mod checkpoint;
pub mod model;
pub mod safe;
pub mod score;
pub mod synth;
pub mod tokenizer;
pub mod train;
