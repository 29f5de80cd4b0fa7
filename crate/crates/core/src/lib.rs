#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod controller;
pub mod domain;
pub mod error;
pub mod models;
pub mod nnet;
pub mod num;
pub mod pipeline;
pub mod planner;
pub mod sim;
pub mod training;
pub mod tube;

pub use error::{Error, Result};
