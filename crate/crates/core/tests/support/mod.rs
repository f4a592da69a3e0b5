//! Property and fault-injection suites shared by the test targets of this
//! crate and the acceptance target of the cli crate.
#![allow(dead_code)]

pub mod broker;
pub mod faults;
pub mod stats;
pub mod sync;
