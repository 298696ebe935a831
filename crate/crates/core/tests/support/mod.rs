#![allow(dead_code)]

pub mod instruments;
pub mod trigger_oracle;
