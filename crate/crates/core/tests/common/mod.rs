#![allow(dead_code)]

pub mod invariant;
pub mod oracle;
