#![no_std]
extern crate alloc;

pub mod analysis;
pub mod engine;
pub mod ibr_gfl;
pub mod ibr_gfm;
pub mod machines;
pub mod netmodel;
pub mod reduced_system;
pub mod scenario;
pub mod slowdyn;
