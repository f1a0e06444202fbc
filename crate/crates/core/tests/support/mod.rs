#![allow(dead_code)]

pub mod checkpoint_checks;
pub mod grad_suite;
pub mod nifti_fixtures;
pub mod oracles;
