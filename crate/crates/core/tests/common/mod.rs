#![allow(dead_code)]

pub mod cox_fixtures;
pub mod gradcheck;
pub mod oracles;
