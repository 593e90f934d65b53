#![allow(dead_code)]

pub mod kinematics;
pub mod qp_oracle;
pub mod scenarios;
