#![allow(dead_code)]

pub mod equivariance;
pub mod gradients;
