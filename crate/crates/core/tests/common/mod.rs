#![allow(dead_code)]

pub mod geometry;
pub mod gradcheck;
