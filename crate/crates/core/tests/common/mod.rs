#![allow(dead_code)]

pub mod opsuite;
