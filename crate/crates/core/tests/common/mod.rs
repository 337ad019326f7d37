#![allow(dead_code)]

pub mod fd;
pub mod gumbel;
pub mod router;
