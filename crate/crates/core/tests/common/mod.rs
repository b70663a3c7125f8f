#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

pub mod gradcheck;
pub mod toy;
