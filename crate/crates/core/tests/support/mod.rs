#![allow(dead_code)]

pub mod hp;
pub mod lp;
