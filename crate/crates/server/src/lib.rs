//! HTTP annotation service and command-line front end for the annoloop
//! engine.

pub mod api;
pub mod cli;
