//! Reliability of layered peer-to-peer task processing.
//!
//! A terminal sends a task into a layered network of peers. Each peer
//! processes it, signs it and forwards it to one peer of the next layer;
//! when a peer hangs its source fails over to a sibling.
//!
//! [`topology`] builds, checks and analyses such networks and [`analytics`]
//! computes exactly how likely a task is to get through. [`engine`] runs the
//! failover protocol in virtual time, and [`transport`] runs it over TCP to
//! check that real peers agree with the simulator. [`catalog`] holds the
//! built-in experiments.

pub mod analytics;
pub mod catalog;
pub mod engine;
pub mod model;
pub mod topology;
pub mod transport;

// The book's and the README's snippets compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/topologies.md")]
    mod topologies {}
    #[doc = include_str!("../../../book/src/reliability.md")]
    mod reliability {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/live.md")]
    mod live {}
    #[doc = include_str!("../../../book/src/reproduction.md")]
    mod reproduction {}
}
