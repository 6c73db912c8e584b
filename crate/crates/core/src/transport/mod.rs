//! Wire protocol and live peer actors.
//!
//! Frames are single lines of JSON with sorted keys. A live network runs
//! one listener per peer on the loopback interface; a peer that is killed
//! stops accepting, which its sources observe as a hang.

mod codec;
mod live;

use std::net::SocketAddr;

use thiserror::Error;

pub use codec::{decode, encode, Body, CodecError, ErrorBody, MessageKind, WireMessage};
pub use live::{
    live_run, outcome_digest, LiveNetwork, LiveOptions, LivePeer, PeerConfig, TargetConfig, MAX_FRAME, MIN_ACK_WAIT,
};

use crate::analytics::AnalyticsError;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{peer}: cannot bind {addr}: {source}")]
    Bind { peer: crate::model::PeerId, addr: SocketAddr, source: std::io::Error },
    #[error("cannot launch live network: {0}")]
    Launch(String),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}
