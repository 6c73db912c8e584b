//! Failure injection.
//!
//! A peer hangs on a request when a uniform draw `u` in `[0, N)` falls below
//! `(1 - p) * N`. Each (peer, task, attempt) triple owns its own random
//! stream, so a draw does not depend on which other peers were visited and
//! the live transport reproduces the simulator's draws exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::digest::fnv1a;
use crate::model::{PeerId, TaskId};

/// Default draw range, `2^63 - 1`.
pub const DEFAULT_DRAW_RANGE: u64 = i64::MAX as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Draw {
    Up,
    Hang,
}

/// One hang-rule draw. Always consumes exactly one value from `rng`.
pub fn failure_draw<R: Rng + ?Sized>(rng: &mut R, p: f64, n: u64) -> Draw {
    let u = rng.gen_range(0..n.max(1));
    // The endpoints are exact so rounding of (1 - p) * N cannot flip them.
    if p >= 1.0 {
        return Draw::Up;
    }
    if p <= 0.0 {
        return Draw::Hang;
    }
    if (u as f64) < (1.0 - p) * n as f64 {
        Draw::Hang
    } else {
        Draw::Up
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit key of a peer id.
pub fn peer_key(peer: &PeerId) -> u64 {
    fnv1a(peer.as_str().as_bytes())
}

/// Seed of the stream owned by `(peer_key, task, attempt)` under `seed`.
pub fn stream_seed(seed: u64, task: TaskId, attempt: u32, peer_key: u64) -> u64 {
    let id = task.as_u128();
    let mut h = splitmix64(seed);
    for part in [(id >> 64) as u64, id as u64, attempt as u64, peer_key] {
        h = splitmix64(h ^ part);
    }
    h
}

pub fn stream(seed: u64, task: TaskId, attempt: u32, peer_key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, task, attempt, peer_key))
}

/// The draw a peer makes for one request.
pub fn peer_draw(seed: u64, task: TaskId, attempt: u32, peer_key: u64, p: f64, n: u64) -> Draw {
    failure_draw(&mut stream(seed, task, attempt, peer_key), p, n)
}
