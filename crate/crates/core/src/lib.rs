pub mod accumulator;
pub mod crypto;
pub mod ground;
pub mod hsm;
pub mod link;
pub mod power;
pub mod scenario;
pub mod time;
mod wire;

pub use wire::WireError;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/accumulator.md")]
mod book_accumulator {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/framing.md")]
mod book_framing {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/protocol.md")]
mod book_protocol {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/monitoring.md")]
mod book_monitoring {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/power.md")]
mod book_power {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/scenarios.md")]
mod book_scenarios {}
