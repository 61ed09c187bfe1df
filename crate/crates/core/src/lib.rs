pub mod data;
pub mod error;
pub mod fedmethods;
pub mod harness;
pub mod hyperspace;
pub mod models;
pub mod oco;
pub mod rng;
pub mod tuners;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/federated-rounds.md")]
    mod federated_rounds {}
    #[doc = include_str!("../../../book/src/search-space.md")]
    mod search_space {}
    #[doc = include_str!("../../../book/src/successive-halving.md")]
    mod successive_halving {}
    #[doc = include_str!("../../../book/src/fedex.md")]
    mod fedex {}
    #[doc = include_str!("../../../book/src/oco.md")]
    mod oco {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
