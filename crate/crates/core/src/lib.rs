//! Edge-placed identity and access management.
//!
//! Authentication and authorization travel in two separate tokens: a
//! reusable, non-renewable access token issued by the [`vault`] at login,
//! and a short-lived permission JWT ([`ptoken`]) minted by the [`gateway`]
//! for every request from the user's permissions as they are *right now*.
//! A revoked permission therefore takes effect on the very next request even
//! though the access token is still valid.

pub mod app;
pub mod audit;
pub mod bench;
pub mod clock;
pub mod configsvc;
pub mod exec;
pub mod gateway;
pub mod http;
pub mod identity;
pub mod mesh;
pub mod names;
pub mod policy;
pub mod ptoken;
pub mod server;
pub mod services;
pub mod store;
pub mod vault;
