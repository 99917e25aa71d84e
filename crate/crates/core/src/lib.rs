//! Runnable directories: self-contained directories with their own
//! container-backed build, test and release lifecycles, nested freely
//! inside one another.

pub mod bootstrap;
pub mod config;
pub mod discovery;
pub mod hooks;
pub mod ignore;
pub mod lifecycle;
pub mod links;
pub mod lock;
pub mod orchestrator;
pub mod runtime;
pub mod tools;
