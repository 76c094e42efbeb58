//! Deterministic SDN simulation with switch-resident security functions and a
//! policy-driven security controller application.

pub mod flow;
pub mod net;
pub mod secfn;
pub mod topology;
pub mod wire;
pub mod xml;
pub mod channel;
pub mod controller;
pub mod cssa;
pub mod sim;
