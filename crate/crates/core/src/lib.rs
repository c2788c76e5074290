//! Co-simulation framework coupling a discrete-time orchestrator with a
//! discrete-event network simulator through a conservative synchronization
//! protocol, exercised by a distributed power-aggregation negotiation.

pub mod agents;
pub mod bridge;
pub mod kernel;
pub mod netsim;
pub mod orchestrator;
pub mod scenario;
