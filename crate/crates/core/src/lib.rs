//! Tag-based race inference over a software model of tagged memory, with an
//! exact happens-before oracle to check it against.

pub mod ids;
pub mod memory;
pub mod program;
pub mod lockset;
pub mod tbri;
pub mod oracle;
pub mod corpus;
pub mod metrics;
pub mod fuzz;
