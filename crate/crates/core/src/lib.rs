//! Secret-key / private-key rate regions for a three-terminal source, and
//! exact audits of concrete public-discussion key-generation protocols.
//!
//! * [`source`]: finite-alphabet joint distributions of (X, Y, Z) and sampling.
//! * [`info`]: entropies and (conditional) mutual informations in bits.
//! * [`region`]: the A, B, C quantities, outer/inner/exact rate regions and
//!   their vertices.
//! * [`protocol`]: slot-indexed broadcast protocols, including time sharing
//!   and a random-binning scheme.
//! * [`audit`]: leakage, uniformity and recoverability of a protocol, exact
//!   or by Monte Carlo.
//! * [`cli`]: the `skpk` command-line front end.

pub mod audit;
pub mod cli;
pub mod info;
pub mod protocol;
pub mod region;
pub mod source;
pub mod util;
