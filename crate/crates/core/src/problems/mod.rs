//! Bilevel problem instances implementing [`BilevelOracle`](crate::BilevelOracle).

pub mod gan;
pub mod hyperclean;
pub mod meta;
pub mod mog;
pub mod quadratic;
pub mod softmax;
pub mod toy;
