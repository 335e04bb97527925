//! Split-sample GMM, TS2SLS and TSGMM estimators and their asymptotic variances.

mod sample;
mod theory;

pub use sample::*;
pub use theory::*;
