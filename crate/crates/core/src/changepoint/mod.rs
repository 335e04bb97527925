//! Break detection: critical values, sup-Wald scans, common-change tests and
//! least-squares multiple-break estimation.

mod bai_perron;
mod critvals;
mod scan;

pub use bai_perron::*;
pub use critvals::*;
pub use scan::*;
