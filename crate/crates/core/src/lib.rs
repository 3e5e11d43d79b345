//! Domain-adaptive object detection at desk scale: a synthetic two-domain
//! scene generator, an adversarially aligned two-stage detector, a
//! classification teacher and a target-relevant localization network, logit
//! distillation for source features, test-time score refinement, and the
//! metrics used to measure source bias and classification/localization
//! consistency.

pub mod align;
pub mod dce;
pub mod detcore;
pub mod dua;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod runner;
pub mod synthdomain;
pub mod teacher_cls;
pub mod troln;

pub use error::{Error, Result};
