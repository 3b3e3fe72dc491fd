//! Meta-learning engine: autodiff, episodic task families, the base learner
//! and learned optimizer networks, the meta-training algorithms (MAML,
//! MetaSGD, TAML, MetaLSTM, MetaLSTM++) with optional task attention, and
//! the scalar analyses used to study them.

// `Var` arithmetic returns `Result`, so the operator traits do not fit, and
// `!(x > 0.0)` guards are meant to reject NaN.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod meta;
pub mod metrics;
pub mod models;
pub mod tasks;
