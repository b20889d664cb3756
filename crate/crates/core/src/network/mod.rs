//! The template implicit network and the stack of latent-conditioned
//! stationary velocity networks.
//!
//! Both networks store their parameters in one flat buffer described by a
//! [`Layout`]. Forward passes are recorded on a [`Tape`](crate::tape::Tape)
//! together with forward-mode spatial tangents, so values, spatial
//! derivatives and parameter gradients all come from the same program.

mod layout;
mod template;
mod velocity;

pub use layout::{Dense, LayerVars, Layout, ParamGradient};
pub use template::{template_eval, TemplateNet, TemplateOut};
pub use velocity::{h_eps, velocity_eval, VelocityField, VelocityNetStack, VelocityOut};
