//! Multi-scale graft branches for vision transformers.
//!
//! A graft is a horizontal pyramid attached to a transformer block: the
//! block input is pooled to coarser maps, each level runs local window
//! attention, and results are upsampled and merged top-down before being
//! added back beside the block's own attention.
//!
//! The crate carries its own dense tensor type and reverse-mode autodiff
//! ([`tensor`]), the attention primitives ([`attention`]), the branch
//! itself ([`graft`]), two toy backbones ([`backbone`]), an analytic cost
//! model ([`cost`]) and slow loop-based oracles for testing ([`reference`]).

pub mod attention;
pub mod backbone;
pub mod cost;
pub mod error;
pub mod graft;
pub mod gradcheck;
pub mod params;
pub mod reference;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use backbone::{BackboneSpec, BlockIndex, Model, StructureKind};
pub use error::{Error, Result};
pub use graft::{DownKind, GraftConfig, GraftParams, UpKind};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tape, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/windows.md")]
    mod windows {}
    #[doc = include_str!("../../../book/src/grafts.md")]
    mod grafts {}
    #[doc = include_str!("../../../book/src/backbones.md")]
    mod backbones {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
