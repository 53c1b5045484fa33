//! Context-aware detection of the price, title and main image on product
//! webpages.
//!
//! Pages arrive as DOM dumps plus screenshots ([`dom`]). Every leaf element
//! is classified from its own visual and positional features together with
//! an attention-weighted summary of its nearest DOM neighbors ([`graph`],
//! [`model`]). [`train`] fits the model, [`eval`] scores it on held-out
//! domains, [`synth`] generates pages where only context identifies the true
//! price, and [`viz`] draws attention overlays.

pub mod dom;
pub mod eval;
pub mod features;
pub mod geom;
pub mod graph;
pub mod model;
pub mod raster;
pub mod synth;
pub mod train;
pub mod viz;

use thiserror::Error;

/// Any error of this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dom(#[from] dom::DomError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Viz(#[from] viz::VizError),
}

/// [`Error::is_input_error`] for any error of this crate, `None` for foreign errors.
pub fn classify(e: &(dyn std::error::Error + 'static)) -> Option<bool> {
    if let Some(e) = e.downcast_ref::<Error>() {
        return Some(e.is_input_error());
    }
    if let Some(e) = e.downcast_ref::<dom::DomError>() {
        return Some(dom_is_input(e));
    }
    if let Some(e) = e.downcast_ref::<model::ModelError>() {
        return Some(model_is_input(e));
    }
    if e.is::<eval::EvalError>() || e.is::<viz::VizError>() {
        return Some(true);
    }
    if let Some(e) = e.downcast_ref::<train::TrainError>() {
        return Some(train_is_input(e));
    }
    e.downcast_ref::<synth::SynthError>().map(synth_is_input)
}

fn dom_is_input(e: &dom::DomError) -> bool {
    !matches!(e, dom::DomError::Io(_))
}

fn model_is_input(e: &model::ModelError) -> bool {
    use model::ModelError as M;
    matches!(e, M::Shape(_) | M::Config(_) | M::Checkpoint(_))
}

fn train_is_input(e: &train::TrainError) -> bool {
    use train::TrainError as T;
    match e {
        T::EmptyDataset(_) | T::DomainOverlap(_) | T::Unlabeled(_) | T::Config(_) => true,
        T::Model(m) => model_is_input(m),
        T::Divergence { .. } | T::Shape(_) | T::Image { .. } => false,
    }
}

fn synth_is_input(e: &synth::SynthError) -> bool {
    use synth::SynthError as S;
    match e {
        S::Spec(_) | S::Toml(_) => true,
        S::Dom(d) => dom_is_input(d),
        S::Image(_) | S::Json(_) | S::Io(_) => false,
    }
}

impl Error {
    /// Whether the caller's input is at fault (bad files, configs, ids), as
    /// opposed to a failure while running (I/O, divergence).
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Dom(e) => dom_is_input(e),
            Error::Model(e) => model_is_input(e),
            Error::Train(e) => train_is_input(e),
            Error::Eval(_) | Error::Viz(_) => true,
            Error::Synth(e) => synth_is_input(e),
        }
    }
}
