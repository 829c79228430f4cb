//! Color-universal-design image filtering.
//!
//! A small convolutional network looks at an image, its dichromat
//! simulation and their difference map, and regresses two piecewise-linear
//! scale curves that are applied to the image's saturation and value
//! channels. Everything needed to train and evaluate it lives here: color
//! conversions, a reverse-mode differentiation engine, the loss family,
//! quality metrics, a synthetic pair generator, and the training loop.

pub mod cli;
pub mod colorlab;
pub mod cudnet;
pub mod datagen;
pub mod gradsuite;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod preprocess;
pub mod tensorcore;
pub mod trainer;
