//! Perceptual manifold guidance for diffusion samplers, at desk scale.
//!
//! Linear-manifold testbeds with exact autoencoders stand in for a latent
//! diffusion backbone. The crate covers the noise schedule, a small
//! reverse-mode engine, a denoising-score-matching network, the guided DDIM
//! loop with data- and perceptual-consistency corrections, hyperfeature
//! regression for no-reference quality prediction, and a synthetic
//! benchmark harness with ablations.

pub mod bench;
pub mod diffengine;
pub mod manifold;
pub mod perceptual;
pub mod quality;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod scoremodel;
