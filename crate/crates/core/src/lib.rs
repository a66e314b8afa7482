//! Area-balanced entropic optimal transport for dense pseudo-labels.
//!
//! The library couples three pieces:
//!
//! * a Sinkhorn-Knopp transport core that turns patch-class predictions into
//!   couplings with a prescribed class-area marginal ([`ot`], [`area`]);
//! * a desk-scale two-branch patch classifier trained against those
//!   couplings on synthetic shape data ([`encoder`], [`head`], [`loss`],
//!   [`synth`], [`train`]);
//! * an unsupervised spectral pipeline that replaces image-level labels with
//!   cluster-derived pseudo-labels ([`spectral`], [`metrics`]).
//!
//! The numeric core is generic over the scalar type via [`scalar::Scalar`];
//! the aliases below fix `f64`, which is what the trainer, the CLI, and the
//! on-disk formats use.

pub mod adam;
pub mod area;
pub mod config;
pub mod encoder;
pub mod error;
pub mod head;
pub mod image;
pub mod io;
pub mod loss;
pub mod measure;
pub mod metrics;
pub mod ot;
pub mod scalar;
pub mod seeds;
pub mod spectral;
pub mod synth;
pub mod train;
pub mod view;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` instantiations of the generic core types.
pub type Measure = measure::DiscreteMeasure<f64>;
pub type Prediction = ot::PredictionMatrix<f64>;
pub type Cost = ot::CostMatrix<f64>;
pub type Kernel = ot::GibbsKernel<f64>;
pub type Coupling = ot::CouplingMatrix<f64>;
pub type Sinkhorn = ot::SinkhornResult<f64>;
pub type Area = area::AreaState<f64>;
pub type Image = image::ImageTensor<f64>;
pub type Views = view::ViewPair<f64>;
pub type Features = encoder::PatchFeatures<f64>;
pub type Encoder = encoder::EncoderParams<f64>;
pub type Projection = head::ProjectionWeights<f64>;
pub type Affinity = spectral::AffinityGraph<f64>;
pub type Eigen = spectral::EigenBasis<f64>;
