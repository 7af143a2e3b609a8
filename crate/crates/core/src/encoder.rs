//! Two-stream encoder mapping an image/language embedding pair to a shared
//! hub representation.
//!
//! Both inputs are projected to a common width, concatenated visual-first,
//! and fused through one affine layer with a tanh squash:
//! `h = tanh(W [P_v v; P_l l] + b)`. Backprop is manual; a forward pass
//! returns the cache the backward pass needs, stamped with a parameter
//! revision so a cache from outdated parameters is rejected instead of
//! silently producing wrong gradients.

use crate::math::layers::{tanh_backward, tanh_forward};
use crate::math::{Affine, AffineGrads, MathError, SeedStream, Vector};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    DimMismatch { what: &'static str, expected: usize, got: usize },
    /// The cache was produced by a different forward pass (older parameters
    /// or another encoder).
    StaleCache,
    BadDims { detail: String },
    Math(MathError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DimMismatch { what, expected, got } => {
                write!(f, "{what}: expected dim {expected}, got {got}")
            }
            ModelError::StaleCache => {
                write!(f, "forward cache does not match current parameters")
            }
            ModelError::BadDims { detail } => write!(f, "bad encoder dims: {detail}"),
            ModelError::Math(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<MathError> for ModelError {
    fn from(e: MathError) -> Self {
        ModelError::Math(e)
    }
}

/// Encoder widths. Defaults assume a 2048-dim visual backbone and a 512-dim
/// sentence encoder, both projected to 512 and fused into a 1024-dim hub.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub visual: usize,
    pub language: usize,
    pub projected: usize,
    pub hidden: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims { visual: 2048, language: 512, projected: 512, hidden: 1024 }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.visual == 0 || self.language == 0 || self.projected == 0 || self.hidden == 0 {
            return Err(ModelError::BadDims { detail: format!("{self:?} has a zero width") });
        }
        Ok(())
    }
}

/// Encoder parameters. Mutate only through [`EncoderParams::load_flat`] so
/// the revision stamp stays in sync with outstanding caches.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    visual_proj: Affine,
    language_proj: Affine,
    fusion: Affine,
    dims: EncoderDims,
    use_bias: bool,
    revision: u64,
}

/// Equality is over weights and configuration; the revision stamp only
/// tracks cache validity and is deliberately ignored.
impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.visual_proj == other.visual_proj
            && self.language_proj == other.language_proj
            && self.fusion == other.fusion
            && self.dims == other.dims
            && self.use_bias == other.use_bias
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    visual: Vector,
    language: Vector,
    fused_input: Vector,
    hub: Vector,
    revision: u64,
}

impl EncodeCache {
    pub fn hub(&self) -> &Vector {
        &self.hub
    }
}

/// Gradients for all encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub visual_proj: AffineGrads,
    pub language_proj: AffineGrads,
    pub fusion: AffineGrads,
}

impl EncoderGrads {
    pub fn scale(&mut self, alpha: f64) {
        self.visual_proj.scale(alpha);
        self.language_proj.scale(alpha);
        self.fusion.scale(alpha);
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.visual_proj.flatten_into(out);
        self.language_proj.flatten_into(out);
        self.fusion.flatten_into(out);
    }
}

/// Fresh random encoder. Weight draws come from fixed substream labels of
/// the given stream, so two callers holding the same stream always build
/// bitwise-identical encoders regardless of what they train afterwards.
pub fn init_encoder(
    dims: EncoderDims,
    use_bias: bool,
    seeds: &SeedStream,
) -> Result<EncoderParams, ModelError> {
    dims.validate()?;
    let enc = seeds.substream("encoder");
    Ok(EncoderParams {
        visual_proj: Affine::init(dims.projected, dims.visual, &enc.substream("visual-projection")),
        language_proj: Affine::init(
            dims.projected,
            dims.language,
            &enc.substream("language-projection"),
        ),
        fusion: Affine::init(dims.hidden, 2 * dims.projected, &enc.substream("fusion")),
        dims,
        use_bias,
        revision: 0,
    })
}

impl EncoderParams {
    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn use_bias(&self) -> bool {
        self.use_bias
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Rebuilds parameters from parts read out of a checkpoint.
    pub fn from_parts(
        dims: EncoderDims,
        use_bias: bool,
        visual_proj: Affine,
        language_proj: Affine,
        fusion: Affine,
    ) -> Result<Self, ModelError> {
        dims.validate()?;
        let check = |what: &'static str, expected: usize, got: usize| {
            if expected != got {
                return Err(ModelError::DimMismatch { what, expected, got });
            }
            Ok(())
        };
        check("visual projection input", dims.visual, visual_proj.in_dim())?;
        check("visual projection output", dims.projected, visual_proj.out_dim())?;
        check("language projection input", dims.language, language_proj.in_dim())?;
        check("language projection output", dims.projected, language_proj.out_dim())?;
        check("fusion input", 2 * dims.projected, fusion.in_dim())?;
        check("fusion output", dims.hidden, fusion.out_dim())?;
        Ok(EncoderParams { visual_proj, language_proj, fusion, dims, use_bias, revision: 0 })
    }

    pub fn visual_proj(&self) -> &Affine {
        &self.visual_proj
    }

    pub fn language_proj(&self) -> &Affine {
        &self.language_proj
    }

    pub fn fusion(&self) -> &Affine {
        &self.fusion
    }

    pub fn param_count(&self) -> usize {
        self.visual_proj.param_count()
            + self.language_proj.param_count()
            + self.fusion.param_count()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.visual_proj.flatten_into(out);
        self.language_proj.flatten_into(out);
        self.fusion.flatten_into(out);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut out);
        out
    }

    /// Replaces all parameters from a flat slice (inverse of `to_flat`) and
    /// invalidates outstanding caches.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::Math(MathError::ShapeMismatch {
                left: self.param_count(),
                right: flat.len(),
            }));
        }
        let mut at = 0;
        at += self.visual_proj.unflatten_from(&flat[at..])?;
        at += self.language_proj.unflatten_from(&flat[at..])?;
        self.fusion.unflatten_from(&flat[at..])?;
        self.revision += 1;
        Ok(())
    }

    pub fn grads_like(&self) -> EncoderGrads {
        EncoderGrads {
            visual_proj: self.visual_proj.grads_like(),
            language_proj: self.language_proj.grads_like(),
            fusion: self.fusion.grads_like(),
        }
    }

    /// Forward pass; the returned cache carries the hub vector and
    /// everything the backward pass needs.
    pub fn encode(&self, visual: &[f64], language: &[f64]) -> Result<EncodeCache, ModelError> {
        if visual.len() != self.dims.visual {
            return Err(ModelError::DimMismatch {
                what: "visual input",
                expected: self.dims.visual,
                got: visual.len(),
            });
        }
        if language.len() != self.dims.language {
            return Err(ModelError::DimMismatch {
                what: "language input",
                expected: self.dims.language,
                got: language.len(),
            });
        }
        let visual_projected = self.visual_proj.forward(visual)?;
        let language_projected = self.language_proj.forward(language)?;
        let fused_input = visual_projected.concat(&language_projected);
        let hub = tanh_forward(&self.fusion.forward(&fused_input)?);
        Ok(EncodeCache {
            visual: Vector::from_vec(visual.to_vec()),
            language: Vector::from_vec(language.to_vec()),
            fused_input,
            hub,
            revision: self.revision,
        })
    }

    /// Hub vector only, for analysis paths that never backprop.
    pub fn encode_hub(&self, visual: &[f64], language: &[f64]) -> Result<Vector, ModelError> {
        Ok(self.encode(visual, language)?.hub)
    }

    /// Backward pass for one datapoint. Accumulates parameter gradients into
    /// `grads` and returns the gradients on the two inputs.
    pub fn encode_backward(
        &self,
        grad_hub: &[f64],
        cache: &EncodeCache,
        grads: &mut EncoderGrads,
    ) -> Result<(Vector, Vector), ModelError> {
        if cache.revision != self.revision {
            return Err(ModelError::StaleCache);
        }
        if grad_hub.len() != self.dims.hidden {
            return Err(ModelError::DimMismatch {
                what: "hub gradient",
                expected: self.dims.hidden,
                got: grad_hub.len(),
            });
        }
        let grad_fused_out = tanh_backward(&cache.hub, grad_hub);
        let grad_fused_in =
            self.fusion.backward_into(&cache.fused_input, &grad_fused_out, &mut grads.fusion)?;
        let (grad_vp, grad_lp) = grad_fused_in.split_at(self.dims.projected);
        let grad_visual =
            self.visual_proj.backward_into(&cache.visual, grad_vp, &mut grads.visual_proj)?;
        let grad_language = self.language_proj.backward_into(
            &cache.language,
            grad_lp,
            &mut grads.language_proj,
        )?;
        if !self.use_bias {
            grads.visual_proj.zero_bias();
            grads.language_proj.zero_bias();
            grads.fusion.zero_bias();
        }
        Ok((grad_visual, grad_language))
    }
}
