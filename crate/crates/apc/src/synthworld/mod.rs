//! Planted-attribute synthetic ReID universe.
//!
//! Identities are sparse compositions of latent attributes; images are token
//! sequences mixing attribute signatures with domain styles, camera offsets
//! and noise. The planted structure is the ground truth for every probe.

pub mod dataset;
pub mod splits;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RealArray, StreamRng};

pub use dataset::{read_dataset, render_dataset, write_dataset, Dataset};
pub use splits::{make_splits, sample_batch_pk, SplitConfig, Splits};

/// Scale of the fixed per-camera offset vectors. Cameras shift every token
/// of a sample regardless of the style/noise settings.
pub const CAMERA_OFFSET_SIGMA: f64 = 0.1;

/// Probability that a given token expresses a given attribute.
pub const TOKEN_ACTIVITY_P: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub num_latent_attributes: usize,
    pub num_identities: usize,
    pub num_domains: usize,
    pub num_cameras: usize,
    pub tokens_per_image: usize,
    pub input_dim: usize,
    /// Expected number of active attributes per identity.
    pub attribute_sparsity: f64,
    pub noise_sigma: f64,
    pub style_sigma: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_latent_attributes: 12,
            num_identities: 60,
            num_domains: 3,
            num_cameras: 4,
            tokens_per_image: 16,
            input_dim: 16,
            attribute_sparsity: 3.0,
            noise_sigma: 0.05,
            style_sigma: 0.4,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: &str| {
            Err(Error::Validation {
                field: field.to_string(),
                message: message.to_string(),
            })
        };
        if self.num_latent_attributes < 2 {
            return fail("num_latent_attributes", "must be >= 2");
        }
        if self.num_identities < 2 {
            return fail("num_identities", "must be >= 2");
        }
        if self.num_domains < 1 {
            return fail("num_domains", "must be >= 1");
        }
        if self.num_cameras < 1 {
            return fail("num_cameras", "must be >= 1");
        }
        if self.tokens_per_image < 1 {
            return fail("tokens_per_image", "must be >= 1");
        }
        if self.input_dim < 1 {
            return fail("input_dim", "must be >= 1");
        }
        if !(self.attribute_sparsity > 0.0
            && self.attribute_sparsity <= self.num_latent_attributes as f64)
        {
            return fail("attribute_sparsity", "must be in (0, A]");
        }
        if self.noise_sigma < 0.0 {
            return fail("noise_sigma", "must be >= 0");
        }
        if self.style_sigma < 0.0 {
            return fail("style_sigma", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: usize,
    /// Length-A association strengths in [0, 1]; at least one positive.
    pub attribute_vector: Vec<f64>,
}

impl IdentityRecord {
    pub fn active_attributes(&self) -> Vec<usize> {
        self.attribute_vector
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(a, _)| a)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub tokens: RealArray,
    pub identity: usize,
    pub camera: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    /// A unit-norm signature vectors, one per latent attribute, `[A x D_in]`.
    pub signatures: RealArray,
    pub identities: Vec<IdentityRecord>,
    /// Per-domain style vectors, `[num_domains x D_in]`, scale `style_sigma`.
    pub styles: RealArray,
    /// Per-camera offset vectors, `[num_cameras x D_in]`.
    pub camera_offsets: RealArray,
}

/// Deterministic world construction; a pure function of the spec.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let a = spec.num_latent_attributes;
    let d = spec.input_dim;
    let mut rng = StreamRng::new(spec.seed, "world");

    let mut sig = Vec::with_capacity(a * d);
    for _ in 0..a {
        let mut v = rng.normal_vec(d, 0.0, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        sig.extend(v);
    }
    let signatures = RealArray::new(vec![a, d], sig)?;

    let p_active = spec.attribute_sparsity / a as f64;
    let mut identities = Vec::with_capacity(spec.num_identities);
    for id in 0..spec.num_identities {
        let mut attrs = vec![0.0; a];
        loop {
            for w in attrs.iter_mut() {
                *w = if rng.bernoulli(p_active) {
                    rng.uniform(0.5, 1.0)
                } else {
                    0.0
                };
            }
            if attrs.iter().any(|&w| w > 0.0) {
                break;
            }
        }
        identities.push(IdentityRecord {
            id,
            attribute_vector: attrs,
        });
    }

    let styles = RealArray::new(
        vec![spec.num_domains, d],
        rng.normal_vec(spec.num_domains * d, 0.0, spec.style_sigma),
    )?;
    let camera_offsets = RealArray::new(
        vec![spec.num_cameras, d],
        rng.normal_vec(spec.num_cameras * d, 0.0, CAMERA_OFFSET_SIGMA),
    )?;

    Ok(World {
        spec: spec.clone(),
        signatures,
        identities,
        styles,
        camera_offsets,
    })
}

/// Per-image rendering internals exposed for oracles and linearity checks.
#[derive(Clone, Debug)]
pub struct RenderTrace {
    /// `activity[a][t]`: whether token `t` expresses attribute `a`.
    pub activity: Vec<Vec<bool>>,
    /// Tokens before the f32 snap.
    pub tokens_raw: RealArray,
}

/// Render one image. Tokens are snapped to f32 precision so that the binary
/// dataset format round-trips bit-exactly.
pub fn render_image(
    world: &World,
    identity: usize,
    camera: usize,
    domain: usize,
    rng: &mut StreamRng,
) -> Result<ImageSample> {
    render_image_detailed(world, identity, camera, domain, rng).map(|(s, _)| s)
}

pub fn render_image_detailed(
    world: &World,
    identity: usize,
    camera: usize,
    domain: usize,
    rng: &mut StreamRng,
) -> Result<(ImageSample, RenderTrace)> {
    let spec = &world.spec;
    if identity >= spec.num_identities {
        return Err(Error::OutOfRange {
            what: "identity",
            value: identity,
            bound: spec.num_identities,
        });
    }
    if camera >= spec.num_cameras {
        return Err(Error::OutOfRange {
            what: "camera",
            value: camera,
            bound: spec.num_cameras,
        });
    }
    if domain >= spec.num_domains {
        return Err(Error::OutOfRange {
            what: "domain",
            value: domain,
            bound: spec.num_domains,
        });
    }
    let a_count = spec.num_latent_attributes;
    let n = spec.tokens_per_image;
    let d = spec.input_dim;
    let record = &world.identities[identity];

    // Activity is drawn for every (attribute, token) pair so the rng draw
    // count does not depend on the identity's attribute vector.
    let activity: Vec<Vec<bool>> = (0..a_count)
        .map(|_| (0..n).map(|_| rng.bernoulli(TOKEN_ACTIVITY_P)).collect())
        .collect();

    let style = world.styles.row_slice(domain);
    let offset = world.camera_offsets.row_slice(camera);
    let mut raw = vec![0.0f64; n * d];
    for t in 0..n {
        let tok = &mut raw[t * d..(t + 1) * d];
        for (a, acts) in activity.iter().enumerate() {
            let w = record.attribute_vector[a];
            if w > 0.0 && acts[t] {
                let sig = world.signatures.row_slice(a);
                for (x, &s) in tok.iter_mut().zip(sig) {
                    *x += w * s;
                }
            }
        }
        for j in 0..d {
            tok[j] += style[j] + offset[j];
        }
        if spec.noise_sigma > 0.0 {
            for x in tok.iter_mut() {
                *x += rng.normal(0.0, spec.noise_sigma);
            }
        }
    }
    let tokens_raw = RealArray::new(vec![n, d], raw.clone())?;
    let snapped: Vec<f64> = raw.iter().map(|&v| v as f32 as f64).collect();
    let tokens = RealArray::new(vec![n, d], snapped)?;
    Ok((
        ImageSample {
            tokens,
            identity,
            camera,
            domain,
        },
        RenderTrace {
            activity,
            tokens_raw,
        },
    ))
}

/// Nearest-signature oracle: index of the signature most cosine-similar to
/// the mean token of a sample.
pub fn nearest_signature(world: &World, sample: &ImageSample) -> usize {
    let d = world.spec.input_dim;
    let n = world.spec.tokens_per_image;
    let mut mean = vec![0.0; d];
    for t in 0..n {
        for (m, &v) in mean.iter_mut().zip(sample.tokens.row_slice(t)) {
            *m += v / n as f64;
        }
    }
    let mnorm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut best = (0, f64::NEG_INFINITY);
    for a in 0..world.spec.num_latent_attributes {
        let sig = world.signatures.row_slice(a);
        let dot: f64 = mean.iter().zip(sig).map(|(m, s)| m * s).sum();
        let cos = dot / mnorm;
        if cos > best.1 {
            best = (a, cos);
        }
    }
    best.0
}
