//! Visual encoder: token projection, class token, camera embedding,
//! pre-norm attention blocks, cross-modal projection.

use crate::encoders::{block_forward, init_block_params, rand_param, EncoderDims, INIT_SIGMA};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, RealArray, StreamRng, Tape, Var};
use crate::synthworld::ImageSample;

pub fn init_visual_params(set: &mut ParamSet, dims: &EncoderDims, rng: &mut StreamRng) {
    let dv = dims.visual_dim;
    set.insert(
        "visual.token_proj.w",
        rand_param(rng, &[dims.input_dim, dv], INIT_SIGMA),
        true,
    );
    set.insert("visual.token_proj.b", RealArray::zeros(&[dv]), true);
    set.insert("visual.class_token", rand_param(rng, &[dv], INIT_SIGMA), true);
    set.insert(
        "visual.pos",
        rand_param(rng, &[dims.tokens_per_image + 1, dv], INIT_SIGMA),
        true,
    );
    set.insert(
        "visual.camera",
        rand_param(rng, &[dims.num_cameras, dv], INIT_SIGMA),
        true,
    );
    for b in 0..dims.visual_blocks {
        init_block_params(set, &format!("visual.block{b}"), dv, rng);
    }
    set.insert("visual.ln_final.gamma", RealArray::full(&[dv], 1.0), true);
    set.insert("visual.ln_final.beta", RealArray::zeros(&[dv]), true);
    set.insert(
        "visual.wp",
        rand_param(rng, &[dv, dims.cross_modal_dim], INIT_SIGMA),
        true,
    );
}

/// Forward outputs: the token sequence, its class-token views and the
/// projected sequence consumed by the composition module.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures {
    /// Encoded sequence `[(N+1) x D_v]`; row 0 is the class token.
    pub f_seq: Var,
    /// Class-token visual feature `[D_v]`.
    pub f_v: Var,
    /// Projected sequence `[(N+1) x D_c]`.
    pub r_seq: Var,
    /// Projected class feature `[D_c]`.
    pub r: Var,
}

pub fn encode_image(
    tape: &Tape,
    set: &ParamSet,
    dims: &EncoderDims,
    sample: &ImageSample,
) -> Result<VisualFeatures> {
    if sample.camera >= dims.num_cameras {
        return Err(Error::OutOfRange {
            what: "camera",
            value: sample.camera,
            bound: dims.num_cameras,
        });
    }
    let tokens = tape.constant(sample.tokens.clone());
    encode_tokens(tape, set, dims, tokens, sample.camera)
}

/// Same forward but from an already-taped token matrix `[N x D_in]`, so
/// training-time augmentation can feed modified tokens through.
pub fn encode_tokens(
    tape: &Tape,
    set: &ParamSet,
    dims: &EncoderDims,
    tokens: Var,
    camera: usize,
) -> Result<VisualFeatures> {
    let w = tape.param(set, "visual.token_proj.w")?;
    let b = tape.param(set, "visual.token_proj.b")?;
    let projected = tape.add_row_broadcast(tape.matmul(tokens, w)?, b)?;

    let class_token = tape.param(set, "visual.class_token")?;
    let class_row = tape.reshape(class_token, vec![1, dims.visual_dim])?;
    let mut x = tape.concat_rows(&[class_row, projected])?;

    if dims.positional {
        let pos = tape.param(set, "visual.pos")?;
        x = tape.add(x, pos)?;
    }
    let cam_table = tape.param(set, "visual.camera")?;
    let cam = tape.row(cam_table, camera)?;
    x = tape.add_row_broadcast(x, cam)?;

    for blk in 0..dims.visual_blocks {
        x = block_forward(
            tape,
            set,
            &format!("visual.block{blk}"),
            x,
            dims.visual_dim,
            dims.visual_heads,
        )?;
    }
    let gf = tape.param(set, "visual.ln_final.gamma")?;
    let bf = tape.param(set, "visual.ln_final.beta")?;
    let f_seq = tape.layer_norm(x, gf, bf)?;
    let f_v = tape.row(f_seq, 0)?;
    let wp = tape.param(set, "visual.wp")?;
    let r_seq = tape.matmul(f_seq, wp)?;
    let r = tape.row(r_seq, 0)?;
    Ok(VisualFeatures { f_seq, f_v, r_seq, r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, render_image, WorldSpec};

    fn setup() -> (EncoderDims, ParamSet, ImageSample) {
        let dims = EncoderDims::default();
        let mut set = ParamSet::new();
        let mut rng = StreamRng::new(2, "init");
        init_visual_params(&mut set, &dims, &mut rng);
        let world = generate_world(&WorldSpec::default()).unwrap();
        let mut render_rng = StreamRng::new(5, "render");
        let sample = render_image(&world, 0, 1, 0, &mut render_rng).unwrap();
        (dims, set, sample)
    }

    #[test]
    fn output_shapes() {
        let (dims, set, sample) = setup();
        let tape = Tape::new();
        let out = encode_image(&tape, &set, &dims, &sample).unwrap();
        assert_eq!(tape.shape(out.f_seq), vec![dims.tokens_per_image + 1, dims.visual_dim]);
        assert_eq!(tape.shape(out.f_v), vec![dims.visual_dim]);
        assert_eq!(tape.shape(out.r_seq), vec![dims.tokens_per_image + 1, dims.cross_modal_dim]);
        assert_eq!(tape.shape(out.r), vec![dims.cross_modal_dim]);
    }

    #[test]
    fn camera_id_changes_features() {
        let (dims, set, mut sample) = setup();
        let tape = Tape::new();
        let a = encode_image(&tape, &set, &dims, &sample).unwrap();
        sample.camera = 2;
        let b = encode_image(&tape, &set, &dims, &sample).unwrap();
        assert_ne!(tape.value(a.f_seq), tape.value(b.f_seq));
    }

    #[test]
    fn camera_out_of_range() {
        let (dims, set, mut sample) = setup();
        sample.camera = 99;
        let tape = Tape::new();
        assert!(matches!(
            encode_image(&tape, &set, &dims, &sample),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn degenerate_forward_reduces_to_class_token() {
        // zero every weight except a standardized class token; with blocks
        // inert the class row passes through and final LN leaves a
        // zero-mean unit-variance vector essentially unchanged.
        let mut dims = EncoderDims::default();
        dims.positional = false;
        let mut set = ParamSet::new();
        let mut rng = StreamRng::new(2, "init");
        init_visual_params(&mut set, &dims, &mut rng);
        for p in set.iter_mut() {
            if p.name.contains("gamma") {
                p.value.fill(1.0);
            } else if p.name == "visual.class_token" {
                continue;
            } else {
                p.value.fill(0.0);
            }
        }
        let dv = dims.visual_dim;
        let cls: Vec<f64> = (0..dv)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect(); // mean 0, variance 1
        set.get_mut("visual.class_token").unwrap().value =
            RealArray::new(vec![dv], cls.clone()).unwrap();

        let world = generate_world(&WorldSpec::default()).unwrap();
        let mut render_rng = StreamRng::new(5, "render");
        let sample = render_image(&world, 0, 1, 0, &mut render_rng).unwrap();
        let tape = Tape::new();
        let out = encode_image(&tape, &set, &dims, &sample).unwrap();
        let f_v = tape.value(out.f_v);
        for (got, want) in f_v.data().iter().zip(&cls) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn token_permutation_only_matters_through_attention() {
        // with positional embeddings off, permuting input tokens leaves the
        // class feature unchanged up to float reassociation
        let mut dims = EncoderDims::default();
        dims.positional = false;
        let mut set = ParamSet::new();
        let mut rng = StreamRng::new(3, "init");
        init_visual_params(&mut set, &dims, &mut rng);
        let world = generate_world(&WorldSpec::default()).unwrap();
        let mut render_rng = StreamRng::new(6, "render");
        let sample = render_image(&world, 1, 0, 0, &mut render_rng).unwrap();

        let tape = Tape::new();
        let base = encode_image(&tape, &set, &dims, &sample).unwrap();
        let mut permuted = sample.clone();
        let n = dims.tokens_per_image;
        let d = dims.input_dim;
        let mut data = Vec::with_capacity(n * d);
        for t in (0..n).rev() {
            data.extend_from_slice(sample.tokens.row_slice(t));
        }
        permuted.tokens = RealArray::new(vec![n, d], data).unwrap();
        let perm = encode_image(&tape, &set, &dims, &permuted).unwrap();
        let a = tape.value(base.f_v);
        let b = tape.value(perm.f_v);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}
