//! Fast–slow training state: paired parameter streams, EMA slow updates,
//! identity prototype banks and the prototype contrastive loss.

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, RealArray, StreamRng, Tape, Var};

#[derive(Clone, Debug)]
pub struct FastSlowState {
    /// Gradient-trained stream.
    pub fast: ParamSet,
    /// EMA stream; parameters are frozen so no optimizer or backward pass
    /// can ever touch them.
    pub slow: ParamSet,
    /// Momentum m: slow <- m * slow + (1 - m) * fast.
    pub momentum: f64,
    /// Steps between slow updates.
    pub update_interval: usize,
}

impl FastSlowState {
    pub fn new(fast: ParamSet, momentum: f64, update_interval: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if update_interval == 0 {
            return Err(Error::Parameter("update_interval must be >= 1".into()));
        }
        let mut slow = fast.clone();
        slow.freeze();
        Ok(FastSlowState {
            fast,
            slow,
            momentum,
            update_interval,
        })
    }
}

/// `slow <- m * slow + (1 - m) * fast`, elementwise; fast is untouched.
pub fn ema_update(state: &mut FastSlowState) -> Result<()> {
    state.fast.check_aligned(&state.slow)?;
    let m = state.momentum;
    for fast_p in state.fast.iter() {
        let slow_p = state.slow.get_mut(&fast_p.name)?;
        for (s, &f) in slow_p.value.data_mut().iter_mut().zip(fast_p.value.data()) {
            *s = m * *s + (1.0 - m) * f;
        }
    }
    Ok(())
}

/// Per-identity prototypes extracted from the slow stream: one sampled image
/// per training identity.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    /// `[C x D_v]` visual prototypes, stored raw.
    pub h_v: RealArray,
    /// `[C x D_c]` attribute prototypes; absent when the model has no
    /// attribute pathway.
    pub h_a: Option<RealArray>,
    /// Dataset index of the image each row was extracted from.
    pub source_image_ids: Vec<usize>,
    pub build_step: u64,
}

impl PrototypeBank {
    pub fn num_identities(&self) -> usize {
        self.h_v.rows()
    }
}

/// Build a bank by sampling one image per identity through `forward`
/// (a slow-stream feature extractor running without gradients).
pub fn build_prototypes(
    images_by_identity: &[Vec<usize>],
    forward: impl Fn(usize) -> Result<(Vec<f64>, Option<Vec<f64>>)>,
    rng: &mut StreamRng,
    build_step: u64,
) -> Result<PrototypeBank> {
    if images_by_identity.is_empty() {
        return Err(Error::Data("no identities to build prototypes from".into()));
    }
    let mut h_v_rows: Vec<Vec<f64>> = Vec::with_capacity(images_by_identity.len());
    let mut h_a_rows: Vec<Vec<f64>> = Vec::with_capacity(images_by_identity.len());
    let mut source_image_ids = Vec::with_capacity(images_by_identity.len());
    for (c, images) in images_by_identity.iter().enumerate() {
        if images.is_empty() {
            return Err(Error::Data(format!("identity {c} has zero images")));
        }
        let pick = images[rng.below(images.len())];
        source_image_ids.push(pick);
        let (f_v, f_a) = forward(pick)?;
        h_v_rows.push(f_v);
        if let Some(a) = f_a {
            h_a_rows.push(a);
        }
        if h_a_rows.len() != 0 && h_a_rows.len() != h_v_rows.len() {
            return Err(Error::Contract(
                "inconsistent attribute features across prototype rows".into(),
            ));
        }
    }
    let h_a = if h_a_rows.is_empty() {
        None
    } else {
        Some(RealArray::from_rows(&h_a_rows)?)
    };
    Ok(PrototypeBank {
        h_v: RealArray::from_rows(&h_v_rows)?,
        h_a,
        source_image_ids,
        build_step,
    })
}

/// Unit-normalized transpose of a prototype matrix, ready for similarity
/// lookups as a tape constant.
fn normalized_transpose(h: &RealArray) -> RealArray {
    let (c, d) = (h.rows(), h.cols());
    let mut out = RealArray::zeros(&[d, c]);
    for i in 0..c {
        let row = h.row_slice(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for j in 0..d {
            out.data_mut()[j * c + i] = row[j] / norm;
        }
    }
    out
}

fn infonce_term(
    tape: &Tape,
    feature: Var,
    h: &RealArray,
    label: usize,
    temperature: f64,
) -> Result<Var> {
    let d = tape.shape(feature)[0];
    if h.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            left: vec![d],
            right: h.shape().to_vec(),
        });
    }
    let hn_t = tape.constant(normalized_transpose(h));
    let fn_row = tape.reshape(tape.l2_normalize(feature)?, vec![1, d])?;
    let sims = tape.matmul(fn_row, hn_t)?; // [1 x C] cosine similarities
    let scaled = tape.scale(sims, 1.0 / temperature);
    let lse = tape.logsumexp_rows(scaled); // [1]
    let own = tape.gather(scaled, &[(0, label)])?; // [1]
    tape.sub(lse, own)
}

/// Prototype contrastive loss. Bank rows are gradient-constant; gradients
/// reach only the live features. With a single identity the loss is exactly
/// zero on both terms.
pub fn contrastive_loss(
    tape: &Tape,
    f_v: Var,
    f_a: Option<Var>,
    label: usize,
    bank: &PrototypeBank,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let c = bank.num_identities();
    if label >= c {
        return Err(Error::OutOfRange {
            what: "identity label",
            value: label,
            bound: c,
        });
    }
    let mut loss = infonce_term(tape, f_v, &bank.h_v, label, temperature)?;
    match (f_a, &bank.h_a) {
        (Some(fa), Some(ha)) => {
            let term = infonce_term(tape, fa, ha, label, temperature)?;
            loss = tape.add(loss, term)?;
        }
        (None, None) => {}
        _ => {
            return Err(Error::Contract(
                "attribute feature and attribute prototypes must be present together".into(),
            ))
        }
    }
    Ok(loss)
}
