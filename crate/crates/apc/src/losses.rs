//! Identity, triplet and total objective assembly.

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, RealArray, StreamRng, Tape, Var};

/// Separate classifier heads for the visual and attribute spaces; sharing
/// one would force the two feature widths to agree.
pub fn init_head_params(
    set: &mut ParamSet,
    visual_dim: usize,
    attr_dim: Option<usize>,
    num_classes: usize,
    rng: &mut StreamRng,
) {
    set.insert(
        "head.visual.w",
        crate::encoders::rand_param(rng, &[visual_dim, num_classes], crate::encoders::INIT_SIGMA),
        true,
    );
    if let Some(dc) = attr_dim {
        set.insert(
            "head.attr.w",
            crate::encoders::rand_param(rng, &[dc, num_classes], crate::encoders::INIT_SIGMA),
            true,
        );
    }
}

/// Label-smoothed cross-entropy over `features @ head_w`, averaged over the
/// batch. `features` is `[B x D]`, the head maps `D -> C`.
pub fn identity_loss(
    tape: &Tape,
    features: Var,
    head_w: Var,
    labels: &[usize],
    smoothing: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Parameter(format!(
            "label smoothing must lie in [0, 1), got {smoothing}"
        )));
    }
    let num_classes = tape.shape(head_w)[1];
    let batch = tape.shape(features)[0];
    if labels.len() != batch {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= num_classes {
            return Err(Error::OutOfRange {
                what: "label",
                value: l,
                bound: num_classes,
            });
        }
    }
    let logits = tape.matmul(features, head_w)?;
    let lse = tape.logsumexp_rows(logits); // [B]
    // smoothed target distribution, constant
    let mut q = RealArray::full(&[batch, num_classes], smoothing / num_classes as f64);
    for (i, &l) in labels.iter().enumerate() {
        q.data_mut()[i * num_classes + l] += 1.0 - smoothing;
    }
    let weighted = tape.mul(logits, tape.constant(q))?;
    let nll = tape.sub(tape.sum(lse), tape.sum(weighted))?;
    Ok(tape.scale(nll, 1.0 / batch as f64))
}

/// Batch-hard triplet loss with Euclidean distances. For each anchor the
/// hardest positive is the farthest same-identity sample (the anchor itself
/// counts, so singletons contribute d+ = 0) and the hardest negative the
/// closest other-identity sample.
pub fn triplet_loss(tape: &Tape, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let batch = tape.shape(features)[0];
    if labels.len() != batch {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let gram = tape.matmul(features, tape.transpose(features))?;
    let sq = tape.sum_axis1(tape.mul(features, features)?); // [B]
    let minus2g = tape.scale(gram, -2.0);
    let with_cols = tape.add_row_broadcast(minus2g, sq)?;
    let with_rows = tape.add_row_broadcast(tape.transpose(with_cols), sq)?;
    let clamped = tape.relu(with_rows);
    let dist = tape.sqrt(tape.add_scalar(clamped, 1e-12))?;

    let dvals = tape.value(dist);
    let mut hard_pairs: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for i in 0..batch {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..batch {
            let d = dvals.at(i, j);
            if labels[j] == labels[i] {
                if hardest_pos.map_or(true, |(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.map_or(true, |(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (hardest_pos, hardest_neg) {
            hard_pairs.push(((i, p), (i, n)));
        }
    }
    if hard_pairs.is_empty() {
        return Err(Error::Contract(
            "triplet loss needs at least one anchor with a negative in the batch".into(),
        ));
    }
    let pos_idx: Vec<(usize, usize)> = hard_pairs.iter().map(|&(p, _)| p).collect();
    let neg_idx: Vec<(usize, usize)> = hard_pairs.iter().map(|&(_, n)| n).collect();
    let d_pos = tape.gather(dist, &pos_idx)?;
    let d_neg = tape.gather(dist, &neg_idx)?;
    let gap = tape.add_scalar(tape.sub(d_pos, d_neg)?, margin);
    let hinge = tape.relu(gap);
    Ok(tape.scale(tape.sum(hinge), 1.0 / hard_pairs.len() as f64))
}

/// Finite scalar loss components; optional terms drop out of the total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub id_v: Option<Var>,
    pub id_a: Option<Var>,
    pub tri_v: Option<Var>,
    pub tri_a: Option<Var>,
    pub con: Option<Var>,
    pub orth: Option<Var>,
}

/// `L = L_id(f_a) + L_id(f_v) + L_tri(f_a) + L_tri(f_v) + L_con + kappa * L_orth`.
pub fn total_loss(tape: &Tape, parts: &LossParts, kappa: f64) -> Result<Var> {
    let named = [
        ("id_v", parts.id_v),
        ("id_a", parts.id_a),
        ("tri_v", parts.tri_v),
        ("tri_a", parts.tri_a),
        ("con", parts.con),
    ];
    let mut total: Option<Var> = None;
    for (name, term) in named {
        let Some(v) = term else { continue };
        if !tape.item(v).is_finite() {
            return Err(Error::NonFinite(format!("loss component {name}")));
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, v)?,
            None => v,
        });
    }
    if let Some(orth) = parts.orth {
        if !tape.item(orth).is_finite() {
            return Err(Error::NonFinite("loss component orth".into()));
        }
        let scaled = tape.scale(orth, kappa);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;

    #[test]
    fn identity_loss_uniform_logits_is_ln_c() {
        let tape = Tape::new();
        let f = tape.constant(RealArray::zeros(&[2, 3]));
        let w = tape.constant(RealArray::zeros(&[3, 5]));
        let loss = identity_loss(&tape, f, w, &[0, 4], 0.0).unwrap();
        assert!((tape.item(loss) - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_loss_saturated_logits_vanish() {
        let tape = Tape::new();
        let f = tape.constant(RealArray::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        // logits (+50 on class 1)
        let w = tape.constant(RealArray::new(vec![2, 4], vec![0.0, 50.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let loss = identity_loss(&tape, f, w, &[1], 0.0).unwrap();
        assert!(tape.item(loss) < 1e-9);
    }

    #[test]
    fn identity_loss_matches_hand_expanded_smoothing() {
        let tape = Tape::new();
        let logits = vec![0.5, -1.0, 2.0, 0.0];
        let f = tape.constant(RealArray::new(vec![1, 4], logits.clone()).unwrap());
        let w = tape.constant(RealArray::eye(4));
        let eps = 0.1;
        let label = 2;
        let loss = identity_loss(&tape, f, w, &[label], eps).unwrap();

        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
        let mut hand = 0.0;
        for (k, &z) in logits.iter().enumerate() {
            let q = if k == label { 1.0 - eps + eps / 4.0 } else { eps / 4.0 };
            hand += q * (lse - z);
        }
        assert!((tape.item(loss) - hand).abs() < 1e-12);
    }

    #[test]
    fn identity_loss_rejects_bad_label() {
        let tape = Tape::new();
        let f = tape.constant(RealArray::zeros(&[1, 2]));
        let w = tape.constant(RealArray::zeros(&[2, 3]));
        assert!(identity_loss(&tape, f, w, &[3], 0.0).is_err());
    }

    #[test]
    fn identity_loss_is_nonnegative() {
        let mut rng = StreamRng::new(3, "test");
        for _ in 0..50 {
            let tape = Tape::new();
            let f = tape.constant(RealArray::new(vec![3, 4], rng.normal_vec(12, 0.0, 2.0)).unwrap());
            let w = tape.constant(RealArray::new(vec![4, 6], rng.normal_vec(24, 0.0, 2.0)).unwrap());
            let labels = [rng.below(6), rng.below(6), rng.below(6)];
            let loss = identity_loss(&tape, f, w, &labels, 0.1).unwrap();
            assert!(tape.item(loss) >= 0.0);
        }
    }

    #[test]
    fn triplet_separated_clusters_give_zero() {
        let tape = Tape::new();
        let f = tape.constant(
            RealArray::new(
                vec![4, 2],
                vec![0.0, 0.0, 0.1, 0.0, 10.0, 0.0, 10.1, 0.0],
            )
            .unwrap(),
        );
        let loss = triplet_loss(&tape, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn triplet_coincident_points_give_margin() {
        let tape = Tape::new();
        let f = tape.constant(RealArray::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let loss = triplet_loss(&tape, f, &[0, 1], 0.3).unwrap();
        assert!((tape.item(loss) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn triplet_single_identity_is_contract_error() {
        let tape = Tape::new();
        let f = tape.constant(RealArray::zeros(&[3, 2]));
        assert!(matches!(
            triplet_loss(&tape, f, &[1, 1, 1], 0.3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn triplet_matches_exhaustive_oracle() {
        let mut rng = StreamRng::new(29, "test");
        for case in 0..40 {
            let b = 16;
            let d = 5;
            let feats: Vec<Vec<f64>> = (0..b).map(|_| rng.normal_vec(d, 0.0, 1.0)).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.below(5)).collect();
            if labels.iter().all(|&l| l == labels[0]) {
                continue;
            }
            let margin = 0.3;
            let tape = Tape::new();
            let f = tape.constant(RealArray::from_rows(&feats).unwrap());
            let got = tape.item(triplet_loss(&tape, f, &labels, margin).unwrap());

            // exhaustive O(B^3)-style mining oracle
            let dist = |i: usize, j: usize| -> f64 {
                feats[i]
                    .iter()
                    .zip(&feats[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .max(0.0)
                    .sqrt()
            };
            let mut total = 0.0;
            let mut anchors = 0;
            for i in 0..b {
                let mut dp = f64::NEG_INFINITY;
                let mut dn = f64::INFINITY;
                for j in 0..b {
                    if labels[j] == labels[i] {
                        dp = dp.max(dist(i, j));
                    } else {
                        dn = dn.min(dist(i, j));
                    }
                }
                if dn.is_finite() {
                    total += (dp - dn + margin).max(0.0);
                    anchors += 1;
                }
            }
            let want = total / anchors as f64;
            assert!(
                (got - want).abs() < 1e-6,
                "case {case}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn triplet_is_translation_invariant() {
        let mut rng = StreamRng::new(31, "test");
        let feats: Vec<Vec<f64>> = (0..8).map(|_| rng.normal_vec(3, 0.0, 1.0)).collect();
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let shift = [5.0, -2.0, 3.5];
        let shifted: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().zip(&shift).map(|(a, s)| a + s).collect())
            .collect();
        let eval = |rows: &[Vec<f64>]| {
            let tape = Tape::new();
            let f = tape.constant(RealArray::from_rows(rows).unwrap());
            tape.item(triplet_loss(&tape, f, &labels, 0.3).unwrap())
        };
        assert!((eval(&feats) - eval(&shifted)).abs() < 1e-9);
    }

    #[test]
    fn triplet_grad_check() {
        let mut rng = StreamRng::new(37, "test");
        let mut params = ParamSet::new();
        params.insert(
            "f",
            RealArray::new(vec![6, 3], rng.normal_vec(18, 0.0, 1.0)).unwrap(),
            true,
        );
        let labels = vec![0, 0, 1, 1, 2, 2];
        let report = grad_check(
            |tape, ps| {
                let f = tape.param(ps, "f")?;
                triplet_loss(tape, f, &labels, 0.3)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::new();
        let one = || Some(tape.scalar(1.0));
        let parts = LossParts {
            id_v: one(),
            id_a: one(),
            tri_v: one(),
            tri_a: one(),
            con: one(),
            orth: one(),
        };
        let total = total_loss(&tape, &parts, 0.1).unwrap();
        assert!((tape.item(total) - 5.1).abs() < 1e-12);

        let zero = || Some(tape.scalar(0.0));
        let zeros = LossParts {
            id_v: zero(),
            id_a: zero(),
            tri_v: zero(),
            tri_a: zero(),
            con: zero(),
            orth: zero(),
        };
        assert_eq!(tape.item(total_loss(&tape, &zeros, 0.1).unwrap()), 0.0);
    }

    #[test]
    fn total_loss_gradient_is_sum_of_component_gradients() {
        let mut rng = StreamRng::new(41, "test");
        let mut params = ParamSet::new();
        params.insert("x", RealArray::new(vec![4], rng.normal_vec(4, 0.0, 1.0)).unwrap(), true);
        let report = grad_check(
            |tape, ps| {
                let x = tape.param(ps, "x")?;
                let a = tape.dot(x, x)?;
                let b = tape.sum(tape.abs(x));
                let parts = LossParts {
                    id_v: Some(a),
                    tri_v: Some(b),
                    orth: Some(a),
                    ..Default::default()
                };
                total_loss(tape, &parts, 0.1)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4);

        // linearity against separately computed component gradients
        let tape = Tape::new();
        let x = tape.param(&params, "x").unwrap();
        let a = tape.dot(x, x).unwrap();
        let b = tape.sum(tape.abs(x));
        let parts = LossParts {
            id_v: Some(a),
            tri_v: Some(b),
            orth: Some(a),
            ..Default::default()
        };
        let total = total_loss(&tape, &parts, 0.1).unwrap();
        let g_total = tape.backward(total).unwrap();

        let xv = params.get("x").unwrap().value.clone();
        for i in 0..4 {
            let want = 2.0 * xv.data()[i] * (1.0 + 0.1) + xv.data()[i].signum();
            assert!((g_total["x"].data()[i] - want).abs() < 1e-12);
        }
    }
}
