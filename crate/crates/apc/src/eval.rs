//! Retrieval evaluation and interpretability probes.

use serde::{Deserialize, Serialize};

use crate::apg::{rank_descending, PromptSet};
use crate::error::{Error, Result};
use crate::numerics::RealArray;
use crate::synthworld::World;

/// One gallery or query entry: a feature row plus retrieval metadata.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub features: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcRates {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Retrieval report; the serialized form is the `report.json` schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: CmcRates,
    pub n_query: usize,
    pub n_gallery: usize,
    pub excluded_queries: usize,
    pub feature_width: usize,
    pub config_hash: String,
    /// Per-query average precision (included queries only); not part of the
    /// on-disk schema.
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na / 1.0) / nb
}

/// Rank the gallery per query by descending cosine similarity and compute
/// mAP and CMC at ranks 1/5/10. Gallery entries sharing both identity and
/// camera with the query are excluded from its candidate list; queries left
/// without any correct candidate are excluded and counted.
pub fn compute_map_cmc(
    query: &[EvalItem],
    gallery: &[EvalItem],
    scenario: &str,
    seed: u64,
    config_hash: &str,
    exclude_same_camera: bool,
) -> Result<EvalReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Data("empty query or gallery".into()));
    }
    let width = query[0].features.len();
    let mut per_query_ap = Vec::new();
    let mut excluded = 0usize;
    let mut hits_at = [0usize; 3]; // ranks 1, 5, 10
    for q in query {
        let candidates: Vec<&EvalItem> = gallery
            .iter()
            .filter(|g| !(exclude_same_camera && g.identity == q.identity && g.camera == q.camera))
            .collect();
        let relevant = candidates.iter().filter(|g| g.identity == q.identity).count();
        if relevant == 0 {
            excluded += 1;
            continue;
        }
        let sims: Vec<f64> = candidates
            .iter()
            .map(|g| cosine(&q.features, &g.features))
            .collect();
        let order = rank_descending(&sims);
        let mut ap = 0.0;
        let mut seen_hits = 0usize;
        let mut first_hit_rank = usize::MAX;
        for (rank0, &ci) in order.iter().enumerate() {
            if candidates[ci].identity == q.identity {
                seen_hits += 1;
                ap += seen_hits as f64 / (rank0 + 1) as f64;
                if first_hit_rank == usize::MAX {
                    first_hit_rank = rank0 + 1;
                }
            }
        }
        per_query_ap.push(ap / relevant as f64);
        for (slot, k) in [(0usize, 1usize), (1, 5), (2, 10)] {
            if first_hit_rank <= k {
                hits_at[slot] += 1;
            }
        }
    }
    if per_query_ap.is_empty() {
        return Err(Error::Data(
            "every query was excluded; nothing to evaluate".into(),
        ));
    }
    let n_included = per_query_ap.len();
    let map = per_query_ap.iter().sum::<f64>() / n_included as f64;
    Ok(EvalReport {
        scenario: scenario.to_string(),
        seed,
        map,
        cmc: CmcRates {
            r1: hits_at[0] as f64 / n_included as f64,
            r5: hits_at[1] as f64 / n_included as f64,
            r10: hits_at[2] as f64 / n_included as f64,
        },
        n_query: query.len(),
        n_gallery: gallery.len(),
        excluded_queries: excluded,
        feature_width: width,
        config_hash: config_hash.to_string(),
        per_query_ap,
    })
}

/// Per-attribute retrieval probe against the planted world.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeProbe {
    pub attribute: usize,
    /// Item indices ranked by descending cosine to this prompt, truncated
    /// to `top_n`.
    pub ranked: Vec<usize>,
    /// Planted latent attribute this prompt best matches: argmax coordinate
    /// of the mean attribute vector over the top-n images.
    pub best_match: usize,
    /// Fraction of top-n images whose identity carries `best_match`.
    pub purity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub per_attribute: Vec<AttributeProbe>,
    /// Distinct best-match attributes over the prompt count.
    pub recovery_score: f64,
}

/// Items scored in the probe: the projected class feature per image plus
/// the identity it renders.
#[derive(Clone, Debug)]
pub struct ProbeItem {
    pub r: Vec<f64>,
    pub identity: usize,
}

pub fn attribute_probe(
    prompts: &PromptSet,
    items: &[ProbeItem],
    world: &World,
    top_n: usize,
) -> Result<ProbeReport> {
    if top_n == 0 || top_n > items.len() {
        return Err(Error::OutOfRange {
            what: "top_n",
            value: top_n,
            bound: items.len() + 1,
        });
    }
    let s = prompts.prompts.rows();
    let a_count = world.spec.num_latent_attributes;
    let mut per_attribute = Vec::with_capacity(s);
    let mut seen = std::collections::BTreeSet::new();
    for j in 0..s {
        let g = prompts.prompts.row_slice(j);
        let sims: Vec<f64> = items.iter().map(|it| cosine(&it.r, g)).collect();
        let order = rank_descending(&sims);
        let ranked: Vec<usize> = order[..top_n].to_vec();
        let mut mean_attr = vec![0.0; a_count];
        for &ri in &ranked {
            let vec = &world.identities[items[ri].identity].attribute_vector;
            for (m, &v) in mean_attr.iter_mut().zip(vec) {
                *m += v / top_n as f64;
            }
        }
        let best_match = rank_descending(&mean_attr)[0];
        let purity = ranked
            .iter()
            .filter(|&&ri| {
                world.identities[items[ri].identity].attribute_vector[best_match] > 0.0
            })
            .count() as f64
            / top_n as f64;
        seen.insert(best_match);
        per_attribute.push(AttributeProbe {
            attribute: j,
            ranked,
            best_match,
            purity,
        });
    }
    Ok(ProbeReport {
        recovery_score: seen.len() as f64 / s as f64,
        per_attribute,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GramReport {
    /// Row-normalized Gram matrix of the prompt vectors, `[S x S]`.
    pub matrix: RealArray,
    /// Summaries over the raw cosine Gram (off-diagonal entries).
    pub mean_abs_off_diag: f64,
    pub max_abs_off_diag: f64,
}

/// Gram matrix of prompt rows (cosine, rows are unit-norm), reported after
/// L2 row normalization; summary statistics come from the raw cosine Gram.
pub fn gram_report(prompts: &PromptSet) -> Result<GramReport> {
    let s = prompts.prompts.rows();
    if s < 2 {
        return Err(Error::BadShape {
            op: "gram_report",
            expected: "at least two prompts".into(),
            got: prompts.prompts.shape().to_vec(),
        });
    }
    let mut gram = RealArray::zeros(&[s, s]);
    for i in 0..s {
        for j in 0..s {
            gram.data_mut()[i * s + j] =
                cosine(prompts.prompts.row_slice(i), prompts.prompts.row_slice(j));
        }
    }
    let mut mean = 0.0;
    let mut max: f64 = 0.0;
    for i in 0..s {
        for j in 0..s {
            if i != j {
                let v = gram.at(i, j).abs();
                mean += v;
                max = max.max(v);
            }
        }
    }
    mean /= (s * (s - 1)) as f64;
    let mut matrix = gram.clone();
    for i in 0..s {
        let norm = matrix.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for j in 0..s {
            matrix.data_mut()[i * s + j] /= norm;
        }
    }
    Ok(GramReport {
        matrix,
        mean_abs_off_diag: mean,
        max_abs_off_diag: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamRng;

    fn item(features: Vec<f64>, identity: usize, camera: usize) -> EvalItem {
        EvalItem {
            features,
            identity,
            camera,
        }
    }

    #[test]
    fn single_query_rank_one() {
        let query = vec![item(vec![1.0, 0.0], 7, 0)];
        let mut gallery = vec![item(vec![0.99, 0.1], 7, 1)];
        for i in 0..9 {
            gallery.push(item(vec![-1.0, 0.1 * i as f64], 100 + i, 0));
        }
        let rep = compute_map_cmc(&query, &gallery, "t", 0, "h", true).unwrap();
        assert_eq!(rep.map, 1.0);
        assert_eq!(rep.cmc.r1, 1.0);
        assert_eq!(rep.excluded_queries, 0);
    }

    #[test]
    fn hand_computed_ap_five_sixths() {
        // correct items end up at ranks 1 and 3 of 5
        let query = vec![item(vec![1.0, 0.0], 1, 0)];
        let gallery = vec![
            item(vec![1.0, 0.0], 1, 1),    // sim 1.0   rank 1, hit
            item(vec![1.0, 0.4], 2, 0),    // rank 2
            item(vec![1.0, 0.7], 1, 1),    // rank 3, hit
            item(vec![0.0, 1.0], 3, 0),    // far
            item(vec![-1.0, 0.0], 4, 0),   // farthest
        ];
        let rep = compute_map_cmc(&query, &gallery, "t", 0, "h", true).unwrap();
        assert!((rep.map - 5.0 / 6.0).abs() < 1e-12, "{}", rep.map);
    }

    #[test]
    fn same_camera_same_identity_is_excluded() {
        let query = vec![item(vec![1.0, 0.0], 1, 0)];
        let gallery = vec![
            item(vec![1.0, 0.0], 1, 0), // would be rank 1, excluded
            item(vec![0.9, 0.3], 1, 1),
            item(vec![0.0, 1.0], 2, 0),
        ];
        let rep = compute_map_cmc(&query, &gallery, "t", 0, "h", true).unwrap();
        assert_eq!(rep.map, 1.0); // cross-camera match promoted to rank 1
        let rep2 = compute_map_cmc(&query, &gallery, "t", 0, "h", false).unwrap();
        assert_eq!(rep2.map, 1.0); // both relevant, ranks 1 and 2: (1 + 1)/2
    }

    #[test]
    fn query_without_valid_match_is_counted_not_dropped() {
        let query = vec![
            item(vec![1.0, 0.0], 1, 0),
            item(vec![0.0, 1.0], 9, 0), // identity 9 absent from gallery
        ];
        let gallery = vec![item(vec![1.0, 0.1], 1, 1), item(vec![0.5, 0.5], 2, 0)];
        let rep = compute_map_cmc(&query, &gallery, "t", 0, "h", true).unwrap();
        assert_eq!(rep.excluded_queries, 1);
        assert_eq!(rep.n_query, 2);
        assert_eq!(rep.per_query_ap.len(), 1);
    }

    /// Brute-force oracle: ranks via pairwise comparison counts, AP and CMC
    /// recomputed from scratch. Exact equality is required.
    fn oracle_map_cmc(query: &[EvalItem], gallery: &[EvalItem]) -> (f64, f64, f64, f64) {
        let mut aps = Vec::new();
        let mut c1 = 0;
        let mut c5 = 0;
        let mut c10 = 0;
        for q in query {
            let cands: Vec<&EvalItem> = gallery
                .iter()
                .filter(|g| !(g.identity == q.identity && g.camera == q.camera))
                .collect();
            let relevant = cands.iter().filter(|g| g.identity == q.identity).count();
            if relevant == 0 {
                continue;
            }
            let sims: Vec<f64> = cands.iter().map(|g| cosine(&q.features, &g.features)).collect();
            // rank of candidate i = 1 + number of candidates strictly more similar
            // (ties broken by index, matching stable descending sort)
            let rank = |i: usize| -> usize {
                1 + sims
                    .iter()
                    .enumerate()
                    .filter(|&(j, &s)| s > sims[i] || (s == sims[i] && j < i))
                    .count()
            };
            let mut hit_ranks: Vec<usize> =
                (0..cands.len()).filter(|&i| cands[i].identity == q.identity).map(rank).collect();
            hit_ranks.sort_unstable();
            let ap: f64 = hit_ranks
                .iter()
                .enumerate()
                .map(|(h, &r)| (h + 1) as f64 / r as f64)
                .sum::<f64>()
                / relevant as f64;
            aps.push(ap);
            let first = hit_ranks[0];
            if first <= 1 {
                c1 += 1;
            }
            if first <= 5 {
                c5 += 1;
            }
            if first <= 10 {
                c10 += 1;
            }
        }
        let n = aps.len() as f64;
        (aps.iter().sum::<f64>() / n, c1 as f64 / n, c5 as f64 / n, c10 as f64 / n)
    }

    #[test]
    fn matches_brute_force_oracle_on_small_instances() {
        let mut rng = StreamRng::new(55, "test");
        let mut tried = 0;
        while tried < 50 {
            let n_ids = 2 + rng.below(4);
            let gallery_n = 4 + rng.below(9); // <= 12
            let d = 3;
            let gallery: Vec<EvalItem> = (0..gallery_n)
                .map(|_| item(rng.normal_vec(d, 0.0, 1.0), rng.below(n_ids), rng.below(3)))
                .collect();
            let query: Vec<EvalItem> = (0..1 + rng.below(4))
                .map(|_| item(rng.normal_vec(d, 0.0, 1.0), rng.below(n_ids), rng.below(3)))
                .collect();
            let rep = match compute_map_cmc(&query, &gallery, "t", 0, "h", true) {
                Ok(r) => r,
                Err(_) => continue, // all queries excluded; resample
            };
            let (map, r1, r5, r10) = oracle_map_cmc(&query, &gallery);
            assert_eq!(rep.map, map);
            assert_eq!(rep.cmc.r1, r1);
            assert_eq!(rep.cmc.r5, r5);
            assert_eq!(rep.cmc.r10, r10);
            assert!(rep.cmc.r1 <= rep.cmc.r5 && rep.cmc.r5 <= rep.cmc.r10);
            tried += 1;
        }
    }

    fn toy_world() -> World {
        let spec = crate::synthworld::WorldSpec {
            num_latent_attributes: 3,
            num_identities: 6,
            ..Default::default()
        };
        let mut world = crate::synthworld::generate_world(&spec).unwrap();
        for (i, rec) in world.identities.iter_mut().enumerate() {
            let mut v = vec![0.0; 3];
            v[i % 3] = 1.0;
            rec.attribute_vector = v;
        }
        world
    }

    #[test]
    fn probe_ranking_matches_sort_oracle_and_top_n_is_permutation() {
        let world = toy_world();
        let mut rng = StreamRng::new(3, "test");
        let items: Vec<ProbeItem> = (0..12)
            .map(|i| ProbeItem {
                r: rng.normal_vec(4, 0.0, 1.0),
                identity: i % 6,
            })
            .collect();
        let mut prompts = RealArray::zeros(&[2, 4]);
        for (i, v) in rng.normal_vec(8, 0.0, 1.0).iter().enumerate() {
            prompts.data_mut()[i] = *v;
        }
        let ps = PromptSet {
            prompts,
            step: 0,
        };
        let rep = attribute_probe(&ps, &items, &world, items.len()).unwrap();
        for probe in &rep.per_attribute {
            let mut sorted = probe.ranked.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..items.len()).collect::<Vec<_>>());
            // sort oracle on similarities
            let g = ps.prompts.row_slice(probe.attribute);
            let sims: Vec<f64> = items.iter().map(|it| cosine(&it.r, g)).collect();
            for w in probe.ranked.windows(2) {
                assert!(sims[w[0]] >= sims[w[1]]);
            }
        }
    }

    #[test]
    fn probe_with_oracle_prompts_finds_planted_attributes() {
        // items whose r IS the attribute direction; prompts injected as the
        // same directions must retrieve exactly the carriers
        let world = toy_world();
        let dirs = [
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let items: Vec<ProbeItem> = (0..12)
            .map(|i| {
                let id = i % 6;
                ProbeItem {
                    r: dirs[id % 3].clone(),
                    identity: id,
                }
            })
            .collect();
        let ps = PromptSet {
            prompts: RealArray::from_rows(&dirs.to_vec()).unwrap(),
            step: 0,
        };
        let rep = attribute_probe(&ps, &items, &world, 4).unwrap();
        for (j, probe) in rep.per_attribute.iter().enumerate() {
            assert_eq!(probe.best_match, j);
            assert_eq!(probe.purity, 1.0);
        }
        assert_eq!(rep.recovery_score, 1.0);
    }

    #[test]
    fn gram_orthonormal_prompts() {
        let ps = PromptSet {
            prompts: RealArray::eye(4),
            step: 0,
        };
        let rep = gram_report(&ps).unwrap();
        assert_eq!(rep.mean_abs_off_diag, 0.0);
        assert_eq!(rep.max_abs_off_diag, 0.0);
    }

    #[test]
    fn gram_identical_pair_hand_computed() {
        let ps = PromptSet {
            prompts: RealArray::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
            step: 0,
        };
        let rep = gram_report(&ps).unwrap();
        // raw cosine off-diagonal is 1; after L2 row normalization of the
        // [1 1; 1 1] Gram each entry is 1/sqrt(2)
        assert_eq!(rep.max_abs_off_diag, 1.0);
        let want = 1.0 / 2.0f64.sqrt();
        for &v in rep.matrix.data() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_is_symmetric_before_normalization() {
        let mut rng = StreamRng::new(8, "test");
        let mut rows = Vec::new();
        for _ in 0..5 {
            let mut v = rng.normal_vec(6, 0.0, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
        let ps = PromptSet {
            prompts: RealArray::from_rows(&rows).unwrap(),
            step: 0,
        };
        // recompute raw gram the way the report does
        let s = 5;
        for i in 0..s {
            for j in 0..s {
                let a = cosine(&rows[i], &rows[j]);
                let b = cosine(&rows[j], &rows[i]);
                assert!((a - b).abs() < 1e-15);
            }
        }
        let _ = gram_report(&ps).unwrap();
    }
}
