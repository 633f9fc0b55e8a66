use super::{InterventionError, InterventionSpec, KnockoutMode, KnockoutVariant, Result};
use crate::attention::{token_index, Token, NUM_VIEWS, SEQ_LEN, TOKENS_PER_VIEW};
use crate::scene::{Direction, PatchCorrespondences};
use crate::tensor_io::{AttentionRecord, AttentionSpace, AttentionStorage};

/// In-place softmax with f64 accumulation; `-inf` entries become 0.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| (f64::from(v) - f64::from(max)).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    for (r, e) in row.iter_mut().zip(exps) {
        *r = (e / sum) as f32;
    }
}

fn softmax_all(rec: &mut AttentionRecord) {
    for head in 0..rec.n_heads {
        for q in 0..SEQ_LEN {
            softmax_row(rec.row_mut(head, q).expect("dense row"));
        }
    }
    rec.space = AttentionSpace::Probabilities;
}

/// Core-side reference of a knockout on a single layer's attention, for
/// checking the exporter's in-model execution. Effects do not propagate
/// to other layers. The result is always in probability space.
///
/// `ground_truth` supplies patch correspondences when the spec refers to
/// them.
pub fn simulate_knockout(
    attn: &AttentionRecord,
    spec: &InterventionSpec,
    ground_truth: Option<&PatchCorrespondences>,
) -> Result<AttentionRecord> {
    spec.validate()?;
    if !attn.is_dense() {
        return Err(InterventionError::NeedsDense);
    }
    let needs_logits = spec.mode == KnockoutMode::TargetedZeroResoftmax
        || (spec.mode == KnockoutMode::FullMapZero
            && spec.variant == KnockoutVariant::PreSoftmaxMask);
    if needs_logits && attn.space != AttentionSpace::Logits {
        return Err(InterventionError::NeedsLogits);
    }
    let heads = spec.heads_in_layer(attn.layer);
    if let Some(&h) = heads.iter().find(|&&h| h >= attn.n_heads) {
        return Err(InterventionError::Schema(format!(
            "head {h} not present in layer {}",
            attn.layer
        )));
    }
    let corr = if spec.mode.is_localized() {
        spec.resolve_correspondences(ground_truth)?
    } else {
        PatchCorrespondences::default()
    };
    let mut out = attn.clone();
    if heads.is_empty() {
        if out.space == AttentionSpace::Logits {
            softmax_all(&mut out);
        }
        return Ok(out);
    }
    match (spec.mode, spec.variant) {
        (KnockoutMode::FullMapZero, KnockoutVariant::PostSoftmaxZero) => {
            if out.space == AttentionSpace::Logits {
                softmax_all(&mut out);
            }
            let AttentionStorage::Dense(data) = &mut out.storage else {
                unreachable!("checked dense")
            };
            let slab = SEQ_LEN as usize * SEQ_LEN as usize;
            for &h in &heads {
                data[h as usize * slab..(h as usize + 1) * slab].fill(0.0);
            }
        }
        (KnockoutMode::FullMapZero, KnockoutVariant::PreSoftmaxMask) => {
            for &h in &heads {
                for q in 0..SEQ_LEN {
                    out.row_mut(h, q).expect("dense row").fill(0.0);
                }
            }
            softmax_all(&mut out);
        }
        (KnockoutMode::CorrespondingRowZero, _) => {
            if out.space == AttentionSpace::Logits {
                softmax_all(&mut out);
            }
            for &h in &heads {
                for_each_source(&corr, |dir, source, _| {
                    let q = token_index(u32::from(dir.source_view()), Token::Patch(source))
                        .expect("valid patch");
                    let other = u32::from(dir.target_view()) * TOKENS_PER_VIEW;
                    out.row_mut(h, q).expect("dense row")
                        [other as usize..(other + TOKENS_PER_VIEW) as usize]
                        .fill(0.0);
                });
            }
        }
        (KnockoutMode::TargetedZeroResoftmax, _) => {
            for &h in &heads {
                for_each_source(&corr, |dir, source, targets| {
                    let q = token_index(u32::from(dir.source_view()), Token::Patch(source))
                        .expect("valid patch");
                    let row = out.row_mut(h, q).expect("dense row");
                    for &t in targets {
                        let c = token_index(u32::from(dir.target_view()), Token::Patch(t))
                            .expect("valid patch");
                        row[c as usize] = f32::NEG_INFINITY;
                    }
                });
            }
            softmax_all(&mut out);
        }
    }
    debug_assert_eq!(NUM_VIEWS, 2);
    Ok(out)
}

fn for_each_source(
    corr: &PatchCorrespondences,
    mut f: impl FnMut(Direction, u32, &std::collections::BTreeSet<u32>),
) {
    for dir in Direction::BOTH {
        for (&source, targets) in corr.map(dir) {
            f(dir, source, targets);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::{CorrespondenceRef, HeadTarget};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn random_logits(layer: u32, n_heads: u32, seed: u64) -> AttentionRecord {
        let mut rng = stream_rng(seed, 0);
        let n = n_heads as usize * SEQ_LEN as usize * SEQ_LEN as usize;
        AttentionRecord::dense(
            layer,
            n_heads,
            AttentionSpace::Logits,
            (0..n).map(|_| rng.random_range(-4.0..4.0)).collect(),
        )
        .unwrap()
    }

    fn probs(layer: u32, n_heads: u32, seed: u64) -> AttentionRecord {
        let mut r = random_logits(layer, n_heads, seed);
        softmax_all(&mut r);
        r
    }

    fn spec(mode: KnockoutMode, targets: &[(u32, u32)]) -> InterventionSpec {
        InterventionSpec::new(
            "t",
            mode,
            targets
                .iter()
                .map(|&(layer, head)| HeadTarget { layer, head })
                .collect(),
        )
    }

    #[test]
    fn full_map_zero_touches_only_targeted_heads() {
        let attn = probs(5, 3, 1);
        let out = simulate_knockout(
            &attn,
            &spec(KnockoutMode::FullMapZero, &[(5, 1), (6, 0)]),
            None,
        )
        .unwrap();
        for q in 0..SEQ_LEN {
            assert!(out.row(1, q).unwrap().iter().all(|&v| v == 0.0));
            assert_eq!(out.row(0, q).unwrap(), attn.row(0, q).unwrap());
            assert_eq!(out.row(2, q).unwrap(), attn.row(2, q).unwrap());
        }
        let other_layer =
            simulate_knockout(&attn, &spec(KnockoutMode::FullMapZero, &[(7, 1)]), None).unwrap();
        assert_eq!(other_layer, attn);
    }

    #[test]
    fn pre_softmax_mask_gives_uniform_rows() {
        let attn = random_logits(2, 2, 3);
        let mut s = spec(KnockoutMode::FullMapZero, &[(2, 0)]);
        s.variant = KnockoutVariant::PreSoftmaxMask;
        let out = simulate_knockout(&attn, &s, None).unwrap();
        let u = 1.0 / SEQ_LEN as f32;
        assert!(out
            .row(0, 17)
            .unwrap()
            .iter()
            .all(|&v| (v - u).abs() < 1e-9));
        assert!(matches!(
            simulate_knockout(&probs(2, 2, 3), &s, None),
            Err(InterventionError::NeedsLogits)
        ));
    }

    fn corr() -> PatchCorrespondences {
        PatchCorrespondences::from_pairs([(10, 20), (10, 21), (11, 21), (500, 600)])
    }

    #[test]
    fn row_zero_touches_exactly_the_corresponding_rows() {
        let attn = probs(12, 2, 4);
        let out = simulate_knockout(
            &attn,
            &spec(KnockoutMode::CorrespondingRowZero, &[(12, 1)]),
            Some(&corr()),
        )
        .unwrap();
        let c = corr();
        let mut changed = [0usize; 2];
        for q in 0..SEQ_LEN {
            assert_eq!(out.row(0, q).unwrap(), attn.row(0, q).unwrap());
            let (a, b) = (attn.row(1, q).unwrap(), out.row(1, q).unwrap());
            if a != b {
                let (view, _) = crate::attention::token_at(q).unwrap();
                changed[view as usize] += 1;
                let other = ((1 - view) * TOKENS_PER_VIEW) as usize;
                let own = (view * TOKENS_PER_VIEW) as usize;
                assert!(b[other..other + TOKENS_PER_VIEW as usize]
                    .iter()
                    .all(|&v| v == 0.0));
                assert_eq!(
                    &b[own..own + TOKENS_PER_VIEW as usize],
                    &a[own..own + TOKENS_PER_VIEW as usize]
                );
            }
        }
        assert_eq!(
            changed,
            [
                c.map(Direction::OneToTwo).len(),
                c.map(Direction::TwoToOne).len()
            ]
        );
        assert_eq!(changed, [3, 3]);
    }

    #[test]
    fn resoftmax_is_row_stochastic_with_zeroed_targets() {
        let attn = random_logits(14, 1, 5);
        let mut s = spec(KnockoutMode::TargetedZeroResoftmax, &[(14, 0)]);
        s.correspondences = Some(CorrespondenceRef::Inline {
            pairs: corr().pairs(),
        });
        let out = simulate_knockout(&attn, &s, None).unwrap();
        assert_eq!(out.space, AttentionSpace::Probabilities);
        let q = token_index(0, Token::Patch(10)).unwrap();
        let row = out.row(0, q).unwrap();
        let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
        assert!((sum - 1.0).abs() <= 1e-5);
        for t in [20, 21] {
            assert_eq!(row[token_index(1, Token::Patch(t)).unwrap() as usize], 0.0);
        }
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 2);
        let back = token_index(1, Token::Patch(21)).unwrap();
        let row = out.row(0, back).unwrap();
        assert_eq!(row[token_index(0, Token::Patch(10)).unwrap() as usize], 0.0);
        assert_eq!(row[token_index(0, Token::Patch(11)).unwrap() as usize], 0.0);
        assert!(matches!(
            simulate_knockout(&probs(14, 1, 5), &s, None),
            Err(InterventionError::NeedsLogits)
        ));
    }

    #[test]
    fn sparse_records_are_rejected() {
        let sparse = probs(1, 1, 2).to_sparse(4).unwrap();
        assert!(matches!(
            simulate_knockout(&sparse, &spec(KnockoutMode::FullMapZero, &[(1, 0)]), None),
            Err(InterventionError::NeedsDense)
        ));
    }

    #[test]
    fn softmax_handles_masked_entries() {
        let mut r = [0.0f32, f32::NEG_INFINITY, 0.0];
        softmax_row(&mut r);
        assert_eq!(r, [0.5, 0.0, 0.5]);
        let mut all = [f32::NEG_INFINITY; 2];
        softmax_row(&mut all);
        assert_eq!(all, [0.0, 0.0]);
    }
}
