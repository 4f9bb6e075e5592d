//! Invariants of the coupling stage and of the assembled head.

mod common;

use common::{bits, random_image, random_rois};
use couplenet::coupling::CouplingConfig;
use couplenet::gradcheck::micro_model_config;
use couplenet::heads::Model;
use couplenet::roi::RoI;
use proptest::prelude::*;

#[test]
fn l2_sum_argmax_ignores_positive_branch_rescaling() {
    common::check_l2_sum_argmax(10_000, 31).unwrap();
}

#[test]
fn single_branch_models_equal_isolated_branch_pipelines() {
    common::check_single_branch(4).unwrap();
}

fn arb_coupling() -> impl Strategy<Value = CouplingConfig> {
    (0..11usize).prop_map(|i| couplenet::ablation::all_cells()[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_follow_roi_permutations(
        coupling in arb_coupling(),
        context in any::<bool>(),
        seed in 0..1000u64,
        perm in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let model = Model::new(micro_model_config(coupling, context), seed).unwrap();
        let img = random_image(seed + 1, 30, 34);
        let rois = random_rois(seed + 2, perm.len(), 34.0, 30.0);
        let permuted: Vec<RoI> = perm.iter().map(|&i| rois[i]).collect();
        let a = model.predict(&img, &rois).unwrap();
        let b = model.predict(&img, &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(bits(&a[i].cls_scores), bits(&b[j].cls_scores));
            prop_assert_eq!(bits(&a[i].bbox_deltas), bits(&b[j].bbox_deltas));
        }
    }
}
