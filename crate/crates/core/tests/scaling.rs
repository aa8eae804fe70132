mod common;

use common::{growth_identity_error, proxy, small_config, transfer_case_failures};
use flashlab::blocks::Model;
use flashlab::diffcore::ParamClass;
use flashlab::scaling::{grow_optimizer, stack_grow, transfer_hparams, GrowthPlan, HParams, MomentPolicy};
use flashlab::stability::{AdamConfig, AdamState, PerClass};
use proptest::prelude::*;

#[test]
fn transfer_rule_cells() {
    let bad = transfer_case_failures();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn transfer_composition_is_exact_for_powers_of_two() {
    for (a, b) in [(2.0, 4.0), (8.0, 0.5), (0.25, 16.0), (1.0, 8.0)] {
        let two = transfer_hparams(&transfer_hparams(&proxy(), a).unwrap(), b).unwrap();
        assert_eq!(two, transfer_hparams(&proxy(), a * b).unwrap());
    }
    assert_eq!(transfer_hparams(&proxy(), 1.0).unwrap(), proxy());
    assert!(transfer_hparams(&proxy(), 0.0).is_err());
    assert!(transfer_hparams(&proxy(), f64::NAN).is_err());
}

proptest! {
    #[test]
    fn transfer_composition_law(e1 in -6i32..7, e2 in -6i32..7, x in 1e-6f64..1.0) {
        let hp = HParams { init_var: PerClass::uniform(x), lr: PerClass::uniform(x / 3.0) };
        let (s1, s2) = (2f64.powi(e1), 2f64.powi(e2));
        let two = transfer_hparams(&transfer_hparams(&hp, s1).unwrap(), s2).unwrap();
        prop_assert_eq!(two, transfer_hparams(&hp, s1 * s2).unwrap());
    }

    #[test]
    fn transfer_composition_general_factors(s1 in 0.1f64..10.0, s2 in 0.1f64..10.0) {
        let two = transfer_hparams(&transfer_hparams(&proxy(), s1).unwrap(), s2).unwrap();
        let one = transfer_hparams(&proxy(), s1 * s2).unwrap();
        for c in ParamClass::ALL {
            prop_assert!((two.lr.get(c) - one.lr.get(c)).abs() <= 1e-15 * one.lr.get(c));
            prop_assert!((two.init_var.get(c) - one.init_var.get(c)).abs() <= 1e-15 * one.init_var.get(c));
        }
    }
}

#[test]
fn grown_forward_equals_composed_half_model() {
    let worst = growth_identity_error(100);
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn growth_rate_one_is_bitwise_identity() {
    let small = Model::new(small_config(), 3).unwrap();
    let grown = stack_grow(&small, &GrowthPlan::new(1)).unwrap();
    for (a, b) in small.store.iter().zip(grown.store.iter()) {
        assert_eq!((&a.name, &a.value, a.class), (&b.name, &b.value, b.class));
    }
    assert!(stack_grow(&small, &GrowthPlan::new(0)).is_err());
}

#[test]
fn growth_layer_order_and_classes() {
    let small = Model::new(small_config(), 4).unwrap();
    let grown = stack_grow(&small, &GrowthPlan::new(2)).unwrap();
    for i in 0..4 {
        let a = grown.store.value(grown.layers[i].mla1.w_dq);
        let b = small.store.value(small.layers[i % 2].mla1.w_dq);
        assert_eq!(a, b);
    }
    for p in grown.store.iter() {
        let src = p.name.replace("layers.2.", "layers.0.").replace("layers.3.", "layers.1.");
        assert_eq!(small.store.get(small.store.find(&src).unwrap()).class, p.class);
    }
}

#[test]
fn optimizer_growth_keeps_step_and_applies_moment_policy() {
    let small = Model::new(small_config(), 6).unwrap();
    let mut adam = AdamState::new(&small.store, AdamConfig::default()).unwrap();
    adam.step = 17;
    for m in adam.m.iter_mut() {
        m.data_mut().fill(0.5);
    }
    let grown = stack_grow(&small, &GrowthPlan::new(2)).unwrap();
    let reset = grow_optimizer(&small, &grown, &adam, &GrowthPlan::new(2)).unwrap();
    assert_eq!(reset.step, 17);
    assert!(reset.m.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    let plan = GrowthPlan { moments: MomentPolicy::Duplicate, ..GrowthPlan::new(2) };
    let dup = grow_optimizer(&small, &grown, &adam, &plan).unwrap();
    assert!(dup.m.iter().all(|t| t.data().iter().all(|&x| x == 0.5)));
    assert_eq!(dup.m.len(), grown.store.len());
}
